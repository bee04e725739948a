// peerdistill search|train|compare|ablate --config <file.json> [--jobs N] [--out DIR]
//
// Exit codes: 0 success, 2 config, 3 data, 4 numeric divergence, 1 other.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "peerdistill/error.hpp"
#include "peerdistill/experiment.hpp"
#include "peerdistill/io.hpp"

namespace pd = peerdistill;

namespace {

struct Args {
  std::vector<std::string> configs;
  std::size_t jobs = 1;
  std::string out;
  bool no_checkpoints = false;
};

void add_common(CLI::App* cmd, Args& args, bool many) {
  if (many) {
    cmd->add_option("--config", args.configs, "Experiment config(s); repeatable")->required();
  } else {
    cmd->add_option("--config", args.configs, "Experiment config")->required()->expected(1);
  }
  cmd->add_option("--jobs", args.jobs, "Parallel runs")->check(CLI::PositiveNumber);
  cmd->add_option("--out", args.out, "Output directory (default: config output_dir or ./out)");
  cmd->add_flag("--no-checkpoints", args.no_checkpoints, "Skip peer checkpoints");
}

pd::ExperimentConfig load(const std::string& path) {
  auto c = pd::load_experiment_config(path);
  pd::apply_seed_override(c);
  return c;
}

int run(const std::string& command, const Args& args) {
  std::vector<pd::ExperimentConfig> configs;
  for (const auto& p : args.configs) configs.push_back(load(p));
  pd::RunOptions opts;
  opts.jobs = args.jobs;
  opts.checkpoints = !args.no_checkpoints;
  opts.out = !args.out.empty()                   ? args.out
             : !configs[0].output_dir.empty() ? configs[0].output_dir
                                              : std::string("out");

  if (command == "search") {
    pd::cmd_search(configs[0], opts);
  } else if (command == "train") {
    const auto report = pd::cmd_train(configs[0], opts);
    std::cout << report.to_csv();
  } else if (command == "compare") {
    const auto report = pd::cmd_compare(configs, opts);
    std::cout << report.to_csv();
  } else {
    pd::cmd_ablate(configs[0], opts);
    std::cout << pd::read_file(opts.out / "aggregate.csv");
  }
  std::cerr << "wrote " << opts.out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Peer distillation experiments"};
  app.require_subcommand(1);
  Args args;
  for (const auto* name : {"search", "train", "compare", "ablate"}) {
    auto* cmd = app.add_subcommand(name);
    add_common(cmd, args, std::string(name) == "compare");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, args);
  } catch (const pd::Error& e) {
    std::cerr << "peerdistill: " << e.what() << "\n";
    return pd::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "peerdistill: " << e.what() << "\n";
    return 1;
  }
}
