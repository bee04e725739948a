#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unistd.h>

#include "doctest.h"
#include "peerdistill/experiment.hpp"
#include "peerdistill/io.hpp"

using namespace peerdistill;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() /
               ("peerdistill_exp_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    FAIL("no column " << name);
    return 0;
  }
};

Csv read_csv(const fs::path& path) {
  Csv csv;
  std::istringstream in(read_file(path));
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  std::getline(in, line);
  csv.header = split(line);
  while (std::getline(in, line)) csv.rows.push_back(split(line));
  return csv;
}

json base_json() {
  return json::parse(R"({
    "task": {"kind": "synthetic", "num_classes": 4, "dims": 6, "per_class": 40, "noise_sigma": 0.5},
    "method": "dwml",
    "peers": [{"model_kind": "mlp", "hidden_dim": 16},
              {"model_kind": "mlp", "hidden_dim": 8},
              {"model_kind": "mlp", "hidden_dim": 4}],
    "trainer": {"inner_steps": 4, "outer_rounds": 5, "batch_size": 16, "val_batch_size": 32,
                "lr_init": 0.01, "lr_final": 0.001},
    "seeds": [1, 2]
  })");
}

ExperimentConfig base_config() { return experiment_config_from_json(base_json()); }

RunOptions options_for(const fs::path& out, std::size_t jobs = 1) {
  RunOptions o;
  o.out = out;
  o.jobs = jobs;
  return o;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto c = base_config();
  REQUIRE(c.peers.size() == 3);
  CHECK(c.peers[0].input_dim == 6);
  CHECK(c.peers[0].num_classes == 4);
  CHECK(c.methods.size() == 1);
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2});

  // to_json is a fixed point of parsing.
  const json once = to_json(c);
  CHECK(to_json(experiment_config_from_json(once)) == once);

  auto bad = base_json();
  bad["extra"] = 1;
  CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);

  bad = base_json();
  bad["trainer"]["alhpa"] = 0.3;
  CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);

  bad = base_json();
  bad["search"] = json::object();
  CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);

  bad = base_json();
  bad.erase("peers");
  CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);

  bad = base_json();
  bad["peers"][0]["input_dim"] = 7;
  CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);

  bad = base_json();
  bad["method"] = "kd";
  CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);

  bad = base_json();
  bad["seeds"] = json::array();
  CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);

  bad = base_json();
  bad["task"]["kind"] = "imagenet";
  CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);

  auto rel = base_json();
  rel["method"] = {{"method", "kd"}, {"teacher_checkpoint", "t.ckpt"}};
  const auto resolved = experiment_config_from_json(rel, "/some/dir");
  CHECK(*resolved.methods[0].teacher_checkpoint == "/some/dir/t.ckpt");
}

TEST_CASE("seed lists") {
  CHECK(parse_seed_list("3") == std::vector<std::uint64_t>{3});
  CHECK(parse_seed_list("1, 2,30") == std::vector<std::uint64_t>{1, 2, 30});
  CHECK_THROWS_AS(parse_seed_list(""), ConfigError);
  CHECK_THROWS_AS(parse_seed_list("1,,2"), ConfigError);
  CHECK_THROWS_AS(parse_seed_list("-1"), ConfigError);
  CHECK_THROWS_AS(parse_seed_list("x"), ConfigError);
  CHECK_THROWS_AS(parse_seed_list("99999999999999999999999"), ConfigError);

  auto c = base_config();
  ::setenv("PEERDISTILL_SEED", "7,8,9", 1);
  apply_seed_override(c);
  ::unsetenv("PEERDISTILL_SEED");
  CHECK(c.seeds == std::vector<std::uint64_t>{7, 8, 9});
  apply_seed_override(c);
  CHECK(c.seeds == std::vector<std::uint64_t>{7, 8, 9});
}

TEST_CASE("pearson") {
  CHECK(pearson({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0));
  CHECK(pearson({1, 2, 3}, {3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(std::isnan(pearson({1, 1, 1}, {1, 2, 3})));
  CHECK(std::isnan(pearson({1}, {1})));
}

TEST_CASE("train writes traces, checkpoints and a report") {
  const auto out = scratch("train");
  const auto c = base_config();
  const auto report = cmd_train(c, options_for(out, 2));
  REQUIRE(report.outcomes.size() == 1);
  REQUIRE(report.outcomes[0].size() == 2);
  for (auto s : c.seeds) {
    const fs::path dir = out / ("seed_" + std::to_string(s));
    CHECK(fs::exists(dir / "metrics.csv"));
    CHECK(fs::exists(dir / "data_manifest.json"));
    for (int i = 0; i < 3; ++i)
      CHECK(fs::exists(dir / "checkpoints" / ("peer_" + std::to_string(i) + ".ckpt")));

    const auto m = read_csv(dir / "metrics.csv");
    CHECK(m.header == std::vector<std::string>{"round", "inner_step", "peer", "loss_ce",
                                               "loss_kl", "loss_total", "lr", "val_acc"});
    CHECK(m.rows.size() == 5 * 4 * 3);

    // Every round's weights lie on the simplex.
    const auto w = read_csv(dir / "weights.csv");
    CHECK(w.header ==
          std::vector<std::string>{"round", "peer", "omega", "hypergradient", "eta"});
    std::map<std::string, double> sums;
    for (const auto& r : w.rows) sums[r[0]] += std::stod(r[2]);
    CHECK(sums.size() == 6);
    for (const auto& [round, total] : sums) CHECK(std::abs(total - 1.0) <= 1e-9);
  }
  CHECK(fs::exists(out / "report.csv"));
  const auto rj = json::parse(read_file(out / "report.json"));
  CHECK(rj["methods"][0]["runs"].size() == 2);
  CHECK(rj["methods"][0]["runs"][0]["peers"][0].contains("omega"));
}

TEST_CASE("a single peer keeps omega at 1") {
  const auto out = scratch("single");
  auto j = base_json();
  j["peers"] = json::array({j["peers"][0]});
  cmd_train(experiment_config_from_json(j), options_for(out));
  for (const char* s : {"seed_1", "seed_2"}) {
    const auto w = read_csv(out / s / "weights.csv");
    CHECK(w.rows.size() == 6);
    for (const auto& r : w.rows) CHECK(std::stod(r[2]) == 1.0);
  }
}

TEST_CASE("dml matches the weighted trainer with the outer loop disabled") {
  const auto out = scratch("dml_eq");
  auto dml = base_json();
  dml["method"] = "dml";
  auto frozen = base_json();
  frozen["trainer"]["freeze_weights"] = true;
  frozen["trainer"]["detach_kl_target"] = true;
  cmd_train(experiment_config_from_json(dml), options_for(out / "dml"));
  cmd_train(experiment_config_from_json(frozen), options_for(out / "dwml"));
  for (const char* s : {"seed_1", "seed_2"}) {
    const auto a = read_csv(out / "dml" / s / "metrics.csv");
    const auto b = read_csv(out / "dwml" / s / "metrics.csv");
    REQUIRE(a.rows.size() == b.rows.size());
    double worst = 0.0;
    for (std::size_t r = 0; r < a.rows.size(); ++r)
      for (const char* col : {"loss_ce", "loss_kl", "loss_total"})
        worst = std::max(worst, std::abs(std::stod(a.rows[r][a.col(col)]) -
                                         std::stod(b.rows[r][b.col(col)])));
    CHECK(worst <= 1e-10);
  }
}

TEST_CASE("rerun from resolved_config reproduces the traces") {
  const auto out = scratch("rerun");
  cmd_train(base_config(), options_for(out / "a", 2));
  const auto again = load_experiment_config(out / "a" / "resolved_config.json");
  cmd_train(again, options_for(out / "b"));
  for (const char* s : {"seed_1", "seed_2"}) {
    CHECK(read_file(out / "a" / s / "metrics.csv") == read_file(out / "b" / s / "metrics.csv"));
    CHECK(read_file(out / "a" / s / "weights.csv") == read_file(out / "b" / s / "weights.csv"));
  }
  CHECK(read_file(out / "a" / "report.csv") == read_file(out / "b" / "report.csv"));
}

TEST_CASE("compare") {
  const auto out = scratch("compare");
  auto j = base_json();
  j.erase("method");
  j["methods"] = {"independent", "dwml", "independent"};
  const auto report = cmd_compare({experiment_config_from_json(j)}, options_for(out, 3));
  REQUIRE(report.methods.size() == 3);
  CHECK(fs::exists(out / "0_independent" / "seed_1" / "metrics.csv"));
  CHECK(fs::exists(out / "2_independent" / "seed_2" / "metrics.csv"));

  const auto csv = read_csv(out / "report.csv");
  CHECK(csv.header ==
        std::vector<std::string>{"method", "seed", "peer_0", "peer_1", "peer_2", "best"});
  // Two seed rows plus mean and std per entry.
  REQUIRE(csv.rows.size() == 12);
  for (std::size_t r = 0; r < 4; ++r) CHECK(csv.rows[r] == csv.rows[8 + r]);
  for (const auto& row : csv.rows) {
    if (row[1] == "mean" || row[1] == "std") continue;
    double best = 0.0;
    for (std::size_t p = 2; p < 5; ++p) best = std::max(best, std::stod(row[p]));
    CHECK(std::stod(row[5]) == best);
  }

  auto single = base_json();
  CHECK_THROWS_AS(cmd_compare({experiment_config_from_json(single)}, options_for(out / "x")),
                  ConfigError);
  auto other = base_json();
  other["task"]["noise_sigma"] = 0.4;
  CHECK_THROWS_AS(cmd_compare({experiment_config_from_json(single),
                               experiment_config_from_json(other)},
                              options_for(out / "y")),
                  ConfigError);
}

TEST_CASE("ablate") {
  const auto out = scratch("ablate");
  auto j = base_json();
  j["ablation"] = {{"sweep", "alpha"}, {"values", {0.2, 0.5, 0.8}}};
  const auto rows = cmd_ablate(experiment_config_from_json(j), options_for(out, 4));
  CHECK(rows.size() == 3 * 2);
  const auto summary = read_csv(out / "summary.csv");
  CHECK(summary.rows.size() == 6);
  CHECK(read_csv(out / "aggregate.csv").rows.size() == 3);
  const auto long_form = read_csv(out / "ablation.csv");
  CHECK(long_form.rows.size() == 3 * 2 * 5 * 4 * 3);
  for (const auto& r : rows) {
    CHECK(r.best_val_acc >= r.mean_val_acc);
    CHECK(r.best_val_acc <= 1.0);
  }

  j["ablation"] = {{"sweep", "peers"}};
  CHECK_THROWS_AS(cmd_ablate(experiment_config_from_json(j), options_for(out / "p")),
                  ConfigError);  // default {1, 2, 4} exceeds three peers
  j["ablation"] = {{"sweep", "peers"}, {"values", {1, 3}}};
  const auto peers = cmd_ablate(experiment_config_from_json(j), options_for(out / "p"));
  REQUIRE(peers.size() == 4);
  CHECK(std::isnan(peers[0].weight_acc_corr));

  j["ablation"] = {{"sweep", "weights_frozen"}};
  const auto frozen = cmd_ablate(experiment_config_from_json(j), options_for(out / "w"));
  REQUIRE(frozen.size() == 4);
  CHECK(frozen[0].value == "dynamic");
  CHECK(frozen[2].value == "frozen");
  CHECK(std::isnan(frozen[2].weight_acc_corr));  // uniform weights

  j["ablation"] = {{"sweep", "sizes"}};
  const auto sizes = cmd_ablate(experiment_config_from_json(j), options_for(out / "s"));
  CHECK(sizes.size() == 3 * 2);
  CHECK(sizes[0].value == std::to_string(count_params(base_config().peers[0])));

  j["ablation"] = {{"sweep", "depth"}};
  CHECK_THROWS_AS(experiment_config_from_json(j), ConfigError);
}

TEST_CASE("kd reads its teacher from a checkpoint") {
  const auto out = scratch("kd");
  auto teacher = base_json();
  teacher["method"] = "independent";
  teacher["peers"] = json::array({{{"model_kind", "mlp"}, {"hidden_dim", 32}}});
  teacher["seeds"] = {1};
  cmd_train(experiment_config_from_json(teacher), options_for(out / "teacher"));

  auto kd = base_json();
  kd["seeds"] = {1};
  kd.erase("method");
  kd["methods"] = {{{"method", "kd"}, {"teacher_checkpoint", "teacher/seed_1/checkpoints/peer_0.ckpt"}},
                   {{"method", "kd_dwml"}, {"teacher_checkpoint", "teacher/seed_1/checkpoints/peer_0.ckpt"}}};
  const auto report = cmd_compare({experiment_config_from_json(kd, out)}, options_for(out / "cmp"));
  REQUIRE(report.outcomes.size() == 2);
  CHECK_FALSE(report.outcomes[0][0][0].omega.has_value());
  CHECK(report.outcomes[1][0][0].omega.has_value());

  kd["methods"][0]["teacher_checkpoint"] = "missing.ckpt";
  CHECK_THROWS_AS(cmd_compare({experiment_config_from_json(kd, out)}, options_for(out / "bad")),
                  DataError);
}

TEST_CASE("search output is deterministic") {
  const auto out = scratch("search");
  const auto c = experiment_config_from_json(json::parse(R"({
    "task": {"kind": "synthetic"},
    "search": {"total_params": 125000000, "num_peers": 2, "budget": 20, "seed": 3}
  })"));
  cmd_search(c, options_for(out / "a", 2));
  cmd_search(c, options_for(out / "b", 1));
  for (const char* f : {"peer_0.json", "peer_1.json", "search.json", "resolved_config.json"})
    CHECK(read_file(out / "a" / f) == read_file(out / "b" / f));
  const auto s = json::parse(read_file(out / "a" / "search.json"));
  CHECK(s["peers"][0]["target"] == 62500000);
  CHECK(s["peers"][1]["target"] == 41666667);
  CHECK_THROWS_AS(cmd_search(base_config(), options_for(out / "c")), ConfigError);
}

#ifdef PEERDISTILL_CLI
TEST_CASE("command line exit codes") {
  const auto dir = scratch("cli");
  auto run = [&](const std::string& args, const char* env = nullptr) {
    std::string cmd;
    if (env) cmd += std::string("PEERDISTILL_SEED=") + env + " ";
    cmd += std::string(PEERDISTILL_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  auto write = [&](const std::string& name, const json& j) {
    write_file_atomic(dir / name, j.dump());
    return (dir / name).string();
  };

  const auto good = write("good.json", base_json());
  CHECK(run("train --config " + good + " --out " + (dir / "ok").string(), "4") == 0);
  CHECK(fs::exists(dir / "ok" / "seed_4" / "weights.csv"));
  CHECK_FALSE(fs::exists(dir / "ok" / "seed_1"));

  auto bad = base_json();
  bad["nope"] = true;
  CHECK(run("train --config " + write("bad.json", bad)) == 2);
  write_file_atomic(dir / "broken.json", "{ not json");
  CHECK(run("train --config " + (dir / "broken.json").string()) == 2);
  CHECK(run("train --config " + (dir / "missing.json").string()) == 2);
  CHECK(run("train") == 2);
  CHECK(run("frobnicate --config " + good) == 2);
  CHECK(run("train --config " + good, "x") == 2);

  const json nodata = json::parse(
      R"({"task": {"kind": "char_lm", "path": "no_such_corpus.txt"}, "method": "dwml",
          "peers": [{"model_kind": "transformer"}]})");
  CHECK(run("train --config " + write("nodata.json", nodata)) == 3);

  auto div = base_json();
  div["trainer"]["lr_init"] = 1e300;
  div["trainer"]["lr_final"] = 1e300;
  CHECK(run("train --config " + write("div.json", div) + " --out " + (dir / "div").string()) ==
        4);
  CHECK(fs::exists(dir / "div" / "seed_1" / "metrics.csv"));
}
#endif
