#pragma once

// Experiment orchestration behind the `peerdistill` command: JSON configs,
// seed fan-out, run directories and reports.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "peerdistill/arch_search.hpp"
#include "peerdistill/baselines.hpp"
#include "peerdistill/data.hpp"

namespace peerdistill {

struct TaskSpec {
  DatasetKind kind = DatasetKind::SyntheticClassification;
  // synthetic
  std::size_t num_classes = 10;
  std::size_t dims = 32;
  std::size_t per_class = 200;
  double noise_sigma = 0.3;
  // Fixed data seed; unset: the run seed.
  std::optional<std::uint64_t> seed;
  // char_lm
  std::string path;
  std::size_t seq_len = 64;

  Dataset load(std::uint64_t run_seed) const;
};

nlohmann::json to_json(const TaskSpec& task);
TaskSpec task_spec_from_json(const nlohmann::json& j);

struct SearchDirective {
  std::int64_t total_params = 125'000'000;
  std::int64_t num_peers = 4;
  SearchSpace space;
  std::size_t budget = 60;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const SearchDirective& s);
SearchDirective search_directive_from_json(const nlohmann::json& j);

enum class SweepKind { Peers, Alpha, WeightsFrozen, Sizes };

struct AblationSpec {
  SweepKind sweep = SweepKind::Alpha;
  // Empty: the default values of the sweep.
  std::vector<nlohmann::json> values;
};

struct ExperimentConfig {
  TaskSpec task;
  std::vector<MethodSpec> methods{MethodSpec{}};
  std::vector<PeerConfig> peers;
  std::optional<SearchDirective> search;
  TrainerConfig trainer;
  std::vector<std::uint64_t> seeds{0};
  std::optional<AblationSpec> ablation;
  std::string output_dir;

  // Exactly one of peers / search, a non-empty seed list, valid parts.
  void validate() const;
};

// Unknown keys are rejected. Relative corpus and teacher paths are resolved
// against `base_dir`. MLP peers may omit input_dim / num_classes and
// transformer peers vocab_size / max_seq_len; they are filled from the task.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                             const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Comma-separated unsigned integers. Throws ConfigError.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);
// Replaces the seed list when PEERDISTILL_SEED is set.
void apply_seed_override(ExperimentConfig& config);

struct RunOptions {
  std::filesystem::path out;
  std::size_t jobs = 1;
  bool checkpoints = true;
};

// Peer i of a run seed is built with this seed, identically for every method.
std::uint64_t peer_init_seed(std::uint64_t run_seed, std::size_t peer);

// Explicit peers, or the result of one search per target.
std::vector<PeerConfig> resolve_peers(const ExperimentConfig& config, std::size_t jobs = 1);

// Writes peer_<i>.json per target (0-based), search.json and resolved_config.json.
void cmd_search(const ExperimentConfig& config, const RunOptions& options);

struct PeerOutcome {
  std::int64_t params = 0;
  double val_acc = 0.0;
  double test_acc = 0.0;
  std::optional<double> omega;
};

struct ComparisonReport {
  std::vector<std::string> methods;  // one per entry, in input order
  std::vector<std::uint64_t> seeds;
  // outcomes[entry][seed][peer]
  std::vector<std::vector<std::vector<PeerOutcome>>> outcomes;

  // method, seed, peer_0..peer_{P-1}, best: test accuracy; then mean and std
  // rows per method.
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

// One method over the seed list: <out>/seed_<s>/{metrics.csv, weights.csv,
// checkpoints/}, report.csv, report.json and resolved_config.json.
ComparisonReport cmd_train(const ExperimentConfig& config, const RunOptions& options);

// Every (config, method) entry over the seed list of the first config. Tasks
// must agree. Runs go to <out>/<index>_<method>/seed_<s>/.
ComparisonReport cmd_compare(const std::vector<ExperimentConfig>& configs,
                             const RunOptions& options);

struct AblationRow {
  std::string sweep;
  std::string value;
  std::uint64_t seed = 0;
  double best_val_acc = 0.0;
  double mean_val_acc = 0.0;
  double weight_acc_corr = 0.0;  // NaN when undefined
};

// ablation.csv (long format), summary.csv (one row per sweep point and seed),
// aggregate.csv (mean and std over seeds) and resolved_config.json.
std::vector<AblationRow> cmd_ablate(const ExperimentConfig& config, const RunOptions& options);

// NaN when either side has zero variance or fewer than two points.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace peerdistill
