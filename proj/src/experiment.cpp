#include "peerdistill/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "peerdistill/checkpoint.hpp"
#include "peerdistill/error.hpp"
#include "peerdistill/io.hpp"

namespace peerdistill {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <class T>
T get_as(const json& v, const char* what) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + what + "'");
  }
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::string fmt(double v) { return std::isnan(v) ? "nan" : format_double(v); }

// Runs f(0..n-1) on up to `jobs` threads; the first exception is rethrown
// after every worker has stopped.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        {
          std::lock_guard lock(mu);
          if (failure) return;
        }
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::string_view sweep_name(SweepKind k) {
  switch (k) {
    case SweepKind::Peers: return "peers";
    case SweepKind::Alpha: return "alpha";
    case SweepKind::WeightsFrozen: return "weights_frozen";
    case SweepKind::Sizes: return "sizes";
  }
  return "alpha";
}

SweepKind sweep_from_string(const std::string& s) {
  if (s == "peers") return SweepKind::Peers;
  if (s == "alpha") return SweepKind::Alpha;
  if (s == "weights_frozen") return SweepKind::WeightsFrozen;
  if (s == "sizes") return SweepKind::Sizes;
  throw ConfigError("config: unknown ablation sweep '" + s + "'");
}

fs::path resolve_path(const std::string& p, const fs::path& base) {
  if (p.empty() || base.empty()) return p;
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

bool is_weighted(Method m) { return m == Method::Dwml || m == Method::KdDwml; }

}  // namespace

// ---- task ----------------------------------------------------------------

Dataset TaskSpec::load(std::uint64_t run_seed) const {
  const std::uint64_t s = seed.value_or(run_seed);
  if (kind == DatasetKind::CharLm) return load_char_corpus(path, seq_len, s);
  return make_synthetic(num_classes, dims, per_class, noise_sigma, s);
}

json to_json(const TaskSpec& t) {
  json j;
  if (t.kind == DatasetKind::CharLm) {
    j = {{"kind", "char_lm"}, {"path", t.path}, {"seq_len", t.seq_len}};
  } else {
    j = {{"kind", "synthetic"},
         {"num_classes", t.num_classes},
         {"dims", t.dims},
         {"per_class", t.per_class},
         {"noise_sigma", t.noise_sigma}};
  }
  if (t.seed) j["seed"] = *t.seed;
  return j;
}

TaskSpec task_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: 'task' must be an object");
  TaskSpec t;
  if (j.contains("kind")) {
    const auto k = get_as<std::string>(j["kind"], "task.kind");
    if (k == "char_lm") t.kind = DatasetKind::CharLm;
    else if (k == "synthetic" || k == "synthetic_classification")
      t.kind = DatasetKind::SyntheticClassification;
    else throw ConfigError("config: unknown task kind '" + k + "'");
  }
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") continue;
    else if (key == "num_classes") t.num_classes = get_as<std::size_t>(v, "task.num_classes");
    else if (key == "dims") t.dims = get_as<std::size_t>(v, "task.dims");
    else if (key == "per_class") t.per_class = get_as<std::size_t>(v, "task.per_class");
    else if (key == "noise_sigma") t.noise_sigma = get_as<double>(v, "task.noise_sigma");
    else if (key == "seed") t.seed = get_as<std::uint64_t>(v, "task.seed");
    else if (key == "path") t.path = get_as<std::string>(v, "task.path");
    else if (key == "seq_len") t.seq_len = get_as<std::size_t>(v, "task.seq_len");
    else throw ConfigError("config: unknown key 'task." + key + "'");
  }
  if (t.kind == DatasetKind::CharLm) {
    if (t.path.empty()) throw ConfigError("config: char_lm task needs 'path'");
    if (t.seq_len == 0) throw ConfigError("config: task.seq_len must be positive");
  } else {
    if (t.num_classes < 2) throw ConfigError("config: task.num_classes must be >= 2");
    if (t.dims == 0 || t.per_class == 0)
      throw ConfigError("config: task.dims and task.per_class must be positive");
    if (!(t.noise_sigma >= 0.0) || !std::isfinite(t.noise_sigma))
      throw ConfigError("config: task.noise_sigma must be finite and >= 0");
  }
  return t;
}

// ---- search directive ----------------------------------------------------

json to_json(const SearchDirective& s) {
  return {{"total_params", s.total_params},
          {"num_peers", s.num_peers},
          {"space", to_json(s.space)},
          {"budget", s.budget},
          {"seed", s.seed}};
}

SearchDirective search_directive_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: 'search' must be an object");
  SearchDirective s;
  for (const auto& [key, v] : j.items()) {
    if (key == "total_params") s.total_params = get_as<std::int64_t>(v, "search.total_params");
    else if (key == "num_peers") s.num_peers = get_as<std::int64_t>(v, "search.num_peers");
    else if (key == "space") s.space = search_space_from_json(v);
    else if (key == "budget") s.budget = get_as<std::size_t>(v, "search.budget");
    else if (key == "seed") s.seed = get_as<std::uint64_t>(v, "search.seed");
    else throw ConfigError("config: unknown key 'search." + key + "'");
  }
  if (s.total_params <= 0) throw ConfigError("config: search.total_params must be positive");
  if (s.num_peers < 1) throw ConfigError("config: search.num_peers must be >= 1");
  if (s.budget < 5) throw ConfigError("config: search.budget must be >= 5");
  s.space.validate();
  return s;
}

// ---- experiment config ---------------------------------------------------

void ExperimentConfig::validate() const {
  if (peers.empty() == !search.has_value())
    throw ConfigError("config: exactly one of 'peers' and 'search' is required");
  if (seeds.empty()) throw ConfigError("config: 'seeds' must not be empty");
  if (methods.empty()) throw ConfigError("config: at least one method is required");
  for (const auto& m : methods) m.validate();
  trainer.validate();
  for (const auto& p : peers) {
    peerdistill::validate(p);
    if (task.kind == DatasetKind::SyntheticClassification) {
      if (p.kind != ModelKind::Mlp)
        throw ConfigError("config: synthetic tasks need mlp peers");
      if (static_cast<std::size_t>(p.input_dim) != task.dims ||
          static_cast<std::size_t>(p.num_classes) != task.num_classes)
        throw ConfigError("config: peer input_dim/num_classes do not match the task");
    } else if (p.kind != ModelKind::Transformer) {
      throw ConfigError("config: char_lm tasks need transformer peers");
    }
  }
  if (ablation && ablation->sweep == SweepKind::Peers) {
    for (const auto& v : ablation->values) {
      if (!v.is_number_integer() || v.get<std::int64_t>() <= 0)
        throw ConfigError("config: peers sweep values must be positive integers");
    }
  }
}

namespace {

// Fills task-derived fields the peer JSON left out.
PeerConfig peer_from_json(json j, const TaskSpec& task, const Dataset* corpus) {
  if (!j.is_object()) throw ConfigError("config: each peer must be an object");
  const std::string kind = j.value("model_kind", std::string("transformer"));
  if (kind == "mlp") {
    if (!j.contains("input_dim")) j["input_dim"] = task.dims;
    if (!j.contains("num_classes")) j["num_classes"] = task.num_classes;
  } else if (corpus) {
    if (!j.contains("vocab_size")) j["vocab_size"] = corpus->num_classes;
    if (!j.contains("max_seq_len")) j["max_seq_len"] = task.seq_len;
  }
  return peer_config_from_json(j);
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  static const std::set<std::string> known{"task",    "method", "methods",  "peers",
                                           "search",  "trainer", "seeds",   "seed",
                                           "ablation", "output_dir"};
  for (const auto& [key, v] : j.items()) {
    if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
  ExperimentConfig c;
  if (j.contains("task")) c.task = task_spec_from_json(j["task"]);
  if (c.task.kind == DatasetKind::CharLm) c.task.path = resolve_path(c.task.path, base_dir).string();

  if (j.contains("method") && j.contains("methods"))
    throw ConfigError("config: give either 'method' or 'methods'");
  if (j.contains("method")) {
    c.methods = {method_spec_from_json(j["method"])};
  } else if (j.contains("methods")) {
    if (!j["methods"].is_array()) throw ConfigError("config: 'methods' must be an array");
    c.methods.clear();
    for (const auto& m : j["methods"]) c.methods.push_back(method_spec_from_json(m));
  }
  for (auto& m : c.methods) {
    if (m.teacher_checkpoint)
      m.teacher_checkpoint = resolve_path(*m.teacher_checkpoint, base_dir).string();
  }

  if (j.contains("peers")) {
    if (!j["peers"].is_array()) throw ConfigError("config: 'peers' must be an array");
    std::optional<Dataset> corpus;
    if (c.task.kind == DatasetKind::CharLm) corpus = c.task.load(0);
    for (const auto& p : j["peers"])
      c.peers.push_back(peer_from_json(p, c.task, corpus ? &*corpus : nullptr));
  }
  if (j.contains("search")) c.search = search_directive_from_json(j["search"]);
  if (j.contains("trainer")) c.trainer = trainer_config_from_json(j["trainer"]);

  if (j.contains("seed") && j.contains("seeds"))
    throw ConfigError("config: give either 'seed' or 'seeds'");
  if (j.contains("seed")) c.seeds = {get_as<std::uint64_t>(j["seed"], "seed")};
  if (j.contains("seeds")) c.seeds = get_as<std::vector<std::uint64_t>>(j["seeds"], "seeds");

  if (j.contains("ablation")) {
    const json& a = j["ablation"];
    if (!a.is_object()) throw ConfigError("config: 'ablation' must be an object");
    AblationSpec spec;
    for (const auto& [key, v] : a.items()) {
      if (key == "sweep") spec.sweep = sweep_from_string(get_as<std::string>(v, "ablation.sweep"));
      else if (key == "values") {
        if (!v.is_array()) throw ConfigError("config: 'ablation.values' must be an array");
        spec.values.assign(v.begin(), v.end());
      } else throw ConfigError("config: unknown key 'ablation." + key + "'");
    }
    c.ablation = spec;
  }
  if (j.contains("output_dir")) c.output_dir = get_as<std::string>(j["output_dir"], "output_dir");
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j{{"task", to_json(c.task)}, {"trainer", to_json(c.trainer)}, {"seeds", c.seeds}};
  if (c.methods.size() == 1) {
    j["method"] = to_json(c.methods[0]);
  } else {
    j["methods"] = json::array();
    for (const auto& m : c.methods) j["methods"].push_back(to_json(m));
  }
  if (!c.peers.empty()) {
    j["peers"] = json::array();
    for (const auto& p : c.peers) j["peers"].push_back(to_json(p));
  }
  if (c.search) j["search"] = to_json(*c.search);
  if (c.ablation) {
    j["ablation"] = {{"sweep", sweep_name(c.ablation->sweep)}, {"values", c.ablation->values}};
  }
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  return j;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j, path.parent_path());
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("seed list: empty entry in '" + text + "'");
    item = item.substr(b, e - b + 1);
    if (item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("seed list: '" + item + "' is not an unsigned integer");
    try {
      seeds.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("seed list: '" + item + "' is out of range");
    }
  }
  if (seeds.empty()) throw ConfigError("seed list: empty");
  return seeds;
}

void apply_seed_override(ExperimentConfig& config) {
  if (const char* env = std::getenv("PEERDISTILL_SEED"); env && *env)
    config.seeds = parse_seed_list(env);
}

std::uint64_t peer_init_seed(std::uint64_t run_seed, std::size_t peer) {
  return splitmix64(run_seed ^ splitmix64(peer + 1));
}

// ---- search --------------------------------------------------------------

namespace {

std::vector<SearchResult> run_searches(const SearchDirective& s, std::size_t jobs) {
  const auto targets = target_sizes(s.total_params, s.num_peers);
  std::vector<SearchResult> results(targets.size());
  parallel_for(targets.size(), jobs, [&](std::size_t i) {
    results[i] = search(s.space, targets[i], s.budget, s.seed);
  });
  return results;
}

ExperimentConfig with_peers(ExperimentConfig c, std::vector<PeerConfig> peers) {
  c.peers = std::move(peers);
  c.search.reset();
  return c;
}

}  // namespace

std::vector<PeerConfig> resolve_peers(const ExperimentConfig& config, std::size_t jobs) {
  if (!config.search) return config.peers;
  if (config.task.kind != DatasetKind::CharLm)
    throw ConfigError("config: searched transformer peers need a char_lm task");
  std::vector<PeerConfig> peers;
  for (const auto& r : run_searches(*config.search, jobs))
    peers.push_back(config.search->space.config_for(r.best.point));
  return peers;
}

void cmd_search(const ExperimentConfig& config, const RunOptions& options) {
  if (!config.search) throw ConfigError("search: config has no 'search' section");
  const auto& s = *config.search;
  const auto results = run_searches(s, options.jobs);
  fs::create_directories(options.out);
  json summary{{"total_params", s.total_params}, {"budget", s.budget}, {"seed", s.seed},
               {"peers", json::array()}};
  std::vector<PeerConfig> peers;
  for (std::size_t i = 0; i < results.size(); ++i) {
    json j = to_json(results[i], s.space);
    j["peer"] = i;
    write_json(options.out / ("peer_" + std::to_string(i) + ".json"), j);
    summary["peers"].push_back({{"peer", i},
                                {"target", results[i].target},
                                {"params", results[i].best.params},
                                {"relative_error", results[i].relative_error()},
                                {"config", to_json(s.space.config_for(results[i].best.point))}});
    peers.push_back(s.space.config_for(results[i].best.point));
  }
  write_json(options.out / "search.json", summary);
  ExperimentConfig resolved = config;
  if (config.task.kind == DatasetKind::CharLm) resolved = with_peers(config, peers);
  write_json(options.out / "resolved_config.json", to_json(resolved));
}

// ---- training runs -------------------------------------------------------

namespace {

struct RunRecord {
  std::vector<PeerOutcome> peers;
  TrainingTrace trace;
  std::optional<std::string> diverged;
};

struct RunJob {
  const MethodSpec* method = nullptr;
  const std::vector<PeerConfig>* peers = nullptr;
  TrainerConfig trainer;
  const Dataset* data = nullptr;
  const PeerModel* teacher = nullptr;
  std::uint64_t seed = 0;
  fs::path dir;  // empty: no files
};

std::string method_label(const MethodSpec& m) { return std::string(to_string(m.method)); }

RunRecord execute(const RunJob& job, const RunOptions& options) {
  std::vector<PeerModel> models;
  for (std::size_t i = 0; i < job.peers->size(); ++i) {
    models.push_back(build((*job.peers)[i], peer_init_seed(job.seed, i)));
    models.back().set_role_index(static_cast<int>(i + 1));
  }
  TrainerConfig tc = job.trainer;
  tc.seed = job.seed;

  RunRecord rec;
  std::optional<TrainResult> result;
  try {
    result = run_method(*job.method, std::move(models), *job.data, tc, job.teacher);
    rec.trace = result->trace;
  } catch (const TrainingDiverged& e) {
    rec.trace = e.trace;
    rec.diverged = e.what();
  }

  if (!job.dir.empty()) {
    fs::create_directories(job.dir);
    std::ostringstream m, w;
    write_metrics_csv(m, rec.trace.metrics);
    write_weights_csv(w, rec.trace.weights);
    write_file_atomic(job.dir / "metrics.csv", m.str());
    write_file_atomic(job.dir / "weights.csv", w.str());
    write_json(job.dir / "data_manifest.json", manifest(*job.data));
  }
  if (!result) {
    rec.peers.assign(job.peers->size(), PeerOutcome{0, kNaN, kNaN, std::nullopt});
    for (std::size_t i = 0; i < job.peers->size(); ++i)
      rec.peers[i].params = count_params((*job.peers)[i]);
    return rec;
  }
  if (!job.dir.empty() && options.checkpoints) {
    fs::create_directories(job.dir / "checkpoints");
    for (std::size_t i = 0; i < result->peers.size(); ++i)
      save_checkpoint(job.dir / "checkpoints" / ("peer_" + std::to_string(i) + ".ckpt"),
                      result->peers[i]);
  }
  for (std::size_t i = 0; i < result->peers.size(); ++i) {
    PeerOutcome o;
    o.params = count_params(result->peers[i].config());
    o.val_acc = rec.trace.val_acc.empty() ? evaluate_accuracy(result->peers[i], *job.data,
                                                              Split::Validation)
                                          : rec.trace.val_acc.back()[i];
    o.test_acc = evaluate_accuracy(result->peers[i], *job.data, Split::Test);
    if (is_weighted(job.method->method)) o.omega = result->weights.omega[i];
    rec.peers.push_back(o);
  }
  return rec;
}

// Loads the dataset once per distinct data seed.
class DataCache {
 public:
  DataCache(const TaskSpec& task, const std::vector<std::uint64_t>& seeds) : task_(task) {
    for (auto s : seeds) {
      const auto key = task.seed.value_or(s);
      if (!sets_.count(key)) sets_.emplace(key, task.load(s));
    }
  }
  const Dataset& at(std::uint64_t run_seed) const { return sets_.at(task_.seed.value_or(run_seed)); }

 private:
  TaskSpec task_;
  std::map<std::uint64_t, Dataset> sets_;
};

void check_peers_fit(const std::vector<PeerConfig>& peers, const Dataset& data) {
  for (const auto& p : peers) {
    if (p.kind == ModelKind::Transformer &&
        (static_cast<std::size_t>(p.vocab_size) != data.num_classes ||
         static_cast<std::size_t>(p.max_seq_len) < data.width))
      throw ConfigError("config: transformer peer does not fit the corpus (vocab " +
                        std::to_string(data.num_classes) + ", seq_len " +
                        std::to_string(data.width) + ")");
  }
}

std::optional<PeerModel> load_teacher(const MethodSpec& m) {
  if (!m.needs_teacher()) return std::nullopt;
  PeerModel t = load_checkpoint(*m.teacher_checkpoint);
  t.set_trainable(false);
  return t;
}

std::string join_divergences(const std::vector<std::string>& msgs) {
  std::string out = std::to_string(msgs.size()) + " run(s) diverged: " + msgs.front();
  return out;
}

struct Entry {
  MethodSpec method;
  const ExperimentConfig* config = nullptr;
  std::vector<PeerConfig> peers;
  std::optional<PeerModel> teacher;
  fs::path dir;
};

ComparisonReport run_entries(std::vector<Entry>& entries, const std::vector<std::uint64_t>& seeds,
                             const DataCache& data, const RunOptions& options) {
  ComparisonReport report;
  report.seeds = seeds;
  std::vector<RunJob> jobs;
  for (auto& e : entries) {
    report.methods.push_back(method_label(e.method));
    for (auto s : seeds) {
      check_peers_fit(e.peers, data.at(s));
      if (e.teacher) check_peers_fit({e.teacher->config()}, data.at(s));
      RunJob job;
      job.method = &e.method;
      job.peers = &e.peers;
      job.trainer = e.config->trainer;
      job.data = &data.at(s);
      job.teacher = e.teacher ? &*e.teacher : nullptr;
      job.seed = s;
      job.dir = e.dir / ("seed_" + std::to_string(s));
      jobs.push_back(std::move(job));
    }
  }
  std::vector<RunRecord> records(jobs.size());
  parallel_for(jobs.size(), options.jobs, [&](std::size_t k) { records[k] = execute(jobs[k], options); });

  std::vector<std::string> diverged;
  report.outcomes.assign(entries.size(), {});
  for (std::size_t e = 0; e < entries.size(); ++e) {
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      auto& r = records[e * seeds.size() + s];
      if (r.diverged) diverged.push_back(report.methods[e] + " seed " + std::to_string(seeds[s]) + ": " + *r.diverged);
      report.outcomes[e].push_back(std::move(r.peers));
    }
  }
  fs::create_directories(options.out);
  write_file_atomic(options.out / "report.csv", report.to_csv());
  write_json(options.out / "report.json", report.to_json());
  if (!diverged.empty()) throw NumericError(join_divergences(diverged));
  return report;
}

double best_of(const std::vector<PeerOutcome>& peers) {
  double best = kNaN;
  for (const auto& p : peers)
    if (!std::isnan(p.test_acc) && !(p.test_acc <= best)) best = p.test_acc;
  return best;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {kNaN, kNaN};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

// ---- reports -------------------------------------------------------------

std::string ComparisonReport::to_csv() const {
  std::size_t width = 0;
  for (const auto& e : outcomes)
    for (const auto& s : e) width = std::max(width, s.size());
  std::ostringstream out;
  out << "method,seed";
  for (std::size_t p = 0; p < width; ++p) out << ",peer_" << p;
  out << ",best\n";
  for (std::size_t e = 0; e < methods.size(); ++e) {
    std::vector<std::vector<double>> cols(width + 1);
    for (std::size_t s = 0; s < outcomes[e].size(); ++s) {
      const auto& peers = outcomes[e][s];
      out << methods[e] << ',' << seeds[s];
      for (std::size_t p = 0; p < width; ++p) {
        const double v = p < peers.size() ? peers[p].test_acc : kNaN;
        out << ',' << fmt(v);
        if (!std::isnan(v)) cols[p].push_back(v);
      }
      const double b = best_of(peers);
      out << ',' << fmt(b) << '\n';
      if (!std::isnan(b)) cols[width].push_back(b);
    }
    for (int which = 0; which < 2; ++which) {
      out << methods[e] << ',' << (which == 0 ? "mean" : "std");
      for (const auto& c : cols) {
        const auto [m, sd] = mean_std(c);
        out << ',' << fmt(which == 0 ? m : sd);
      }
      out << '\n';
    }
  }
  return out.str();
}

json ComparisonReport::to_json() const {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json j{{"seeds", seeds}, {"methods", json::array()}};
  for (std::size_t e = 0; e < methods.size(); ++e) {
    json m{{"method", methods[e]}, {"runs", json::array()}};
    std::vector<double> bests;
    for (std::size_t s = 0; s < outcomes[e].size(); ++s) {
      json run{{"seed", seeds[s]}, {"peers", json::array()}};
      for (const auto& p : outcomes[e][s]) {
        json pj{{"params", p.params}, {"val_acc", num(p.val_acc)}, {"test_acc", num(p.test_acc)}};
        if (p.omega) pj["omega"] = *p.omega;
        run["peers"].push_back(pj);
      }
      const double b = best_of(outcomes[e][s]);
      run["best"] = num(b);
      if (!std::isnan(b)) bests.push_back(b);
      m["runs"].push_back(run);
    }
    const auto [mean, sd] = mean_std(bests);
    m["best_mean"] = num(mean);
    m["best_std"] = num(sd);
    j["methods"].push_back(m);
  }
  return j;
}

// ---- commands ------------------------------------------------------------

ComparisonReport cmd_train(const ExperimentConfig& config, const RunOptions& options) {
  if (config.methods.size() != 1)
    throw ConfigError("train: config lists several methods; use 'compare'");
  config.validate();
  std::vector<Entry> entries(1);
  entries[0].method = config.methods[0];
  entries[0].config = &config;
  entries[0].peers = resolve_peers(config, options.jobs);
  entries[0].teacher = load_teacher(config.methods[0]);
  entries[0].dir = options.out;
  const DataCache data(config.task, config.seeds);
  fs::create_directories(options.out);
  write_json(options.out / "resolved_config.json", to_json(with_peers(config, entries[0].peers)));
  return run_entries(entries, config.seeds, data, options);
}

ComparisonReport cmd_compare(const std::vector<ExperimentConfig>& configs,
                             const RunOptions& options) {
  if (configs.empty()) throw ConfigError("compare: no configs");
  const json task = to_json(configs[0].task);
  std::vector<Entry> entries;
  std::vector<ExperimentConfig> resolved;
  resolved.reserve(configs.size());
  for (const auto& c : configs) {
    c.validate();
    if (to_json(c.task) != task) throw ConfigError("compare: configs use different tasks");
    resolved.push_back(with_peers(c, resolve_peers(c, options.jobs)));
  }
  for (const auto& c : resolved) {
    for (const auto& m : c.methods) {
      Entry e;
      e.method = m;
      e.config = &c;
      e.peers = c.peers;
      e.teacher = load_teacher(m);
      e.dir = options.out / (std::to_string(entries.size()) + "_" + method_label(m));
      entries.push_back(std::move(e));
    }
  }
  if (entries.size() < 2) throw ConfigError("compare: need at least two methods");
  const auto& seeds = configs[0].seeds;
  const DataCache data(configs[0].task, seeds);
  fs::create_directories(options.out);
  if (resolved.size() == 1) {
    write_json(options.out / "resolved_config.json", to_json(resolved[0]));
  } else {
    for (std::size_t i = 0; i < resolved.size(); ++i) {
      auto r = resolved[i];
      r.seeds = seeds;
      write_json(options.out / ("resolved_config_" + std::to_string(i) + ".json"), to_json(r));
    }
  }
  return run_entries(entries, seeds, data, options);
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) return kNaN;
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return kNaN;
  return sxy / std::sqrt(sxx * syy);
}

namespace {

struct SweepPoint {
  std::string value;
  ExperimentConfig config;
};

std::string value_label(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

std::vector<SweepPoint> sweep_points(const ExperimentConfig& base, const std::vector<PeerConfig>& peers) {
  const AblationSpec& a = *base.ablation;
  std::vector<json> values = a.values;
  if (values.empty()) {
    switch (a.sweep) {
      case SweepKind::Peers: values = {1, 2, 4}; break;
      case SweepKind::Alpha: values = {0.3, 0.5, 0.7}; break;
      case SweepKind::WeightsFrozen: values = {"dynamic", "frozen"}; break;
      case SweepKind::Sizes: values = {"all"}; break;
    }
  }
  std::vector<SweepPoint> points;
  for (const auto& v : values) {
    ExperimentConfig c = with_peers(base, peers);
    switch (a.sweep) {
      case SweepKind::Alpha:
        c.trainer.alpha = get_as<double>(v, "ablation.values");
        break;
      case SweepKind::Peers: {
        const auto n = get_as<std::size_t>(v, "ablation.values");
        if (n == 0 || n > peers.size())
          throw ConfigError("ablate: peers value " + std::to_string(n) + " exceeds the " +
                            std::to_string(peers.size()) + " configured peers");
        c.peers.resize(n);
        break;
      }
      case SweepKind::WeightsFrozen: {
        bool frozen;
        if (v.is_boolean()) frozen = v.get<bool>();
        else {
          const auto s = get_as<std::string>(v, "ablation.values");
          if (s == "frozen") frozen = true;
          else if (s == "dynamic") frozen = false;
          else throw ConfigError("ablate: weights_frozen values are 'dynamic' or 'frozen'");
        }
        c.trainer.freeze_weights = frozen;
        break;
      }
      case SweepKind::Sizes:
        break;
    }
    c.trainer.validate();
    points.push_back({value_label(v), std::move(c)});
  }
  if (a.sweep == SweepKind::Sizes && points.size() != 1)
    throw ConfigError("ablate: the sizes sweep takes no values");
  return points;
}

}  // namespace

std::vector<AblationRow> cmd_ablate(const ExperimentConfig& config, const RunOptions& options) {
  if (!config.ablation) throw ConfigError("ablate: config has no 'ablation' section");
  if (config.methods.size() != 1) throw ConfigError("ablate: config must name one method");
  config.validate();
  const std::string sweep(sweep_name(config.ablation->sweep));
  const auto peers = resolve_peers(config, options.jobs);
  const auto points = sweep_points(config, peers);
  const DataCache data(config.task, config.seeds);
  const auto teacher = load_teacher(config.methods[0]);

  std::vector<RunJob> jobs;
  for (std::size_t p = 0; p < points.size(); ++p) {
    for (auto s : config.seeds) {
      check_peers_fit(points[p].config.peers, data.at(s));
      RunJob job;
      job.method = &config.methods[0];
      job.peers = &points[p].config.peers;
      job.trainer = points[p].config.trainer;
      job.data = &data.at(s);
      job.teacher = teacher ? &*teacher : nullptr;
      job.seed = s;
      jobs.push_back(std::move(job));
    }
  }
  RunOptions quiet = options;
  quiet.checkpoints = false;
  std::vector<RunRecord> records(jobs.size());
  parallel_for(jobs.size(), options.jobs, [&](std::size_t k) { records[k] = execute(jobs[k], quiet); });

  const std::string label = method_label(config.methods[0]);
  std::ostringstream long_csv;
  long_csv << "sweep,value,seed,method,round,inner_step,peer,loss_ce,loss_kl,loss_total,lr,val_acc\n";
  std::vector<AblationRow> rows;
  std::vector<std::string> diverged;
  for (std::size_t p = 0; p < points.size(); ++p) {
    for (std::size_t si = 0; si < config.seeds.size(); ++si) {
      const auto seed = config.seeds[si];
      const auto& rec = records[p * config.seeds.size() + si];
      if (rec.diverged) diverged.push_back(sweep + "=" + points[p].value + " seed " + std::to_string(seed) + ": " + *rec.diverged);
      std::ostringstream m;
      write_metrics_csv(m, rec.trace.metrics, label);
      std::string line;
      std::istringstream in(m.str());
      std::getline(in, line);  // header
      while (std::getline(in, line))
        long_csv << sweep << ',' << points[p].value << ',' << seed << ',' << line << '\n';

      std::vector<double> acc, omega;
      for (const auto& o : rec.peers) {
        acc.push_back(o.val_acc);
        omega.push_back(o.omega.value_or(1.0 / static_cast<double>(rec.peers.size())));
      }
      const auto [mean_acc, sd] = mean_std(acc);
      (void)sd;
      const double corr = pearson(omega, acc);
      if (config.ablation->sweep == SweepKind::Sizes) {
        for (const auto& o : rec.peers)
          rows.push_back({sweep, std::to_string(o.params), seed, o.val_acc, mean_acc, corr});
      } else {
        const double best = *std::max_element(acc.begin(), acc.end(), [](double a, double b) {
          return std::isnan(a) || (!std::isnan(b) && a < b);
        });
        rows.push_back({sweep, points[p].value, seed, best, mean_acc, corr});
      }
    }
  }

  fs::create_directories(options.out);
  write_file_atomic(options.out / "ablation.csv", long_csv.str());
  std::ostringstream summary;
  summary << "sweep,value,seed,best_val_acc,mean_val_acc,weight_acc_corr\n";
  for (const auto& r : rows)
    summary << r.sweep << ',' << r.value << ',' << r.seed << ',' << fmt(r.best_val_acc) << ','
            << fmt(r.mean_val_acc) << ',' << fmt(r.weight_acc_corr) << '\n';
  write_file_atomic(options.out / "summary.csv", summary.str());

  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRow*>> groups;
  for (const auto& r : rows) {
    if (!groups.count(r.value)) order.push_back(r.value);
    groups[r.value].push_back(&r);
  }
  std::ostringstream agg;
  agg << "sweep,value,seeds,best_val_acc_mean,best_val_acc_std,mean_val_acc_mean,"
         "mean_val_acc_std,weight_acc_corr_mean\n";
  for (const auto& v : order) {
    std::vector<double> b, m, c;
    for (const auto* r : groups[v]) {
      b.push_back(r->best_val_acc);
      m.push_back(r->mean_val_acc);
      if (!std::isnan(r->weight_acc_corr)) c.push_back(r->weight_acc_corr);
    }
    const auto [bm, bs] = mean_std(b);
    const auto [mm, ms] = mean_std(m);
    agg << sweep << ',' << v << ',' << groups[v].size() << ',' << fmt(bm) << ',' << fmt(bs) << ','
        << fmt(mm) << ',' << fmt(ms) << ',' << fmt(mean_std(c).first) << '\n';
  }
  write_file_atomic(options.out / "aggregate.csv", agg.str());
  write_json(options.out / "resolved_config.json", to_json(with_peers(config, peers)));
  if (!diverged.empty()) throw NumericError(join_divergences(diverged));
  return rows;
}

}  // namespace peerdistill
