#include "peerdistill/arch_search.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "peerdistill/error.hpp"

namespace peerdistill {

namespace {

void check_range(const IntRange& r, const char* name) {
  if (r.lo < 1 || r.lo > r.hi)
    throw ConfigError(std::string("search space ") + name + " range must satisfy 1 <= lo <= hi");
}

double unit(std::int64_t v, const IntRange& r) {
  return r.hi == r.lo ? 0.0 : static_cast<double>(v - r.lo) / static_cast<double>(r.hi - r.lo);
}

std::int64_t clamp_round(double v, const IntRange& r) {
  return std::clamp(static_cast<std::int64_t>(std::llround(v)), r.lo, r.hi);
}

std::int64_t multiples_in(std::int64_t h, const IntRange& r) {
  const std::int64_t first = (r.lo + h - 1) / h;
  const std::int64_t last = r.hi / h;
  return std::max<std::int64_t>(0, last - first + 1);
}

nlohmann::json range_json(const IntRange& r) { return nlohmann::json::array({r.lo, r.hi}); }

IntRange range_from_json(const nlohmann::json& j, const char* name) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer())
    throw ConfigError(std::string("search space ") + name + " must be [lo, hi] integers");
  return {j[0].get<std::int64_t>(), j[1].get<std::int64_t>()};
}

}  // namespace

void SearchSpace::validate() const {
  check_range(layers, "layers");
  check_range(heads, "heads");
  check_range(dim, "dim");
  if (ff_dim < 1 || vocab_size < 1 || max_seq_len < 1)
    throw ConfigError("search space fixed fields must be positive");
}

bool SearchSpace::contains(const ArchPoint& p) const {
  return p.layers >= layers.lo && p.layers <= layers.hi && p.heads >= heads.lo &&
         p.heads <= heads.hi && p.dim >= dim.lo && p.dim <= dim.hi && p.dim % p.heads == 0;
}

PeerConfig SearchSpace::config_for(const ArchPoint& p) const {
  PeerConfig c = roberta_config(p.layers, p.heads, p.dim);
  c.ff_dim = ff_dim;
  c.vocab_size = vocab_size;
  c.max_seq_len = max_seq_len;
  return c;
}

std::vector<double> SearchSpace::normalize(const ArchPoint& p) const {
  return {unit(p.layers, layers), unit(p.heads, heads), unit(p.dim, dim)};
}

nlohmann::json to_json(const SearchSpace& s) {
  return {{"layers", range_json(s.layers)}, {"heads", range_json(s.heads)},
          {"dim", range_json(s.dim)},       {"ff_dim", s.ff_dim},
          {"vocab_size", s.vocab_size},     {"max_seq_len", s.max_seq_len}};
}

SearchSpace search_space_from_json(const nlohmann::json& j) {
  SearchSpace s;
  if (!j.is_object()) throw ConfigError("search space must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "layers") s.layers = range_from_json(value, "layers");
    else if (key == "heads") s.heads = range_from_json(value, "heads");
    else if (key == "dim") s.dim = range_from_json(value, "dim");
    else if (key == "ff_dim") s.ff_dim = value.get<std::int64_t>();
    else if (key == "vocab_size") s.vocab_size = value.get<std::int64_t>();
    else if (key == "max_seq_len") s.max_seq_len = value.get<std::int64_t>();
    else throw ConfigError("unknown search space field '" + key + "'");
  }
  s.validate();
  return s;
}

std::vector<std::int64_t> target_sizes(std::int64_t total_params, std::int64_t num_peers) {
  if (num_peers < 1) throw ConfigError("number of peers must be at least 1");
  if (total_params < 1) throw ConfigError("total parameter count must be at least 1");
  std::vector<std::int64_t> out;
  for (std::int64_t i = 1; i <= num_peers; ++i)
    out.push_back(static_cast<std::int64_t>(
        std::llround(static_cast<double>(total_params) / static_cast<double>(i + 1))));
  return out;
}

ArchPoint snap(const SearchSpace& space, double layers, double heads, double dim) {
  ArchPoint p;
  p.layers = clamp_round(layers, space.layers);
  p.heads = clamp_round(heads, space.heads);
  const double d = std::clamp(dim, static_cast<double>(space.dim.lo), static_cast<double>(space.dim.hi));
  const std::int64_t h = p.heads;
  const std::int64_t below = static_cast<std::int64_t>(std::floor(d / static_cast<double>(h))) * h;
  const std::int64_t above = below + h;
  const bool below_ok = below >= space.dim.lo && below <= space.dim.hi && below > 0;
  const bool above_ok = above >= space.dim.lo && above <= space.dim.hi;
  if (below_ok && above_ok) p.dim = (d - static_cast<double>(below) <= static_cast<double>(above) - d) ? below : above;
  else if (below_ok) p.dim = below;
  else if (above_ok) p.dim = above;
  else
    throw InfeasibleError("no multiple of " + std::to_string(h) + " heads in dim range [" +
                          std::to_string(space.dim.lo) + ", " + std::to_string(space.dim.hi) + "]");
  return p;
}

std::uint64_t grid_size(const SearchSpace& space) {
  std::uint64_t per_layer = 0;
  for (std::int64_t h = space.heads.lo; h <= space.heads.hi; ++h)
    per_layer += static_cast<std::uint64_t>(multiples_in(h, space.dim));
  return per_layer * static_cast<std::uint64_t>(space.layers.hi - space.layers.lo + 1);
}

std::vector<ArchPoint> enumerate_grid(const SearchSpace& space) {
  std::vector<ArchPoint> out;
  for (std::int64_t l = space.layers.lo; l <= space.layers.hi; ++l)
    for (std::int64_t h = space.heads.lo; h <= space.heads.hi; ++h)
      for (std::int64_t d = ((space.dim.lo + h - 1) / h) * h; d <= space.dim.hi; d += h)
        out.push_back({l, h, d});
  return out;
}

double expected_improvement(double mean, double variance, double best) {
  const double improvement = best - mean;
  if (!(variance > 0.0)) return std::max(improvement, 0.0);
  const double sigma = std::sqrt(variance);
  const double z = improvement / sigma;
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return std::max(0.0, improvement * cdf + sigma * pdf);
}

ArchPoint random_feasible(const SearchSpace& space, std::mt19937_64& rng) {
  if (grid_size(space) == 0) throw InfeasibleError("search space has no feasible point");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&](const IntRange& r) {
    return static_cast<double>(r.lo) - 0.5 + u(rng) * static_cast<double>(r.hi - r.lo + 1);
  };
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double l = draw(space.layers), h = draw(space.heads), d = draw(space.dim);
    try {
      return snap(space, l, h, d);
    } catch (const InfeasibleError&) {
    }
  }
  // Only a handful of head counts are feasible; sample the lattice directly.
  const auto grid = enumerate_grid(space);
  std::uniform_int_distribution<std::size_t> pick(0, grid.size() - 1);
  return grid[pick(rng)];
}

Surrogate::Surrogate(const SearchSpace& space, SearchOptions options)
    : space_(space), options_(std::move(options)) {
  space_.validate();
}

void Surrogate::observe(const Candidate& c, double scaled_objective) {
  observed_.emplace_back(c.point, scaled_objective);
  seen_.insert(c.point);
  dirty_ = true;
}

bool Surrogate::contains(const ArchPoint& p) const {
  return seen_.count(p) > 0;
}

double Surrogate::best_scaled() const {
  double best = INFINITY;
  for (const auto& o : observed_) best = std::min(best, o.second);
  return best;
}

void Surrogate::refit() {
  std::vector<std::size_t> keep(observed_.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
  if (keep.size() > options_.max_gp_points) {
    const std::size_t half = options_.max_gp_points / 2;
    std::vector<std::size_t> by_value = keep;
    std::stable_sort(by_value.begin(), by_value.end(), [&](std::size_t a, std::size_t b) {
      return observed_[a].second < observed_[b].second;
    });
    std::vector<bool> chosen(observed_.size(), false);
    for (std::size_t i = 0; i < half; ++i) chosen[by_value[i]] = true;
    std::size_t recent = 0;
    for (std::size_t i = observed_.size(); i-- > 0 && recent < options_.max_gp_points - half;) {
      if (!chosen[i]) {
        chosen[i] = true;
        ++recent;
      }
    }
    keep.clear();
    for (std::size_t i = 0; i < chosen.size(); ++i)
      if (chosen[i]) keep.push_back(i);
  }
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (std::size_t i : keep) {
    x.push_back(space_.normalize(observed_[i].first));
    y.push_back(observed_[i].second);
  }
  gp_.fit(std::move(x), std::move(y), options_.gp);
  dirty_ = false;
}

ArchPoint Surrogate::propose(std::mt19937_64& rng) {
  if (observed_.empty()) return random_feasible(space_, rng);
  if (dirty_) refit();

  std::vector<ArchPoint> pool;
  const std::uint64_t total = grid_size(space_);
  if (total <= options_.pool_size + observed_.size()) {
    for (const auto& p : enumerate_grid(space_))
      if (!contains(p)) pool.push_back(p);
  } else {
    for (std::size_t i = 0; i < options_.pool_size; ++i) {
      ArchPoint p = random_feasible(space_, rng);
      if (!contains(p)) pool.push_back(p);
    }
    std::sort(pool.begin(), pool.end());
    pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  }
  if (pool.empty()) return random_feasible(space_, rng);

  const double best = best_scaled();
  ArchPoint arg = pool.front();
  double top = -1.0;
  for (const auto& p : pool) {
    const auto pred = gp_.predict(space_.normalize(p));
    const double ei = expected_improvement(pred.mean, pred.variance, best);
    if (ei > top) {
      top = ei;
      arg = p;
    }
  }
  return arg;
}

double SearchResult::relative_error() const {
  return target == 0 ? 0.0
                     : static_cast<double>(std::llabs(best.params - target)) /
                           static_cast<double>(target);
}

SearchResult minimize(const SearchSpace& space,
                      const std::function<double(const ArchPoint&)>& objective,
                      double scale, std::size_t budget, std::uint64_t seed,
                      SearchOptions options) {
  space.validate();
  if (budget < 1) throw ConfigError("search budget must be positive");
  if (!(scale > 0.0)) throw ConfigError("objective scale must be positive");
  const std::uint64_t total = grid_size(space);
  if (total == 0) throw InfeasibleError("search space has no feasible point");

  std::mt19937_64 rng(seed);
  Surrogate surrogate(space, options);
  std::map<ArchPoint, double> cache;
  SearchResult result;
  const std::size_t limit = static_cast<std::size_t>(std::min<std::uint64_t>(budget, total));
  const std::size_t max_proposals = 50 * limit + 100;

  while (result.trace.size() < limit && result.proposals < max_proposals) {
    ++result.proposals;
    const ArchPoint p = result.trace.size() < options.initial_random
                            ? random_feasible(space, rng)
                            : surrogate.propose(rng);
    if (cache.count(p)) continue;
    const double value = objective(p);
    cache.emplace(p, value);
    Candidate c{p, value, 0};
    result.trace.push_back(c);
    surrogate.observe(c, value / scale);
    if (result.trace.size() == 1 || value < result.best.objective) result.best = c;
  }
  return result;
}

SearchResult search(const SearchSpace& space, std::int64_t target, std::size_t budget,
                    std::uint64_t seed, SearchOptions options) {
  if (budget < 5) throw ConfigError("search budget must be at least 5");
  if (target < 1) throw ConfigError("search target must be positive");
  auto objective = [&](const ArchPoint& p) {
    return static_cast<double>(std::llabs(count_params(space.config_for(p)) - target));
  };
  SearchResult r = minimize(space, objective, static_cast<double>(target), budget, seed,
                            std::move(options));
  r.target = target;
  for (auto& c : r.trace) c.params = count_params(space.config_for(c.point));
  r.best.params = count_params(space.config_for(r.best.point));
  return r;
}

nlohmann::json to_json(const SearchResult& r, const SearchSpace& space) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& c : r.trace)
    trace.push_back({{"layers", c.point.layers}, {"heads", c.point.heads},
                     {"dim", c.point.dim}, {"params", c.params},
                     {"objective", c.objective}});
  return {{"point", {{"layers", r.best.point.layers}, {"heads", r.best.point.heads},
                     {"dim", r.best.point.dim}}},
          {"params", r.best.params},
          {"target", r.target},
          {"relative_error", r.relative_error()},
          {"config", to_json(space.config_for(r.best.point))},
          {"evaluations", r.trace.size()},
          {"trace", trace}};
}

}  // namespace peerdistill
