#pragma once

// Bayesian optimization over (layers, heads, dim) with dim a multiple of
// heads, minimizing |count_params - target|.

#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "json.hpp"
#include "peerdistill/gp.hpp"
#include "peerdistill/model.hpp"

namespace peerdistill {

struct IntRange {
  std::int64_t lo = 1;
  std::int64_t hi = 1;
};

struct ArchPoint {
  std::int64_t layers = 1;
  std::int64_t heads = 1;
  std::int64_t dim = 1;

  auto operator<=>(const ArchPoint&) const = default;
};

struct SearchSpace {
  IntRange layers{2, 32};
  IntRange heads{2, 32};
  IntRange dim{64, 1024};
  std::int64_t ff_dim = 3072;
  std::int64_t vocab_size = 50265;
  std::int64_t max_seq_len = 514;

  void validate() const;
  bool contains(const ArchPoint& p) const;
  PeerConfig config_for(const ArchPoint& p) const;
  // Coordinates min-max normalized to [0, 1].
  std::vector<double> normalize(const ArchPoint& p) const;
};

nlohmann::json to_json(const SearchSpace& space);
SearchSpace search_space_from_json(const nlohmann::json& j);

// round(total / (i + 1)) for i = 1..num_peers.
std::vector<std::int64_t> target_sizes(std::int64_t total_params, std::int64_t num_peers);

// Rounds and clamps layers and heads, then moves dim to the nearest multiple
// of heads inside the dim range (ties go to the smaller multiple). Throws
// InfeasibleError if no multiple is in range.
ArchPoint snap(const SearchSpace& space, double layers, double heads, double dim);

// Number of feasible lattice points, and all of them in lexicographic order.
std::uint64_t grid_size(const SearchSpace& space);
std::vector<ArchPoint> enumerate_grid(const SearchSpace& space);

// Minimization convention. Zero when variance is zero and mean >= best.
double expected_improvement(double mean, double variance, double best);

struct Candidate {
  ArchPoint point;
  // Raw objective; |count_params - target| for architecture searches.
  double objective = 0.0;
  std::int64_t params = 0;
};

struct SearchOptions {
  std::size_t pool_size = 512;
  std::size_t initial_random = 5;
  // The surrogate is fit on at most this many observations: the best half
  // and the most recent half.
  std::size_t max_gp_points = 100;
  GpSettings gp;
};

// Observations plus the GP fit over them.
class Surrogate {
 public:
  explicit Surrogate(const SearchSpace& space, SearchOptions options = {});

  void observe(const Candidate& c, double scaled_objective);
  std::size_t size() const { return observed_.size(); }
  bool contains(const ArchPoint& p) const;
  double best_scaled() const;
  const GaussianProcess& gp() const { return gp_; }

  // Uniform random feasible point with no observations; otherwise the pool
  // point with maximal expected improvement. When the unobserved lattice
  // fits in the pool, the pool is the whole unobserved lattice.
  ArchPoint propose(std::mt19937_64& rng);

 private:
  void refit();

  SearchSpace space_;
  SearchOptions options_;
  std::vector<std::pair<ArchPoint, double>> observed_;
  std::set<ArchPoint> seen_;
  GaussianProcess gp_;
  bool dirty_ = true;
};

// Uniform over the raw box, snapped; retries on infeasible heads.
ArchPoint random_feasible(const SearchSpace& space, std::mt19937_64& rng);

struct SearchResult {
  Candidate best;
  std::int64_t target = 0;
  // One entry per distinct evaluation, in order.
  std::vector<Candidate> trace;
  std::size_t proposals = 0;

  double relative_error() const;
};

// Generic minimizer over the space. `objective` must be nonnegative;
// `scale` divides it before GP fitting. Stops after `budget` distinct
// evaluations or when the lattice is exhausted.
SearchResult minimize(const SearchSpace& space,
                      const std::function<double(const ArchPoint&)>& objective,
                      double scale, std::size_t budget, std::uint64_t seed,
                      SearchOptions options = {});

// Objective |count_params(config_for(point)) - target|. Budget >= 5.
SearchResult search(const SearchSpace& space, std::int64_t target, std::size_t budget,
                    std::uint64_t seed, SearchOptions options = {});

nlohmann::json to_json(const SearchResult& result, const SearchSpace& space);

}  // namespace peerdistill
