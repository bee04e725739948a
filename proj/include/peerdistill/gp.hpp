#pragma once

// Gaussian-process regression with a squared-exponential kernel, used as the
// surrogate of the architecture search. Inputs are expected in [0, 1]^d.

#include <cstddef>
#include <span>
#include <vector>

namespace peerdistill {

struct GpSettings {
  // Candidate length-scales; the one with the highest log marginal
  // likelihood is kept.
  std::vector<double> length_scales{0.05, 0.1, 0.2, 0.4, 0.8};
  double noise = 1e-6;
};

struct GpPrediction {
  double mean = 0.0;
  double variance = 0.0;
};

class GaussianProcess {
 public:
  // Observations are standardized internally; predictions are returned in
  // the original units. Throws ContractError on ragged or empty input.
  void fit(std::vector<std::vector<double>> x, std::vector<double> y,
           const GpSettings& settings = {});

  GpPrediction predict(std::span<const double> x) const;

  std::size_t size() const { return x_.size(); }
  double length_scale() const { return length_scale_; }
  double log_marginal_likelihood() const { return lml_; }

 private:
  double kernel(std::span<const double> a, std::span<const double> b,
                double length_scale) const;
  // Cholesky factor and alpha for one length-scale; returns the LML.
  double factor(double length_scale, double noise, std::vector<double>& chol,
                std::vector<double>& alpha) const;

  std::vector<std::vector<double>> x_;
  std::vector<double> y_;  // standardized
  double y_mean_ = 0.0;
  double y_scale_ = 1.0;
  double length_scale_ = 0.0;
  double lml_ = 0.0;
  std::vector<double> chol_;   // lower triangular, row-major n x n
  std::vector<double> alpha_;  // K^-1 y
};

// In-place lower Cholesky factor of a symmetric positive-definite row-major
// n x n matrix. Returns false if a pivot is not positive.
bool cholesky(std::vector<double>& a, std::size_t n);

// Solves L x = b (forward) or L^T x = b (backward) in place.
void solve_lower(const std::vector<double>& l, std::size_t n, std::span<double> b);
void solve_upper_transposed(const std::vector<double>& l, std::size_t n,
                            std::span<double> b);

}  // namespace peerdistill
