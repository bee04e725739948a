#include "peerdistill/gp.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "peerdistill/error.hpp"
#include "peerdistill/kernels.hpp"

namespace peerdistill {

bool cholesky(std::vector<double>& a, std::size_t n) {
  const auto& k = kernels::active();
  for (std::size_t j = 0; j < n; ++j) {
    double* rj = a.data() + j * n;
    const double d = rj[j] - k.dot(rj, rj, j);
    if (!(d > 0.0)) return false;
    const double ljj = std::sqrt(d);
    rj[j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double* ri = a.data() + i * n;
      ri[j] = (ri[j] - k.dot(ri, rj, j)) / ljj;
    }
    for (std::size_t c = j + 1; c < n; ++c) rj[c] = 0.0;
  }
  return true;
}

void solve_lower(const std::vector<double>& l, std::size_t n, std::span<double> b) {
  const auto& k = kernels::active();
  for (std::size_t i = 0; i < n; ++i)
    b[i] = (b[i] - k.dot(l.data() + i * n, b.data(), i)) / l[i * n + i];
}

void solve_upper_transposed(const std::vector<double>& l, std::size_t n,
                            std::span<double> b) {
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t r = ii + 1; r < n; ++r) s -= l[r * n + ii] * b[r];
    b[ii] = s / l[ii * n + ii];
  }
}

double GaussianProcess::kernel(std::span<const double> a, std::span<const double> b,
                               double length_scale) const {
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    d2 += d * d;
  }
  return std::exp(-0.5 * d2 / (length_scale * length_scale));
}

double GaussianProcess::factor(double length_scale, double noise,
                               std::vector<double>& chol,
                               std::vector<double>& alpha) const {
  const std::size_t n = x_.size();
  chol.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = kernel(x_[i], x_[j], length_scale);
      chol[i * n + j] = v;
      chol[j * n + i] = v;
    }
    chol[i * n + i] += noise;
  }
  // Escalate jitter until the factorization succeeds.
  double jitter = noise;
  std::vector<double> base = chol;
  while (!cholesky(chol, n)) {
    jitter *= 10.0;
    if (jitter > 1.0) throw NumericError("GP kernel matrix is not positive definite");
    chol = base;
    for (std::size_t i = 0; i < n; ++i) chol[i * n + i] += jitter - noise;
  }
  alpha = y_;
  solve_lower(chol, n, alpha);
  double fit = 0.0;
  for (double a : alpha) fit += a * a;
  solve_upper_transposed(chol, n, alpha);
  double logdet = 0.0;
  for (std::size_t i = 0; i < n; ++i) logdet += std::log(chol[i * n + i]);
  return -0.5 * fit - logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

void GaussianProcess::fit(std::vector<std::vector<double>> x, std::vector<double> y,
                          const GpSettings& settings) {
  if (x.empty() || x.size() != y.size())
    throw ContractError("GP fit needs matching, non-empty inputs and observations");
  for (const auto& row : x)
    if (row.size() != x.front().size()) throw ContractError("GP inputs have ragged dimensions");
  if (settings.length_scales.empty()) throw ConfigError("GP needs at least one length-scale");

  const auto n = static_cast<double>(y.size());
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : y) var += (v - mean) * (v - mean);
  var /= n;
  y_mean_ = mean;
  y_scale_ = var > 0.0 ? std::sqrt(var) : 1.0;
  x_ = std::move(x);
  y_.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) y_[i] = (y[i] - y_mean_) / y_scale_;

  lml_ = -std::numeric_limits<double>::infinity();
  std::vector<double> chol, alpha;
  for (double ls : settings.length_scales) {
    const double lml = factor(ls, settings.noise, chol, alpha);
    if (lml > lml_) {
      lml_ = lml;
      length_scale_ = ls;
      chol_ = chol;
      alpha_ = alpha;
    }
  }
}

GpPrediction GaussianProcess::predict(std::span<const double> x) const {
  if (x_.empty()) throw ContractError("GP has no observations");
  if (x.size() != x_.front().size()) throw DimensionError("GP query has the wrong dimension");
  const std::size_t n = x_.size();
  std::vector<double> kx(n);
  for (std::size_t i = 0; i < n; ++i) kx[i] = kernel(x, x_[i], length_scale_);
  const double mean = kernels::active().dot(kx.data(), alpha_.data(), n);
  solve_lower(chol_, n, kx);
  const double explained = kernels::active().dot(kx.data(), kx.data(), n);
  const double var = std::max(0.0, 1.0 - explained);
  return {y_mean_ + y_scale_ * mean, var * y_scale_ * y_scale_};
}

}  // namespace peerdistill
