#include "peerdistill/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "peerdistill/error.hpp"
#include "peerdistill/kernels.hpp"

namespace peerdistill {
namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

const kernels::KernelTable& K() { return kernels::active(); }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }
std::size_t row_count(const Tensor& t) { return t.size() / last_dim(t); }

// log-softmax of one row of length n at temperature tau into out.
void log_softmax_row(const double* z, double* out, std::size_t n, double tau) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, z[c] / tau);
  double s = 0.0;
  for (std::size_t c = 0; c < n; ++c) s += std::exp(z[c] / tau - mx);
  const double lse = mx + std::log(s);
  for (std::size_t c = 0; c < n; ++c) out[c] = z[c] / tau - lse;
}

void check_labels(std::span<const std::int32_t> labels, std::size_t rows,
                  std::size_t classes, const char* op) {
  if (labels.size() != rows) {
    throw DimensionError(std::string(op) + ": " + std::to_string(rows) +
                         " rows but " + std::to_string(labels.size()) +
                         " labels");
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw IndexError(std::string(op) + ": label " +
                       std::to_string(labels[r]) + " at row " +
                       std::to_string(r) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  K().gemm_nn(a.values().data(), b.values().data(),
              out.mutable_values().data(), m, k, n);
  if (should_record({a, b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record({a, b}, out, [ai, bi, oi, m, k, n] {
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        K().gemm_nt(g, bi->values.data(), ai->grad_buffer().data(), m, n, k);
      }
      if (bi->requires_grad) {
        K().gemm_tn(ai->values.data(), g, bi->grad_buffer().data(), k, m, n);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ for " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  Tensor out = Tensor::zeros({m, n});
  K().gemm_nt(a.values().data(), b.values().data(),
              out.mutable_values().data(), m, k, n);
  if (should_record({a, b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record({a, b}, out, [ai, bi, oi, m, k, n] {
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        K().gemm_nn(g, bi->values.data(), ai->grad_buffer().data(), m, n, k);
      }
      if (bi->requires_grad) {
        K().gemm_tn(g, ai->values.data(), bi->grad_buffer().data(), n, m, k);
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  K().add(a.values().data(), b.values().data(), out.mutable_values().data(),
          a.size());
  if (should_record({a, b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record({a, b}, out, [ai, bi, oi] {
      const std::size_t n = oi->values.size();
      if (ai->requires_grad) K().axpy(1.0, oi->grad.data(), ai->grad_buffer().data(), n);
      if (bi->requires_grad) K().axpy(1.0, oi->grad.data(), bi->grad_buffer().data(), n);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  if (should_record({a, b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record({a, b}, out, [ai, bi, oi] {
      const std::size_t n = oi->values.size();
      if (ai->requires_grad) K().axpy(1.0, oi->grad.data(), ai->grad_buffer().data(), n);
      if (bi->requires_grad) K().axpy(-1.0, oi->grad.data(), bi->grad_buffer().data(), n);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const bool broadcast = b.size() == 1 && a.size() != 1;
  if (!broadcast) require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.size();
  if (broadcast) {
    std::copy(a.values().begin(), a.values().end(),
              out.mutable_values().begin());
    K().scale(b[0], out.mutable_values().data(), n);
  } else {
    K().mul(a.values().data(), b.values().data(), out.mutable_values().data(), n);
  }
  if (should_record({a, b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record({a, b}, out, [ai, bi, oi, broadcast, n] {
      const double* g = oi->grad.data();
      if (broadcast) {
        if (ai->requires_grad) K().axpy(bi->values[0], g, ai->grad_buffer().data(), n);
        if (bi->requires_grad) bi->grad_buffer()[0] += K().dot(g, ai->values.data(), n);
        return;
      }
      if (ai->requires_grad) {
        auto ga = ai->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bi->values[i];
      }
      if (bi->requires_grad) {
        auto gb = bi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * ai->values[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  const bool broadcast = b.size() == 1 && a.size() != 1;
  if (!broadcast) require_same_shape(a, b, "div");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.size();
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) o[i] = a[i] / b[broadcast ? 0 : i];
  if (should_record({a, b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    Tape::current()->record({a, b}, out, [ai, bi, oi, broadcast, n] {
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        auto ga = ai->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / bi->values[broadcast ? 0 : i];
      }
      if (bi->requires_grad) {
        auto gb = bi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          const double d = bi->values[broadcast ? 0 : i];
          gb[broadcast ? 0 : i] -= g[i] * oi->values[i] / d;
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = a.detach();
  K().scale(c, out.mutable_values().data(), out.size());
  if (should_record({a})) {
    ImplPtr ai = a.impl(), oi = out.impl();
    Tape::current()->record({a}, out, [ai, oi, c] {
      K().axpy(c, oi->grad.data(), ai->grad_buffer().data(), oi->values.size());
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(bias, 1, "add_bias");
  if (last_dim(x) != bias.size()) {
    throw DimensionError("add_bias: " + shape_string(x.shape()) + " + " +
                         shape_string(bias.shape()));
  }
  const std::size_t rows = row_count(x), n = bias.size();
  Tensor out = x.detach();
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    K().add(o.data() + r * n, bias.values().data(), o.data() + r * n, n);
  }
  if (should_record({x, bias})) {
    ImplPtr xi = x.impl(), bi = bias.impl(), oi = out.impl();
    Tape::current()->record({x, bias}, out, [xi, bi, oi, rows, n] {
      const double* g = oi->grad.data();
      if (xi->requires_grad) K().axpy(1.0, g, xi->grad_buffer().data(), rows * n);
      if (bi->requires_grad) {
        double* gb = bi->grad_buffer().data();
        for (std::size_t r = 0; r < rows; ++r) K().axpy(1.0, g + r * n, gb, n);
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor out = Tensor::scalar(s);
  if (should_record({a})) {
    ImplPtr ai = a.impl(), oi = out.impl();
    Tape::current()->record({a}, out, [ai, oi] {
      const double g = oi->grad[0];
      for (double& x : ai->grad_buffer()) x += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor select(const Tensor& a, std::size_t i) {
  if (i >= a.size()) {
    throw IndexError("select: index " + std::to_string(i) +
                     " outside tensor of size " + std::to_string(a.size()));
  }
  Tensor out = Tensor::scalar(a[i]);
  if (should_record({a})) {
    ImplPtr ai = a.impl(), oi = out.impl();
    Tape::current()->record({a}, out, [ai, oi, i] {
      ai->grad_buffer()[i] += oi->grad[0];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " +
                         shape_string(shape));
  }
  Tensor out = Tensor::from(std::move(shape),
                            std::vector<double>(a.values().begin(),
                                                a.values().end()));
  if (should_record({a})) {
    ImplPtr ai = a.impl(), oi = out.impl();
    Tape::current()->record({a}, out, [ai, oi] {
      K().axpy(1.0, oi->grad.data(), ai->grad_buffer().data(), oi->values.size());
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = x.detach();
  for (double& v : out.mutable_values()) v = v > 0.0 ? v : 0.0;
  if (should_record({x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::current()->record({x}, out, [xi, oi] {
      auto gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (xi->values[i] > 0.0) gx[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Tensor out = x.detach();
  for (double& v : out.mutable_values()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  if (should_record({x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::current()->record({x}, out, [xi, oi] {
      const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
      auto gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double v = xi->values[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        gx[i] += oi->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  const double inv = 1.0 / (1.0 - p);
  for (double& m : *mask) m = keep(rng) ? inv : 0.0;
  Tensor out = x.detach();
  K().mul(out.values().data(), mask->data(), out.mutable_values().data(), out.size());
  if (should_record({x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::current()->record({x}, out, [xi, oi, mask] {
      auto gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const std::size_t n = last_dim(x), rows = row_count(x);
  if (gamma.size() != n || beta.size() != n) {
    throw DimensionError("layer_norm: features " + std::to_string(n) +
                         " vs gamma " + shape_string(gamma.shape()) +
                         ", beta " + shape_string(beta.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* xv = x.values().data();
  double* ov = out.mutable_values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mu) * rs;
      (*xhat)[r * n + c] = h;
      ov[r * n + c] = h * gamma[c] + beta[c];
    }
  }
  if (should_record({x, gamma, beta})) {
    ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    Tape::current()->record({x, gamma, beta}, out,
                            [xi, gi, bi, oi, xhat, rstd, rows, n] {
      const double* g = oi->grad.data();
      if (gi->requires_grad) {
        auto gg = gi->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * (*xhat)[r * n + c];
      }
      if (bi->requires_grad) {
        double* gb = bi->grad_buffer().data();
        for (std::size_t r = 0; r < rows; ++r) K().axpy(1.0, g + r * n, gb, n);
      }
      if (xi->requires_grad) {
        auto gx = xi->grad_buffer();
        std::vector<double> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            dh[c] = g[r * n + c] * gi->values[c];
            mean_dh += dh[c];
            mean_dh_h += dh[c] * (*xhat)[r * n + c];
          }
          mean_dh /= static_cast<double>(n);
          mean_dh_h /= static_cast<double>(n);
          for (std::size_t c = 0; c < n; ++c) {
            gx[r * n + c] += (*rstd)[r] *
                             (dh[c] - mean_dh - (*xhat)[r * n + c] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> indices) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= vocab) {
      throw IndexError("embedding: index " + std::to_string(indices[i]) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Tensor out = Tensor::zeros({indices.size(), d});
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d,
                o.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  if (should_record({table})) {
    ImplPtr ti = table.impl(), oi = out.impl();
    auto idx = std::make_shared<std::vector<std::int32_t>>(indices.begin(), indices.end());
    Tape::current()->record({table}, out, [ti, oi, idx, d] {
      double* gt = ti->grad_buffer().data();
      for (std::size_t i = 0; i < idx->size(); ++i) {
        K().axpy(1.0, oi->grad.data() + i * d,
                 gt + static_cast<std::size_t>((*idx)[i]) * d, d);
      }
    });
  }
  return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t batch, std::size_t seq, std::size_t heads) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  require_rank(q, 2, "causal_attention");
  const std::size_t d = q.dim(1);
  if (q.dim(0) != batch * seq || heads == 0 || d % heads != 0) {
    throw DimensionError("causal_attention: shape " + shape_string(q.shape()) +
                         " incompatible with batch " + std::to_string(batch) +
                         ", seq " + std::to_string(seq) + ", heads " +
                         std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // Attention probabilities per (batch, head): [seq x seq], zero above diagonal.
  auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq, 0.0);
  Tensor out = Tensor::zeros(q.shape());

  std::vector<double> qh(seq * dh), kh(seq * dh), vh(seq * dh), oh(seq * dh);
  auto gather = [&](const double* src, std::vector<double>& dst, std::size_t b,
                    std::size_t h) {
    for (std::size_t t = 0; t < seq; ++t)
      std::copy_n(src + (b * seq + t) * d + h * dh, dh, dst.data() + t * dh);
  };

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      gather(q.values().data(), qh, b, h);
      gather(k.values().data(), kh, b, h);
      gather(v.values().data(), vh, b, h);
      double* p = probs->data() + (b * heads + h) * seq * seq;
      for (std::size_t t = 0; t < seq; ++t) {
        double* prow = p + t * seq;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] = K().dot(qh.data() + t * dh, kh.data() + s * dh, dh) * inv_sqrt;
          mx = std::max(mx, prow[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] = std::exp(prow[s] - mx);
          z += prow[s];
        }
        for (std::size_t s = 0; s <= t; ++s) prow[s] /= z;
      }
      std::fill(oh.begin(), oh.end(), 0.0);
      K().gemm_nn(p, vh.data(), oh.data(), seq, seq, dh);
      double* o = out.mutable_values().data();
      for (std::size_t t = 0; t < seq; ++t)
        std::copy_n(oh.data() + t * dh, dh, o + (b * seq + t) * d + h * dh);
    }
  }

  if (should_record({q, k, v})) {
    ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl();
    Tape::current()->record({q, k, v}, out,
                            [qi, ki, vi, oi, probs, batch, seq, heads, d, dh, inv_sqrt] {
      std::vector<double> qh(seq * dh), kh(seq * dh), vh(seq * dh), go(seq * dh);
      std::vector<double> gq(seq * dh), gk(seq * dh), gv(seq * dh);
      std::vector<double> gp(seq * seq);
      auto gather = [&](const double* src, std::vector<double>& dst, std::size_t b,
                        std::size_t h) {
        for (std::size_t t = 0; t < seq; ++t)
          std::copy_n(src + (b * seq + t) * d + h * dh, dh, dst.data() + t * dh);
      };
      auto scatter_add = [&](const std::vector<double>& src, const ImplPtr& dst,
                             std::size_t b, std::size_t h) {
        double* g = dst->grad_buffer().data();
        for (std::size_t t = 0; t < seq; ++t)
          K().axpy(1.0, src.data() + t * dh, g + (b * seq + t) * d + h * dh, dh);
      };
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          gather(qi->values.data(), qh, b, h);
          gather(ki->values.data(), kh, b, h);
          gather(vi->values.data(), vh, b, h);
          gather(oi->grad.data(), go, b, h);
          const double* p = probs->data() + (b * heads + h) * seq * seq;

          // dV = P^T dO
          std::fill(gv.begin(), gv.end(), 0.0);
          K().gemm_tn(p, go.data(), gv.data(), seq, seq, dh);
          // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
          std::fill(gp.begin(), gp.end(), 0.0);
          K().gemm_nt(go.data(), vh.data(), gp.data(), seq, dh, seq);
          for (std::size_t t = 0; t < seq; ++t) {
            double* row = gp.data() + t * seq;
            const double* prow = p + t * seq;
            double dotp = 0.0;
            for (std::size_t s = 0; s <= t; ++s) dotp += row[s] * prow[s];
            for (std::size_t s = 0; s < seq; ++s)
              row[s] = s <= t ? prow[s] * (row[s] - dotp) * inv_sqrt : 0.0;
          }
          std::fill(gq.begin(), gq.end(), 0.0);
          std::fill(gk.begin(), gk.end(), 0.0);
          K().gemm_nn(gp.data(), kh.data(), gq.data(), seq, seq, dh);
          K().gemm_tn(gp.data(), qh.data(), gk.data(), seq, seq, dh);
          if (qi->requires_grad) scatter_add(gq, qi, b, h);
          if (ki->requires_grad) scatter_add(gk, ki, b, h);
          if (vi->requires_grad) scatter_add(gv, vi, b, h);
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& z, double temperature) {
  const std::size_t n = last_dim(z), rows = row_count(z);
  Tensor out = Tensor::zeros(z.shape());
  double* o = out.mutable_values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    log_softmax_row(z.values().data() + r * n, o + r * n, n, temperature);
    for (std::size_t c = 0; c < n; ++c) o[r * n + c] = std::exp(o[r * n + c]);
  }
  if (should_record({z})) {
    ImplPtr zi = z.impl(), oi = out.impl();
    Tape::current()->record({z}, out, [zi, oi, rows, n, temperature] {
      double* gz = zi->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = oi->values.data() + r * n;
        const double* g = oi->grad.data() + r * n;
        const double dp = K().dot(g, p, n);
        for (std::size_t c = 0; c < n; ++c)
          gz[r * n + c] += p[c] * (g[c] - dp) / temperature;
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
  const std::size_t n = last_dim(logits), rows = row_count(logits);
  check_labels(labels, rows, n, "cross_entropy");
  auto logp = std::make_shared<std::vector<double>>(logits.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    log_softmax_row(logits.values().data() + r * n, logp->data() + r * n, n, 1.0);
    total -= (*logp)[r * n + static_cast<std::size_t>(labels[r])];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));
  if (should_record({logits})) {
    ImplPtr li = logits.impl(), oi = out.impl();
    auto lab = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
    Tape::current()->record({logits}, out, [li, oi, logp, lab, rows, n] {
      const double g = oi->grad[0] / static_cast<double>(rows);
      double* gl = li->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
          const double onehot = static_cast<std::size_t>((*lab)[r]) == c ? 1.0 : 0.0;
          gl[r * n + c] += g * (std::exp((*logp)[r * n + c]) - onehot);
        }
      }
    });
  }
  return out;
}

Tensor kl_divergence(const Tensor& logits_p, const Tensor& logits_q,
                     KlOptions options) {
  require_same_shape(logits_p, logits_q, "kl_divergence");
  const std::size_t n = last_dim(logits_p), rows = row_count(logits_p);
  const double tau = options.temperature;
  auto logp = std::make_shared<std::vector<double>>(logits_p.size());
  auto logq = std::make_shared<std::vector<double>>(logits_q.size());
  auto row_kl = std::make_shared<std::vector<double>>(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    log_softmax_row(logits_p.values().data() + r * n, logp->data() + r * n, n, tau);
    log_softmax_row(logits_q.values().data() + r * n, logq->data() + r * n, n, tau);
    double kl = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double lp = (*logp)[r * n + c];
      kl += std::exp(lp) * (lp - (*logq)[r * n + c]);
    }
    (*row_kl)[r] = kl;
    total += kl;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));

  const bool record = options.detach_target ? should_record({logits_p})
                                            : should_record({logits_p, logits_q});
  if (record) {
    ImplPtr pi = logits_p.impl(), oi = out.impl();
    ImplPtr qi = options.detach_target ? nullptr : logits_q.impl();
    auto body = [pi, qi, oi, logp, logq, row_kl, rows, n, tau] {
      const double g = oi->grad[0] / (static_cast<double>(rows) * tau);
      if (pi->requires_grad) {
        double* gp = pi->grad_buffer().data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < n; ++c) {
            const std::size_t i = r * n + c;
            gp[i] += g * std::exp((*logp)[i]) * ((*logp)[i] - (*logq)[i] - (*row_kl)[r]);
          }
        }
      }
      if (qi && qi->requires_grad) {
        double* gq = qi->grad_buffer().data();
        for (std::size_t i = 0; i < rows * n; ++i) {
          gq[i] += g * (std::exp((*logq)[i]) - std::exp((*logp)[i]));
        }
      }
    };
    if (options.detach_target) {
      Tape::current()->record({logits_p}, out, body);
    } else {
      Tape::current()->record({logits_p, logits_q}, out, body);
    }
  }
  return out;
}

Tensor nll_of_probs(const Tensor& probs, std::span<const std::int32_t> labels) {
  const std::size_t n = last_dim(probs), rows = row_count(probs);
  check_labels(labels, rows, n, "nll_of_probs");
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    total -= std::log(probs[r * n + static_cast<std::size_t>(labels[r])]);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));
  if (should_record({probs})) {
    ImplPtr pi = probs.impl(), oi = out.impl();
    auto lab = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
    Tape::current()->record({probs}, out, [pi, oi, lab, rows, n] {
      const double g = oi->grad[0] / static_cast<double>(rows);
      double* gp = pi->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t i = r * n + static_cast<std::size_t>((*lab)[r]);
        gp[i] -= g / pi->values[i];
      }
    });
  }
  return out;
}

}  // namespace peerdistill
