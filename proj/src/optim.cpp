#include "peerdistill/optim.hpp"

#include <cmath>
#include <numbers>

#include "peerdistill/error.hpp"

namespace peerdistill {

AdamW::AdamW(std::vector<NamedTensor> params, AdamWSettings settings)
    : params_(std::move(params)), settings_(settings) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

double AdamW::step(double lr) {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter '" + p.name + "'");
      }
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  double clip_scale = 1.0;
  if (settings_.grad_clip > 0.0 && norm > settings_.grad_clip) {
    clip_scale = settings_.grad_clip / norm;
  }

  ++steps_;
  const auto t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(settings_.beta1, t);
  const double bc2 = 1.0 - std::pow(settings_.beta2, t);
  const double decay = 1.0 - lr * settings_.weight_decay;

  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto values = params_[i].tensor.mutable_values();
    const auto grad = params_[i].tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = grad.empty() ? 0.0 : grad[k] * clip_scale;
      m[k] = settings_.beta1 * m[k] + (1.0 - settings_.beta1) * g;
      v[k] = settings_.beta2 * v[k] + (1.0 - settings_.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      values[k] = values[k] * decay - lr * mhat / (std::sqrt(vhat) + settings_.eps);
    }
  }
  return norm;
}

double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                 double lr_init, double lr_final) {
  if (step < warmup_steps) {
    return lr_init * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return lr_init;
  const double progress = std::min(
      1.0, static_cast<double>(step - warmup_steps) /
               static_cast<double>(total_steps - warmup_steps));
  return lr_final +
         0.5 * (lr_init - lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace peerdistill
