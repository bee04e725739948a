#pragma once

#include <cstddef>
#include <vector>

#include "json.hpp"
#include "peerdistill/model.hpp"

namespace peerdistill {

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  // Global L2 norm bound over all managed gradients; <= 0 disables clipping.
  double grad_clip = 1.0;
};

// AdamW with decoupled weight decay (PyTorch ordering: decay, then the Adam
// step) and global-norm gradient clipping ahead of the moment updates.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWSettings settings = {});

  // Applies one update from the parameters' accumulated gradients (a
  // parameter with no gradient buffer counts as zero). Returns the gradient
  // norm before clipping. Throws NumericError naming the first tensor with a
  // non-finite gradient; in that case nothing is modified.
  double step(double lr);

  std::size_t steps() const { return steps_; }
  const AdamWSettings& settings() const { return settings_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<NamedTensor> params_;
  AdamWSettings settings_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
};

// Linear warmup from 0 to lr_init over warmup_steps, then half-cosine decay
// reaching lr_final at total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                 double lr_init, double lr_final);

}  // namespace peerdistill
