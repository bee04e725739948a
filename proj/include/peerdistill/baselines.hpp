#pragma once

// Comparison methods on the same substrate as the weighted trainer: every
// method runs through the same round/step driver, consumes the same batch
// sequence for a given seed and reports the same trace schema.

#include <optional>
#include <string>
#include <string_view>

#include "peerdistill/wml.hpp"

namespace peerdistill {

enum class Method { Independent, Kd, Dml, Sd, Dwml, KdDwml };

std::string_view to_string(Method method);
Method method_from_string(std::string_view name);

enum class DmlUpdate { Simultaneous, RoundRobin };

struct MethodSpec {
  Method method = Method::Dwml;
  std::optional<std::string> teacher_checkpoint;
  // Weight of the teacher (KD, KD_DWML) or snapshot (SD) KL term.
  double distill_alpha = 0.5;
  DmlUpdate dml_update = DmlUpdate::Simultaneous;

  bool needs_teacher() const { return method == Method::Kd || method == Method::KdDwml; }
  // Throws ConfigError: kd and kd_dwml require a teacher checkpoint, the
  // others must not set one.
  void validate() const;
};

nlohmann::json to_json(const MethodSpec& spec);
MethodSpec method_spec_from_json(const nlohmann::json& j);

// Supervised cross-entropy only, every peer on its own.
TrainResult train_independent(std::vector<PeerModel> peers, const Dataset& data,
                              const TrainerConfig& config);

// Each student minimizes (1 - a) CE + a KL(z_s || z_t), a = distill_alpha,
// with the teacher frozen.
TrainResult train_kd(std::vector<PeerModel> students, const PeerModel& teacher,
                     const Dataset& data, const TrainerConfig& config, const MethodSpec& spec);

// Peer i minimizes (1/M)[(1 - alpha) CE_i + alpha sum_{j != i} KL(z_i || sg z_j)]
// with alpha from the trainer config. Simultaneous updates take one joint
// step per batch; round-robin recomputes the targets before each peer's step.
TrainResult train_dml(std::vector<PeerModel> peers, const Dataset& data,
                      const TrainerConfig& config, const MethodSpec& spec);

// Supervised for the first half of the step budget, then
// (1 - a) CE + a KL(z || z_snapshot) against a frozen copy taken at the midpoint.
TrainResult train_sd(std::vector<PeerModel> peers, const Dataset& data,
                     const TrainerConfig& config, const MethodSpec& spec);

// The weighted trainer with each supervised term replaced by
// (1 - a) CE + a KL(z_i || z_teacher), a = distill_alpha.
TrainResult train_kd_dwml(std::vector<PeerModel> peers, const PeerModel& teacher,
                          const Dataset& data, const TrainerConfig& config,
                          const MethodSpec& spec);

// Dispatches on spec.method. `teacher` is required for kd and kd_dwml.
TrainResult run_method(const MethodSpec& spec, std::vector<PeerModel> peers,
                       const Dataset& data, const TrainerConfig& config,
                       const PeerModel* teacher = nullptr);

}  // namespace peerdistill
