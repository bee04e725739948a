#pragma once

// Round/step driver shared by every training method.

#include <functional>
#include <optional>
#include <vector>

#include "peerdistill/wml.hpp"

namespace peerdistill::detail {

struct StepContext {
  std::size_t round = 0;       // 1-based
  std::size_t inner_step = 0;  // 1-based within the round
  std::size_t global_step = 0; // 0-based
  double lr = 0.0;
};

struct StepOutput {
  Tensor loss;
  std::vector<PeerLossTerms> terms;
};

// `logits` holds every peer's flattened logits on the batch. In round-robin
// mode `only` names the peer being updated and the objective must return a
// loss whose gradient reaches that peer only; `terms` then has one entry.
using StepObjective = std::function<StepOutput(
    const std::vector<Tensor>& logits, const Batch& batch, const StepContext& ctx,
    std::optional<std::size_t> only)>;

// Runs after the validation accuracies of a round are recorded.
using RoundHook =
    std::function<void(std::size_t round, const Batch& last_batch, double last_lr)>;

enum class UpdateMode { Joint, RoundRobin };

struct LoopSpec {
  StepObjective objective;
  RoundHook after_round;
  UpdateMode mode = UpdateMode::Joint;
};

// Throws TrainingDiverged with the trace so far on non-finite losses or
// gradients.
void run_rounds(std::vector<PeerModel>& peers, const Dataset& data,
                const TrainerConfig& config, const LoopSpec& spec, TrainingTrace& trace);

// Flattened logits without recording on any tape.
Tensor frozen_logits(const PeerModel& model, const Batch& batch);

std::uint64_t train_stream_seed(std::uint64_t seed);
std::uint64_t validation_stream_seed(std::uint64_t seed);

}  // namespace peerdistill::detail
