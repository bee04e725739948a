#include "training_loop.hpp"

#include <cmath>
#include <random>
#include <string>

#include "peerdistill/io.hpp"

namespace peerdistill::detail {

std::uint64_t train_stream_seed(std::uint64_t seed) { return splitmix64(seed); }

std::uint64_t validation_stream_seed(std::uint64_t seed) {
  return splitmix64(seed ^ 0xA5A5A5A5DEADBEEFULL);
}

Tensor frozen_logits(const PeerModel& model, const Batch& batch) {
  Tape isolated;  // nothing recorded here reaches the caller's tape
  return flatten_logits(model.forward(batch)).detach();
}

namespace {

std::string where(std::size_t round, std::size_t step) {
  return "round " + std::to_string(round) + ", inner step " + std::to_string(step);
}

}  // namespace

void run_rounds(std::vector<PeerModel>& peers, const Dataset& data,
                const TrainerConfig& config, const LoopSpec& spec, TrainingTrace& trace) {
  const std::size_t m = peers.size();
  std::vector<AdamW> optimizers;
  std::vector<std::mt19937_64> rngs;
  for (std::size_t i = 0; i < m; ++i) {
    optimizers.emplace_back(peers[i].parameters(), config.adamw);
    rngs.emplace_back(splitmix64(config.seed ^ (0x9E3779B97F4A7C15ULL * (i + 1))));
  }
  BatchStream stream(data, Split::Train, config.batch_size, train_stream_seed(config.seed));

  std::size_t global = 0;
  Batch batch;
  double lr = 0.0;
  for (std::size_t round = 1; round <= config.outer_rounds; ++round) {
    const std::size_t first_row = trace.metrics.size();
    for (std::size_t t = 1; t <= config.inner_steps; ++t, ++global) {
      batch = stream.next();
      trace.batch_checksums.push_back(fnv1a64(std::string_view(
          reinterpret_cast<const char*>(batch.indices.data()),
          batch.indices.size() * sizeof(std::size_t))));
      lr = config.lr_at(global);
      const StepContext ctx{round, t, global, lr};

      auto step_once = [&](std::optional<std::size_t> only) {
        for (auto& p : peers) p.zero_grad();
        StepOutput out;
        {
          Tape tape;
          std::vector<Tensor> logits;
          logits.reserve(m);
          for (std::size_t i = 0; i < m; ++i)
            logits.push_back(flatten_logits(
                peers[i].forward(batch, {.train = true, .rng = &rngs[i]})));
          out = spec.objective(logits, batch, ctx, only);
          if (!std::isfinite(out.loss.item()))
            throw TrainingDiverged("non-finite loss at " + where(round, t), trace);
          tape.backward(out.loss);
        }
        try {
          if (only) {
            optimizers[*only].step(lr);
          } else {
            for (auto& opt : optimizers) opt.step(lr);
          }
        } catch (const NumericError& e) {
          throw TrainingDiverged(std::string(e.what()) + " at " + where(round, t), trace);
        }
        return out;
      };

      if (spec.mode == UpdateMode::RoundRobin) {
        for (std::size_t i = 0; i < m; ++i) {
          StepOutput out = step_once(i);
          const auto& term = out.terms.at(0);
          trace.metrics.push_back({round, t, i, term.ce, term.kl, term.total, lr, NAN});
        }
      } else {
        StepOutput out = step_once(std::nullopt);
        for (std::size_t i = 0; i < m; ++i) {
          const auto& term = out.terms.at(i);
          trace.metrics.push_back({round, t, i, term.ce, term.kl, term.total, lr, NAN});
        }
      }
    }

    std::vector<double> acc(m);
    for (std::size_t i = 0; i < m; ++i)
      acc[i] = evaluate_accuracy(peers[i], data, Split::Validation, config.val_batch_size);
    for (std::size_t r = first_row; r < trace.metrics.size(); ++r)
      trace.metrics[r].val_acc = acc[trace.metrics[r].peer];
    trace.val_acc.push_back(acc);

    if (spec.after_round) spec.after_round(round, batch, lr);
  }
  for (auto& p : peers) p.zero_grad();
}

}  // namespace peerdistill::detail
