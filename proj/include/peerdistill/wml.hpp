#pragma once

// Weighted mutual learning over M peers: the inner objective, the ensemble
// objective on held-out data, the first-order hypergradient of the peer
// weights, the exponentiated-gradient update, and the bi-level trainer.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "json.hpp"
#include "peerdistill/data.hpp"
#include "peerdistill/error.hpp"
#include "peerdistill/model.hpp"
#include "peerdistill/optim.hpp"

namespace peerdistill {

// A point on the probability simplex.
struct PeerWeights {
  std::vector<double> omega;

  static PeerWeights uniform(std::size_t m);
  std::size_t size() const { return omega.size(); }
  // Throws ContractError unless all entries are > 0 and sum to 1 within tol.
  void validate(double tol = 1e-9) const;
  Tensor tensor(bool requires_grad = false) const;
};

// omega_i * exp(-eta * g_i), normalized in log space. Entries are floored at
// exp(-700) relative to the largest so they stay strictly positive.
PeerWeights mirror_descent_update(const PeerWeights& omega, std::span<const double> g,
                                  double eta);

struct LossOptions {
  // Divide omega_j by (1 - omega_i) inside the KL sum of peer i.
  bool renormalize_kl_weights = false;
  // Stop the gradient through the second argument of every peer KL term.
  bool detach_kl_target = false;
  double kl_temperature = 1.0;
  // When defined, each peer's supervised term becomes
  // (1 - teacher_alpha) CE_i + teacher_alpha KL(z_i || z_teacher).
  Tensor teacher_logits;
  double teacher_alpha = 0.0;
};

struct PeerLossTerms {
  double ce = 0.0;
  // sum over j != i of w_ij KL(z_i || z_j)
  double kl = 0.0;
  // (1 - alpha) omega_i sup_i + alpha kl; sums over peers to the joint loss.
  double total = 0.0;
};

struct CombinedLoss {
  Tensor value;
  std::vector<PeerLossTerms> peers;
};

// (1 - alpha) sum_i omega_i sup_i + alpha sum_i sum_{j != i} omega_j KL(z_i || z_j),
// KL(a || b) = KL(softmax(a) || softmax(b)). `omega` is a shape-{M} tensor and
// may require a gradient. Logits are [rows x classes].
CombinedLoss combined_loss_terms(std::span<const Tensor> logits,
                                 std::span<const std::int32_t> labels, const Tensor& omega,
                                 double alpha, const LossOptions& options = {});
Tensor combined_loss(std::span<const Tensor> logits, std::span<const std::int32_t> labels,
                     const Tensor& omega, double alpha, const LossOptions& options = {});
Tensor combined_loss(std::span<const Tensor> logits, std::span<const std::int32_t> labels,
                     const PeerWeights& omega, double alpha, const LossOptions& options = {});

// (1 - alpha) sup_i + alpha sum_{j != i} KL(z_j || z_i): the partial derivative
// of the combined loss with respect to omega_i.
Tensor peer_ensemble_loss(std::size_t i, std::span<const Tensor> logits,
                          std::span<const std::int32_t> labels, double alpha,
                          const LossOptions& options = {});

// Cross-entropy of the mixture sum_i omega_i softmax(z_i).
Tensor outer_loss(std::span<const Tensor> logits, std::span<const std::int32_t> labels,
                  const Tensor& omega);
Tensor outer_loss(std::span<const Tensor> logits, std::span<const std::int32_t> labels,
                  const PeerWeights& omega);

struct HypergradientOptions {
  double gamma = 0.0;
  LossOptions loss;
  // Test hook: treat both parameter gradients as zero.
  bool freeze_theta_gradients = false;
};

struct Hypergradient {
  std::vector<double> g;         // direct - gamma * inner
  std::vector<double> direct;    // dL2/domega_i
  std::vector<double> inner;     // <grad_theta L2, grad_theta L_a(i)>
  double outer_loss = 0.0;
};

// g_i = dL2/domega_i - gamma <grad_theta L2, grad_theta L_a(i)>, with L2 on
// `val_batch` and L_a(i) on `train_batch`, both in evaluation mode. Peer
// gradients are left zeroed.
Hypergradient hypergradients(std::vector<PeerModel>& peers, const PeerWeights& omega,
                             const Batch& train_batch, const Batch& val_batch, double alpha,
                             const HypergradientOptions& options,
                             const PeerModel* teacher = nullptr);
double hypergradient(std::size_t i, std::vector<PeerModel>& peers, const PeerWeights& omega,
                     const Batch& train_batch, const Batch& val_batch, double alpha,
                     const HypergradientOptions& options, const PeerModel* teacher = nullptr);

// Flat inner product of two gradient sets enumerated as (tensor, values).
// Throws ContractError when the enumerations differ.
struct FlatGradient {
  std::vector<std::string> names;
  std::vector<std::size_t> sizes;
  std::vector<double> values;
};
FlatGradient flat_gradient(const std::vector<PeerModel>& peers);
double inner_product(const FlatGradient& a, const FlatGradient& b);

enum class EtaAnneal { Constant, Cosine };

struct TrainerConfig {
  double alpha = 0.5;
  // Unset: the learning rate of the last inner step of the round.
  std::optional<double> gamma;
  double eta0 = 0.5;
  double eta_final = 0.05;
  EtaAnneal eta_anneal = EtaAnneal::Cosine;
  std::size_t inner_steps = 10;   // T
  std::size_t outer_rounds = 20;  // K
  double lr_init = 1e-3;
  double lr_final = 1e-4;
  double warmup_ratio = 0.0003;
  AdamWSettings adamw;
  std::size_t batch_size = 32;
  std::size_t val_batch_size = 128;
  std::uint64_t seed = 0;
  bool renormalize_kl_weights = false;
  bool detach_kl_target = false;
  // Keep omega at its initial value (outer loop disabled).
  bool freeze_weights = false;
  double kl_temperature = 1.0;
  // KD_DWML teacher term weight.
  double teacher_alpha = 0.5;

  void validate() const;
  std::size_t total_steps() const { return inner_steps * outer_rounds; }
  std::size_t warmup_steps() const;
  double lr_at(std::size_t step) const;
  // Rounds are numbered 1..K.
  double eta_at(std::size_t round) const;
  LossOptions loss_options() const;
};

nlohmann::json to_json(const TrainerConfig& config);
TrainerConfig trainer_config_from_json(const nlohmann::json& j);

struct MetricsRow {
  std::size_t round = 0;
  std::size_t inner_step = 0;
  std::size_t peer = 0;
  double loss_ce = 0.0;
  double loss_kl = 0.0;
  double loss_total = 0.0;
  double lr = 0.0;
  double val_acc = 0.0;
};

struct WeightsRow {
  std::size_t round = 0;
  std::size_t peer = 0;
  double omega = 0.0;
  double hypergradient = 0.0;
  double eta = 0.0;
};

struct TrainingTrace {
  std::vector<MetricsRow> metrics;
  // Round 0 holds the initial weights; empty for methods without weights.
  std::vector<WeightsRow> weights;
  // val_acc[round - 1][peer]
  std::vector<std::vector<double>> val_acc;
  // Checksum of the dataset indices of every training batch, in order.
  std::vector<std::uint64_t> batch_checksums;
};

// Column order is fixed; an optional leading `method` column.
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows,
                       const std::string& method = {});
void write_weights_csv(std::ostream& out, const std::vector<WeightsRow>& rows,
                       const std::string& method = {});

struct TrainResult {
  std::vector<PeerModel> peers;
  PeerWeights weights;
  TrainingTrace trace;
};

// Thrown on a non-finite loss or gradient; carries the trace up to the failure.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& message, TrainingTrace partial)
      : NumericError(message), trace(std::move(partial)) {}
  TrainingTrace trace;
};

// Fraction of correct predictions over a split, evaluated in chunks.
double evaluate_accuracy(const PeerModel& model, const Dataset& data, Split split,
                         std::size_t chunk_rows = 256);

// Algorithm: omega uniform; each round runs T AdamW steps on the combined
// loss with omega fixed, evaluates every peer on the validation split, then
// takes one mirror-descent step along the hypergradient computed on a fresh
// validation batch.
TrainResult train_dwml(std::vector<PeerModel> peers, const Dataset& data,
                       const TrainerConfig& config, const PeerModel* teacher = nullptr);

}  // namespace peerdistill
