#pragma once

// Peer models: a dense MLP classifier and a small pre-layer-norm transformer
// encoder with causal masking for next-token prediction.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "peerdistill/batch.hpp"
#include "peerdistill/tensor.hpp"

namespace peerdistill {

enum class ModelKind { Mlp, Transformer };

std::string_view to_string(ModelKind kind);
ModelKind model_kind_from_string(std::string_view name);

struct PeerConfig {
  ModelKind kind = ModelKind::Transformer;
  std::int64_t layers = 1;
  std::int64_t heads = 1;
  std::int64_t hidden_dim = 8;
  std::int64_t ff_dim = 32;
  std::int64_t vocab_size = 16;
  std::int64_t max_seq_len = 16;
  // MLP kind only.
  std::int64_t input_dim = 1;
  std::int64_t num_classes = 2;
  double dropout = 0.0;
  double layer_norm_eps = 1e-12;

  bool operator==(const PeerConfig&) const = default;
};

// Throws ConfigError naming the first violated constraint.
void validate(const PeerConfig& config);

nlohmann::json to_json(const PeerConfig& config);
PeerConfig peer_config_from_json(const nlohmann::json& j);

// Transformer configs with the vocabulary, sequence length and FF width of
// the RoBERTa-base family.
PeerConfig roberta_config(std::int64_t layers, std::int64_t heads,
                          std::int64_t hidden_dim);

// `layers` hidden layers of width `width`.
PeerConfig mlp_config(std::int64_t input_dim, std::int64_t num_classes,
                      std::int64_t width, std::int64_t layers = 1);

// Exact parameter count. The decoder weight is tied to the token embedding
// and contributes only its bias.
std::int64_t count_params(const PeerConfig& config);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ForwardOptions {
  bool train = false;
  // Required for dropout when train is set and config.dropout > 0.
  std::mt19937_64* rng = nullptr;
};

class PeerModel {
 public:
  PeerModel(PeerConfig config, std::vector<NamedTensor> parameters,
            int role_index = 1);

  const PeerConfig& config() const { return config_; }
  int role_index() const { return role_index_; }
  void set_role_index(int i) { role_index_ = i; }

  std::vector<NamedTensor>& parameters() { return parameters_; }
  const std::vector<NamedTensor>& parameters() const { return parameters_; }
  const Tensor& parameter(std::string_view name) const;
  Tensor& parameter(std::string_view name);

  std::size_t parameter_count() const;
  void zero_grad();
  void set_trainable(bool on);

  // Deep copy with independent parameter storage.
  PeerModel clone() const;

  // Logits: [rows x num_classes] (mlp) or [rows x width x vocab] (transformer).
  // Throws DataError on inputs that do not fit the config.
  Tensor forward(const Batch& batch, ForwardOptions options = {}) const;

 private:
  Tensor forward_mlp(const Batch& batch, ForwardOptions options) const;
  Tensor forward_transformer(const Batch& batch, ForwardOptions options) const;

  PeerConfig config_;
  std::vector<NamedTensor> parameters_;
  int role_index_;
};

// Weights ~ N(0, 0.02^2), biases 0, layer-norm scales 1. Deterministic in seed.
PeerModel build(const PeerConfig& config, std::uint64_t seed);

// Row-major flat view of logits for the loss functions: [rows x classes].
Tensor flatten_logits(const Tensor& logits);

// Fraction of label positions where argmax(logits) matches.
double accuracy(const Tensor& logits, const std::vector<std::int32_t>& labels);

}  // namespace peerdistill
