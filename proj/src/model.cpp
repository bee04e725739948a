#include "peerdistill/model.hpp"

#include <algorithm>

#include "peerdistill/error.hpp"
#include "peerdistill/ops.hpp"

namespace peerdistill {

std::string_view to_string(ModelKind kind) {
  return kind == ModelKind::Mlp ? "mlp" : "transformer";
}

ModelKind model_kind_from_string(std::string_view name) {
  if (name == "mlp") return ModelKind::Mlp;
  if (name == "transformer") return ModelKind::Transformer;
  throw ConfigError("unknown model kind '" + std::string(name) + "'");
}

void validate(const PeerConfig& c) {
  auto positive = [](std::int64_t v, const char* field) {
    if (v < 1) {
      throw ConfigError(std::string("peer config: ") + field + " must be >= 1, got " +
                        std::to_string(v));
    }
  };
  positive(c.layers, "layers");
  positive(c.hidden_dim, "hidden_dim");
  if (c.dropout < 0.0 || c.dropout >= 1.0) {
    throw ConfigError("peer config: dropout must be in [0, 1)");
  }
  if (c.kind == ModelKind::Mlp) {
    positive(c.input_dim, "input_dim");
    positive(c.num_classes, "num_classes");
    return;
  }
  positive(c.heads, "heads");
  positive(c.ff_dim, "ff_dim");
  positive(c.vocab_size, "vocab_size");
  positive(c.max_seq_len, "max_seq_len");
  if (c.hidden_dim % c.heads != 0) {
    throw ConfigError("peer config: hidden_dim " + std::to_string(c.hidden_dim) +
                      " is not divisible by heads " + std::to_string(c.heads));
  }
  if (!(c.layer_norm_eps > 0.0)) {
    throw ConfigError("peer config: layer_norm_eps must be > 0");
  }
}

nlohmann::json to_json(const PeerConfig& c) {
  nlohmann::json j{{"model_kind", std::string(to_string(c.kind))},
                   {"layers", c.layers},
                   {"hidden_dim", c.hidden_dim},
                   {"dropout", c.dropout}};
  if (c.kind == ModelKind::Mlp) {
    j["input_dim"] = c.input_dim;
    j["num_classes"] = c.num_classes;
  } else {
    j["heads"] = c.heads;
    j["ff_dim"] = c.ff_dim;
    j["vocab_size"] = c.vocab_size;
    j["max_seq_len"] = c.max_seq_len;
    j["layer_norm_eps"] = c.layer_norm_eps;
  }
  return j;
}

PeerConfig peer_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("peer config must be a JSON object");
  PeerConfig c;
  try {
    c.kind = model_kind_from_string(j.value("model_kind", std::string("transformer")));
    c.layers = j.value("layers", c.layers);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.dropout = j.value("dropout", c.dropout);
    c.heads = j.value("heads", c.heads);
    c.ff_dim = j.value("ff_dim", c.ff_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.num_classes = j.value("num_classes", c.num_classes);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("peer config: ") + e.what());
  }
  validate(c);
  return c;
}

PeerConfig roberta_config(std::int64_t layers, std::int64_t heads,
                          std::int64_t hidden_dim) {
  PeerConfig c;
  c.kind = ModelKind::Transformer;
  c.layers = layers;
  c.heads = heads;
  c.hidden_dim = hidden_dim;
  c.ff_dim = 3072;
  c.vocab_size = 50265;
  c.max_seq_len = 514;
  return c;
}

PeerConfig mlp_config(std::int64_t input_dim, std::int64_t num_classes,
                      std::int64_t width, std::int64_t layers) {
  PeerConfig c;
  c.kind = ModelKind::Mlp;
  c.layers = layers;
  c.hidden_dim = width;
  c.input_dim = input_dim;
  c.num_classes = num_classes;
  return c;
}

std::int64_t count_params(const PeerConfig& c) {
  if (c.kind == ModelKind::Mlp) {
    std::int64_t total = 0;
    std::int64_t in = c.input_dim;
    for (std::int64_t l = 0; l < c.layers; ++l) {
      total += in * c.hidden_dim + c.hidden_dim;
      in = c.hidden_dim;
    }
    return total + in * c.num_classes + c.num_classes;
  }
  const std::int64_t d = c.hidden_dim, ff = c.ff_dim, v = c.vocab_size;
  const std::int64_t embeddings = v * d + c.max_seq_len * d + d + 2 * d;
  const std::int64_t per_layer =
      4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d;
  const std::int64_t head = (d * d + d) + 2 * d + v;
  return embeddings + c.layers * per_layer + head;
}

PeerModel::PeerModel(PeerConfig config, std::vector<NamedTensor> parameters,
                     int role_index)
    : config_(std::move(config)),
      parameters_(std::move(parameters)),
      role_index_(role_index) {}

const Tensor& PeerModel::parameter(std::string_view name) const {
  auto it = std::find_if(parameters_.begin(), parameters_.end(),
                         [&](const NamedTensor& p) { return p.name == name; });
  if (it == parameters_.end()) {
    throw ContractError("model has no parameter '" + std::string(name) + "'");
  }
  return it->tensor;
}

Tensor& PeerModel::parameter(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).parameter(name));
}

std::size_t PeerModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters_) n += p.tensor.size();
  return n;
}

void PeerModel::zero_grad() {
  for (auto& p : parameters_) p.tensor.zero_grad();
}

void PeerModel::set_trainable(bool on) {
  for (auto& p : parameters_) p.tensor.set_requires_grad(on);
}

PeerModel PeerModel::clone() const {
  std::vector<NamedTensor> copy;
  copy.reserve(parameters_.size());
  for (const auto& p : parameters_) copy.push_back({p.name, p.tensor.clone()});
  return PeerModel(config_, std::move(copy), role_index_);
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  void normal(std::vector<NamedTensor>& out, std::string name, Shape shape) {
    std::normal_distribution<double> dist(0.0, 0.02);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = dist(rng_);
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(v), true)});
  }
  void constant(std::vector<NamedTensor>& out, std::string name, std::size_t n,
                double value) {
    out.push_back({std::move(name), Tensor::from({n}, std::vector<double>(n, value), true)});
  }
  void dense(std::vector<NamedTensor>& out, const std::string& prefix, std::size_t in,
             std::size_t outdim) {
    normal(out, prefix + ".weight", {in, outdim});
    constant(out, prefix + ".bias", outdim, 0.0);
  }
  void norm(std::vector<NamedTensor>& out, const std::string& prefix, std::size_t n) {
    constant(out, prefix + ".gamma", n, 1.0);
    constant(out, prefix + ".beta", n, 0.0);
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

PeerModel build(const PeerConfig& config, std::uint64_t seed) {
  validate(config);
  Initializer init(seed);
  std::vector<NamedTensor> params;
  if (config.kind == ModelKind::Mlp) {
    std::size_t in = static_cast<std::size_t>(config.input_dim);
    const auto width = static_cast<std::size_t>(config.hidden_dim);
    for (std::int64_t l = 0; l < config.layers; ++l) {
      init.dense(params, "dense" + std::to_string(l), in, width);
      in = width;
    }
    init.dense(params, "out", in, static_cast<std::size_t>(config.num_classes));
    return PeerModel(config, std::move(params));
  }

  const auto d = static_cast<std::size_t>(config.hidden_dim);
  const auto ff = static_cast<std::size_t>(config.ff_dim);
  const auto vocab = static_cast<std::size_t>(config.vocab_size);
  init.normal(params, "tok_embed", {vocab, d});
  init.normal(params, "pos_embed", {static_cast<std::size_t>(config.max_seq_len), d});
  init.normal(params, "type_embed", {d});
  init.norm(params, "embed_ln", d);
  for (std::int64_t l = 0; l < config.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    init.norm(params, p + ".attn_ln", d);
    for (const char* proj : {"q", "k", "v", "o"}) {
      init.dense(params, p + ".attn." + proj, d, d);
    }
    init.norm(params, p + ".ffn_ln", d);
    init.dense(params, p + ".ffn.in", d, ff);
    init.dense(params, p + ".ffn.out", ff, d);
  }
  init.dense(params, "head.dense", d, d);
  init.norm(params, "head.ln", d);
  init.constant(params, "decoder.bias", vocab, 0.0);
  return PeerModel(config, std::move(params));
}

Tensor PeerModel::forward(const Batch& batch, ForwardOptions options) const {
  return config_.kind == ModelKind::Mlp ? forward_mlp(batch, options)
                                        : forward_transformer(batch, options);
}

Tensor PeerModel::forward_mlp(const Batch& batch, ForwardOptions options) const {
  if (batch.is_tokens() || batch.width != static_cast<std::size_t>(config_.input_dim) ||
      batch.features.size() != batch.rows * batch.width || batch.rows == 0) {
    throw DataError("mlp forward: expected " + std::to_string(config_.input_dim) +
                    " features per row, got a batch of " + std::to_string(batch.rows) +
                    "x" + std::to_string(batch.width));
  }
  const bool drop = options.train && options.rng && config_.dropout > 0.0;
  Tensor x = Tensor::from({batch.rows, batch.width}, batch.features);
  for (std::int64_t l = 0; l < config_.layers; ++l) {
    const std::string p = "dense" + std::to_string(l);
    x = gelu(add_bias(matmul(x, parameter(p + ".weight")), parameter(p + ".bias")));
    if (drop) x = dropout(x, config_.dropout, *options.rng);
  }
  return add_bias(matmul(x, parameter("out.weight")), parameter("out.bias"));
}

Tensor PeerModel::forward_transformer(const Batch& batch, ForwardOptions options) const {
  const std::size_t rows = batch.rows, seq = batch.width;
  if (!batch.is_tokens() || rows == 0 || seq == 0 ||
      batch.tokens.size() != rows * seq) {
    throw DataError("transformer forward: expected a token batch");
  }
  if (seq > static_cast<std::size_t>(config_.max_seq_len)) {
    throw DataError("transformer forward: " + std::to_string(seq) +
                    " positions exceed max_seq_len " +
                    std::to_string(config_.max_seq_len));
  }
  for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
    const auto t = batch.tokens[i];
    if (t < 0 || t >= config_.vocab_size) {
      throw DataError("transformer forward: token " + std::to_string(t) + " at position " +
                      std::to_string(i) + " outside vocabulary of " +
                      std::to_string(config_.vocab_size));
    }
  }
  const double eps = config_.layer_norm_eps;
  const bool drop = options.train && options.rng && config_.dropout > 0.0;
  auto maybe_drop = [&](const Tensor& t) {
    return drop ? dropout(t, config_.dropout, *options.rng) : t;
  };
  auto dense = [&](const Tensor& in, const std::string& prefix) {
    return add_bias(matmul(in, parameter(prefix + ".weight")), parameter(prefix + ".bias"));
  };
  auto norm = [&](const Tensor& in, const std::string& prefix) {
    return layer_norm(in, parameter(prefix + ".gamma"), parameter(prefix + ".beta"), eps);
  };

  std::vector<std::int32_t> positions(rows * seq);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < seq; ++t) positions[r * seq + t] = static_cast<std::int32_t>(t);

  Tensor x = add(embedding(parameter("tok_embed"), batch.tokens),
                 embedding(parameter("pos_embed"), positions));
  x = add_bias(x, parameter("type_embed"));
  x = maybe_drop(norm(x, "embed_ln"));

  const auto heads = static_cast<std::size_t>(config_.heads);
  for (std::int64_t l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    Tensor h = norm(x, p + ".attn_ln");
    Tensor attn = causal_attention(dense(h, p + ".attn.q"), dense(h, p + ".attn.k"),
                                   dense(h, p + ".attn.v"), rows, seq, heads);
    x = add(x, maybe_drop(dense(attn, p + ".attn.o")));
    Tensor f = dense(gelu(dense(norm(x, p + ".ffn_ln"), p + ".ffn.in")), p + ".ffn.out");
    x = add(x, maybe_drop(f));
  }
  Tensor y = norm(gelu(dense(x, "head.dense")), "head.ln");
  Tensor logits = add_bias(matmul_nt(y, parameter("tok_embed")), parameter("decoder.bias"));
  return reshape(logits, {rows, seq, static_cast<std::size_t>(config_.vocab_size)});
}

Tensor flatten_logits(const Tensor& logits) {
  if (logits.rank() == 2) return logits;
  const std::size_t classes = logits.shape().back();
  return reshape(logits, {logits.size() / classes, classes});
}

double accuracy(const Tensor& logits, const std::vector<std::int32_t>& labels) {
  const std::size_t classes = logits.shape().back();
  const std::size_t rows = logits.size() / classes;
  if (rows != labels.size()) {
    throw DimensionError("accuracy: " + std::to_string(rows) + " rows vs " +
                         std::to_string(labels.size()) + " labels");
  }
  std::size_t hits = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = logits.values().subspan(r * classes, classes);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rows);
}

}  // namespace peerdistill
