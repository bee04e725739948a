#include "peerdistill/wml.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>

#include "peerdistill/io.hpp"
#include "peerdistill/ops.hpp"
#include "training_loop.hpp"

namespace peerdistill {

PeerWeights PeerWeights::uniform(std::size_t m) {
  if (m < 1) throw ConfigError("at least one peer is required");
  return {std::vector<double>(m, 1.0 / static_cast<double>(m))};
}

void PeerWeights::validate(double tol) const {
  if (omega.empty()) throw ContractError("peer weights are empty");
  double total = 0.0;
  for (double w : omega) {
    if (!(w > 0.0) || !std::isfinite(w)) throw ContractError("peer weights must be positive");
    total += w;
  }
  if (std::abs(total - 1.0) > tol)
    throw ContractError("peer weights sum to " + format_double(total) + ", not 1");
}

Tensor PeerWeights::tensor(bool requires_grad) const {
  return Tensor::from({omega.size()}, omega, requires_grad);
}

PeerWeights mirror_descent_update(const PeerWeights& omega, std::span<const double> g,
                                  double eta) {
  omega.validate();
  if (g.size() != omega.size())
    throw DimensionError("mirror descent: " + std::to_string(g.size()) + " gradients for " +
                         std::to_string(omega.size()) + " weights");
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("mirror descent step must be finite and >= 0");
  const std::size_t m = g.size();
  std::vector<double> logw(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (!std::isfinite(g[i])) throw NumericError("non-finite hypergradient for peer " + std::to_string(i));
    logw[i] = std::log(omega.omega[i]) - eta * g[i];
  }
  const double top = *std::max_element(logw.begin(), logw.end());
  double total = 0.0;
  for (double& v : logw) {
    v = std::exp(std::max(v - top, -700.0));
    total += v;
  }
  for (double& v : logw) v /= total;
  return {logw};
}

namespace {

void check_peers(std::span<const Tensor> logits, std::span<const std::int32_t> labels) {
  if (logits.empty()) throw ConfigError("at least one peer is required");
  for (const auto& z : logits) {
    if (z.shape() != logits.front().shape())
      throw DimensionError("peer logits differ in shape: " + shape_string(z.shape()) + " vs " +
                           shape_string(logits.front().shape()));
  }
  if (logits.front().rank() != 2 || logits.front().dim(0) != labels.size())
    throw DimensionError("logits " + shape_string(logits.front().shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
}

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
}

Tensor supervised_term(const Tensor& z, std::span<const std::int32_t> labels,
                       const LossOptions& options, double* ce_value) {
  Tensor ce = cross_entropy(z, labels);
  if (ce_value) *ce_value = ce.item();
  if (!options.teacher_logits.defined()) return ce;
  const double at = options.teacher_alpha;
  Tensor kd = kl_divergence(z, options.teacher_logits,
                            {.detach_target = true, .temperature = options.kl_temperature});
  return add(scale(ce, 1.0 - at), scale(kd, at));
}

Tensor accumulate(const Tensor& acc, const Tensor& term) {
  return acc.defined() ? add(acc, term) : term;
}

}  // namespace

CombinedLoss combined_loss_terms(std::span<const Tensor> logits,
                                 std::span<const std::int32_t> labels, const Tensor& omega,
                                 double alpha, const LossOptions& options) {
  check_peers(logits, labels);
  check_alpha(alpha);
  const std::size_t m = logits.size();
  if (omega.size() != m)
    throw DimensionError("omega has " + std::to_string(omega.size()) + " entries for " +
                         std::to_string(m) + " peers");
  const KlOptions kl_opts{.detach_target = options.detach_kl_target,
                          .temperature = options.kl_temperature};
  CombinedLoss out;
  out.peers.resize(m);
  Tensor sup_sum, kl_sum;
  const Tensor one = Tensor::scalar(1.0);
  for (std::size_t i = 0; i < m; ++i) {
    const Tensor wi = select(omega, i);
    Tensor sup = supervised_term(logits[i], labels, options, &out.peers[i].ce);
    const double sup_value = sup.item();
    sup_sum = accumulate(sup_sum, mul(sup, wi));
    Tensor kl_i;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      Tensor wij = select(omega, j);
      if (options.renormalize_kl_weights) wij = div(wij, sub(one, wi));
      kl_i = accumulate(kl_i, mul(kl_divergence(logits[i], logits[j], kl_opts), wij));
    }
    out.peers[i].kl = kl_i.defined() ? kl_i.item() : 0.0;
    out.peers[i].total = (1.0 - alpha) * omega[i] * sup_value + alpha * out.peers[i].kl;
    if (kl_i.defined()) kl_sum = accumulate(kl_sum, kl_i);
  }
  out.value = scale(sup_sum, 1.0 - alpha);
  if (kl_sum.defined()) out.value = add(out.value, scale(kl_sum, alpha));
  return out;
}

Tensor combined_loss(std::span<const Tensor> logits, std::span<const std::int32_t> labels,
                     const Tensor& omega, double alpha, const LossOptions& options) {
  return combined_loss_terms(logits, labels, omega, alpha, options).value;
}

Tensor combined_loss(std::span<const Tensor> logits, std::span<const std::int32_t> labels,
                     const PeerWeights& omega, double alpha, const LossOptions& options) {
  omega.validate();
  return combined_loss(logits, labels, omega.tensor(), alpha, options);
}

Tensor peer_ensemble_loss(std::size_t i, std::span<const Tensor> logits,
                          std::span<const std::int32_t> labels, double alpha,
                          const LossOptions& options) {
  check_peers(logits, labels);
  check_alpha(alpha);
  if (i >= logits.size())
    throw IndexError("peer index " + std::to_string(i) + " out of range for " +
                     std::to_string(logits.size()) + " peers");
  const KlOptions kl_opts{.detach_target = options.detach_kl_target,
                          .temperature = options.kl_temperature};
  Tensor loss = scale(supervised_term(logits[i], labels, options, nullptr), 1.0 - alpha);
  Tensor kl;
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (j != i) kl = accumulate(kl, kl_divergence(logits[j], logits[i], kl_opts));
  return kl.defined() ? add(loss, scale(kl, alpha)) : loss;
}

Tensor outer_loss(std::span<const Tensor> logits, std::span<const std::int32_t> labels,
                  const Tensor& omega) {
  check_peers(logits, labels);
  if (omega.size() != logits.size())
    throw DimensionError("omega has " + std::to_string(omega.size()) + " entries for " +
                         std::to_string(logits.size()) + " peers");
  Tensor mix;
  for (std::size_t i = 0; i < logits.size(); ++i)
    mix = accumulate(mix, mul(softmax(logits[i]), select(omega, i)));
  return nll_of_probs(mix, labels);
}

Tensor outer_loss(std::span<const Tensor> logits, std::span<const std::int32_t> labels,
                  const PeerWeights& omega) {
  omega.validate();
  return outer_loss(logits, labels, omega.tensor());
}

FlatGradient flat_gradient(const std::vector<PeerModel>& peers) {
  FlatGradient out;
  for (std::size_t p = 0; p < peers.size(); ++p) {
    for (const auto& [name, tensor] : peers[p].parameters()) {
      if (!tensor.requires_grad()) continue;
      out.names.push_back("peer" + std::to_string(p) + "." + name);
      out.sizes.push_back(tensor.size());
      if (tensor.has_grad()) {
        out.values.insert(out.values.end(), tensor.grad().begin(), tensor.grad().end());
      } else {
        out.values.resize(out.values.size() + tensor.size(), 0.0);
      }
    }
  }
  return out;
}

double inner_product(const FlatGradient& a, const FlatGradient& b) {
  if (a.names != b.names || a.sizes != b.sizes || a.values.size() != b.values.size())
    throw ContractError("gradient enumerations differ between the two hypergradient terms");
  double s = 0.0;
  for (std::size_t k = 0; k < a.values.size(); ++k) s += a.values[k] * b.values[k];
  return s;
}

Hypergradient hypergradients(std::vector<PeerModel>& peers, const PeerWeights& omega,
                             const Batch& train_batch, const Batch& val_batch, double alpha,
                             const HypergradientOptions& options, const PeerModel* teacher) {
  const std::size_t m = peers.size();
  omega.validate();
  if (omega.size() != m) throw DimensionError("omega does not match the number of peers");
  auto zero_all = [&] {
    for (auto& p : peers) p.zero_grad();
  };

  Hypergradient out;
  Tensor w = omega.tensor(true);
  FlatGradient g2;
  zero_all();
  {
    Tape tape;
    std::vector<Tensor> logits;
    for (auto& p : peers) logits.push_back(flatten_logits(p.forward(val_batch)));
    Tensor l2 = outer_loss(logits, val_batch.labels, w);
    out.outer_loss = l2.item();
    tape.backward(l2);
  }
  out.direct.assign(w.grad().begin(), w.grad().end());
  out.inner.assign(m, 0.0);

  if (!options.freeze_theta_gradients && options.gamma != 0.0) {
    g2 = flat_gradient(peers);
    zero_all();
    LossOptions loss = options.loss;
    if (teacher) loss.teacher_logits = detail::frozen_logits(*teacher, train_batch);
    Tape tape;
    std::vector<Tensor> logits;
    for (auto& p : peers) logits.push_back(flatten_logits(p.forward(train_batch)));
    std::vector<Tensor> la;
    for (std::size_t i = 0; i < m; ++i)
      la.push_back(peer_ensemble_loss(i, logits, train_batch.labels, alpha, loss));
    for (std::size_t i = 0; i < m; ++i) {
      zero_all();
      tape.backward(la[i]);
      out.inner[i] = inner_product(g2, flat_gradient(peers));
    }
  }
  zero_all();
  out.g.resize(m);
  for (std::size_t i = 0; i < m; ++i) out.g[i] = out.direct[i] - options.gamma * out.inner[i];
  return out;
}

double hypergradient(std::size_t i, std::vector<PeerModel>& peers, const PeerWeights& omega,
                     const Batch& train_batch, const Batch& val_batch, double alpha,
                     const HypergradientOptions& options, const PeerModel* teacher) {
  if (i >= peers.size()) throw IndexError("peer index out of range");
  return hypergradients(peers, omega, train_batch, val_batch, alpha, options, teacher).g[i];
}

void TrainerConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
  require(!gamma || (*gamma >= 0.0 && std::isfinite(*gamma)), "gamma must be finite and >= 0");
  require(eta0 > 0.0 && std::isfinite(eta0), "eta0 must be positive");
  require(eta_final > 0.0 && std::isfinite(eta_final), "eta_final must be positive");
  require(inner_steps >= 1, "inner_steps must be at least 1");
  require(outer_rounds >= 1, "outer_rounds must be at least 1");
  require(lr_init > 0.0 && std::isfinite(lr_init), "lr_init must be positive");
  require(lr_final >= 0.0 && std::isfinite(lr_final), "lr_final must be >= 0");
  require(warmup_ratio >= 0.0 && warmup_ratio < 1.0, "warmup_ratio must lie in [0, 1)");
  require(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0, "beta1 must lie in [0, 1)");
  require(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0, "beta2 must lie in [0, 1)");
  require(adamw.eps > 0.0, "eps must be positive");
  require(adamw.weight_decay >= 0.0, "weight_decay must be >= 0");
  require(batch_size >= 1 && val_batch_size >= 1, "batch sizes must be positive");
  require(kl_temperature > 0.0, "kl_temperature must be positive");
  require(teacher_alpha >= 0.0 && teacher_alpha <= 1.0, "teacher_alpha must lie in [0, 1]");
}

std::size_t TrainerConfig::warmup_steps() const {
  return static_cast<std::size_t>(std::llround(warmup_ratio * static_cast<double>(total_steps())));
}

double TrainerConfig::lr_at(std::size_t step) const {
  return cosine_lr(step, total_steps(), warmup_steps(), lr_init, lr_final);
}

double TrainerConfig::eta_at(std::size_t round) const {
  if (eta_anneal == EtaAnneal::Constant || outer_rounds == 1) return eta0;
  const double p = static_cast<double>(round - 1) / static_cast<double>(outer_rounds - 1);
  return eta_final + 0.5 * (eta0 - eta_final) * (1.0 + std::cos(std::numbers::pi * p));
}

LossOptions TrainerConfig::loss_options() const {
  LossOptions o;
  o.renormalize_kl_weights = renormalize_kl_weights;
  o.detach_kl_target = detach_kl_target;
  o.kl_temperature = kl_temperature;
  o.teacher_alpha = teacher_alpha;
  return o;
}

nlohmann::json to_json(const TrainerConfig& c) {
  return {{"alpha", c.alpha},
          {"gamma", c.gamma ? nlohmann::json(*c.gamma) : nlohmann::json(nullptr)},
          {"eta0", c.eta0},
          {"eta_final", c.eta_final},
          {"eta_anneal", c.eta_anneal == EtaAnneal::Cosine ? "cosine" : "constant"},
          {"inner_steps", c.inner_steps},
          {"outer_rounds", c.outer_rounds},
          {"lr_init", c.lr_init},
          {"lr_final", c.lr_final},
          {"warmup_ratio", c.warmup_ratio},
          {"adamw",
           {{"beta1", c.adamw.beta1},
            {"beta2", c.adamw.beta2},
            {"eps", c.adamw.eps},
            {"weight_decay", c.adamw.weight_decay},
            {"grad_clip", c.adamw.grad_clip}}},
          {"batch_size", c.batch_size},
          {"val_batch_size", c.val_batch_size},
          {"seed", c.seed},
          {"renormalize_kl_weights", c.renormalize_kl_weights},
          {"detach_kl_target", c.detach_kl_target},
          {"freeze_weights", c.freeze_weights},
          {"kl_temperature", c.kl_temperature},
          {"teacher_alpha", c.teacher_alpha}};
}

TrainerConfig trainer_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("trainer config must be an object");
  TrainerConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "gamma") c.gamma = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      else if (key == "eta0") c.eta0 = v.get<double>();
      else if (key == "eta_final") c.eta_final = v.get<double>();
      else if (key == "eta_anneal") {
        const auto s = v.get<std::string>();
        if (s == "cosine") c.eta_anneal = EtaAnneal::Cosine;
        else if (s == "constant") c.eta_anneal = EtaAnneal::Constant;
        else throw ConfigError("eta_anneal must be 'cosine' or 'constant'");
      } else if (key == "inner_steps") c.inner_steps = v.get<std::size_t>();
      else if (key == "outer_rounds") c.outer_rounds = v.get<std::size_t>();
      else if (key == "lr_init") c.lr_init = v.get<double>();
      else if (key == "lr_final") c.lr_final = v.get<double>();
      else if (key == "warmup_ratio") c.warmup_ratio = v.get<double>();
      else if (key == "adamw") {
        for (const auto& [ak, av] : v.items()) {
          if (ak == "beta1") c.adamw.beta1 = av.get<double>();
          else if (ak == "beta2") c.adamw.beta2 = av.get<double>();
          else if (ak == "eps") c.adamw.eps = av.get<double>();
          else if (ak == "weight_decay") c.adamw.weight_decay = av.get<double>();
          else if (ak == "grad_clip") c.adamw.grad_clip = av.get<double>();
          else throw ConfigError("unknown adamw field '" + ak + "'");
        }
      } else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "val_batch_size") c.val_batch_size = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "renormalize_kl_weights") c.renormalize_kl_weights = v.get<bool>();
      else if (key == "detach_kl_target") c.detach_kl_target = v.get<bool>();
      else if (key == "freeze_weights") c.freeze_weights = v.get<bool>();
      else if (key == "kl_temperature") c.kl_temperature = v.get<double>();
      else if (key == "teacher_alpha") c.teacher_alpha = v.get<double>();
      else throw ConfigError("unknown trainer field '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("trainer config: ") + e.what());
  }
  c.validate();
  return c;
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows,
                       const std::string& method) {
  if (!method.empty()) out << "method,";
  out << "round,inner_step,peer,loss_ce,loss_kl,loss_total,lr,val_acc\n";
  for (const auto& r : rows) {
    if (!method.empty()) out << method << ',';
    out << r.round << ',' << r.inner_step << ',' << r.peer << ',' << format_double(r.loss_ce)
        << ',' << format_double(r.loss_kl) << ',' << format_double(r.loss_total) << ','
        << format_double(r.lr) << ',' << format_double(r.val_acc) << '\n';
  }
}

void write_weights_csv(std::ostream& out, const std::vector<WeightsRow>& rows,
                       const std::string& method) {
  if (!method.empty()) out << "method,";
  out << "round,peer,omega,hypergradient,eta\n";
  for (const auto& r : rows) {
    if (!method.empty()) out << method << ',';
    out << r.round << ',' << r.peer << ',' << format_double(r.omega) << ','
        << format_double(r.hypergradient) << ',' << format_double(r.eta) << '\n';
  }
}

double evaluate_accuracy(const PeerModel& model, const Dataset& data, Split split,
                         std::size_t chunk_rows) {
  const auto& idx = data.split(split);
  if (idx.empty()) throw DataError("cannot evaluate on an empty split");
  chunk_rows = std::max<std::size_t>(chunk_rows, 1);
  double hits = 0.0, total = 0.0;
  for (std::size_t start = 0; start < idx.size(); start += chunk_rows) {
    const std::size_t n = std::min(chunk_rows, idx.size() - start);
    Batch b = data.gather(std::span<const std::size_t>(idx).subspan(start, n));
    const double labels = static_cast<double>(b.labels.size());
    hits += accuracy(detail::frozen_logits(model, b), b.labels) * labels;
    total += labels;
  }
  return hits / total;
}

TrainResult train_dwml(std::vector<PeerModel> peers, const Dataset& data,
                       const TrainerConfig& config, const PeerModel* teacher) {
  config.validate();
  if (peers.empty()) throw ConfigError("at least one peer is required");
  const std::size_t m = peers.size();
  TrainResult result;
  PeerWeights omega = PeerWeights::uniform(m);
  for (std::size_t i = 0; i < m; ++i) result.trace.weights.push_back({0, i, omega.omega[i], 0.0, 0.0});

  LossOptions loss = config.loss_options();
  BatchStream val_stream(data, Split::Validation, config.val_batch_size,
                         detail::validation_stream_seed(config.seed));

  detail::LoopSpec spec;
  spec.objective = [&](const std::vector<Tensor>& logits, const Batch& batch,
                       const detail::StepContext&, std::optional<std::size_t>) {
    LossOptions step_loss = loss;
    if (teacher) step_loss.teacher_logits = detail::frozen_logits(*teacher, batch);
    CombinedLoss c = combined_loss_terms(logits, batch.labels, omega.tensor(), config.alpha, step_loss);
    return detail::StepOutput{c.value, c.peers};
  };
  spec.after_round = [&](std::size_t round, const Batch& last_batch, double last_lr) {
    std::vector<double> g(m, 0.0);
    double eta = 0.0;
    if (!config.freeze_weights && m > 1) {
      const Batch val = val_stream.next();
      HypergradientOptions ho{.gamma = config.gamma.value_or(last_lr), .loss = loss};
      g = hypergradients(peers, omega, last_batch, val, config.alpha, ho, teacher).g;
      eta = config.eta_at(round);
      try {
        omega = mirror_descent_update(omega, g, eta);
        omega.validate();
      } catch (const NumericError& e) {
        throw TrainingDiverged(std::string(e.what()) + " at round " + std::to_string(round),
                               result.trace);
      }
    }
    for (std::size_t i = 0; i < m; ++i)
      result.trace.weights.push_back({round, i, omega.omega[i], g[i], eta});
  };
  detail::run_rounds(peers, data, config, spec, result.trace);
  result.peers = std::move(peers);
  result.weights = omega;
  return result;
}

}  // namespace peerdistill
