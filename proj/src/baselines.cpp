#include "peerdistill/baselines.hpp"

#include <memory>

#include "peerdistill/ops.hpp"
#include "training_loop.hpp"

namespace peerdistill {

namespace {

constexpr std::pair<Method, std::string_view> kMethodNames[] = {
    {Method::Independent, "independent"}, {Method::Kd, "kd"},     {Method::Dml, "dml"},
    {Method::Sd, "sd"},                   {Method::Dwml, "dwml"}, {Method::KdDwml, "kd_dwml"},
};

void check_not_empty(const std::vector<PeerModel>& peers) {
  if (peers.empty()) throw ConfigError("at least one peer is required");
}

void check_teacher(const PeerModel& teacher, const std::vector<PeerModel>& students) {
  for (const auto& s : students) {
    const auto& a = s.config();
    const auto& b = teacher.config();
    const auto classes_a = a.kind == ModelKind::Mlp ? a.num_classes : a.vocab_size;
    const auto classes_b = b.kind == ModelKind::Mlp ? b.num_classes : b.vocab_size;
    if (a.kind != b.kind || classes_a != classes_b)
      throw ConfigError("teacher and student output spaces differ");
  }
}

TrainResult finish(std::vector<PeerModel> peers, TrainingTrace trace) {
  TrainResult r;
  r.weights = PeerWeights::uniform(peers.size());
  r.peers = std::move(peers);
  r.trace = std::move(trace);
  return r;
}

detail::StepOutput supervised(const std::vector<Tensor>& logits, const Batch& batch) {
  detail::StepOutput out;
  for (const auto& z : logits) {
    Tensor ce = cross_entropy(z, batch.labels);
    out.terms.push_back({ce.item(), 0.0, ce.item()});
    out.loss = out.loss.defined() ? add(out.loss, ce) : ce;
  }
  return out;
}

// (1 - a) CE + a KL(z || target) per peer, targets frozen.
detail::StepOutput distilled(const std::vector<Tensor>& logits, const Batch& batch,
                             const std::vector<Tensor>& targets, double a, double temperature) {
  detail::StepOutput out;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    Tensor ce = cross_entropy(logits[i], batch.labels);
    Tensor kl = kl_divergence(logits[i], targets[i], {.detach_target = true, .temperature = temperature});
    Tensor loss = add(scale(ce, 1.0 - a), scale(kl, a));
    out.terms.push_back({ce.item(), kl.item(), loss.item()});
    out.loss = out.loss.defined() ? add(out.loss, loss) : loss;
  }
  return out;
}

}  // namespace

std::string_view to_string(Method method) {
  for (const auto& [m, name] : kMethodNames)
    if (m == method) return name;
  return "unknown";
}

Method method_from_string(std::string_view name) {
  for (const auto& [m, n] : kMethodNames)
    if (n == name) return m;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

void MethodSpec::validate() const {
  if (needs_teacher() && !teacher_checkpoint)
    throw ConfigError(std::string(to_string(method)) + " requires a teacher checkpoint");
  if (!needs_teacher() && teacher_checkpoint)
    throw ConfigError(std::string(to_string(method)) + " does not take a teacher checkpoint");
  if (!(distill_alpha >= 0.0 && distill_alpha <= 1.0))
    throw ConfigError("distill_alpha must lie in [0, 1]");
}

nlohmann::json to_json(const MethodSpec& spec) {
  nlohmann::json j{{"method", to_string(spec.method)},
                   {"distill_alpha", spec.distill_alpha},
                   {"dml_update", spec.dml_update == DmlUpdate::Simultaneous ? "simultaneous"
                                                                             : "round_robin"}};
  if (spec.teacher_checkpoint) j["teacher_checkpoint"] = *spec.teacher_checkpoint;
  return j;
}

MethodSpec method_spec_from_json(const nlohmann::json& j) {
  MethodSpec spec;
  try {
    if (j.is_string()) {
      spec.method = method_from_string(j.get<std::string>());
    } else if (j.is_object()) {
      for (const auto& [key, v] : j.items()) {
        if (key == "method") spec.method = method_from_string(v.get<std::string>());
        else if (key == "teacher_checkpoint") spec.teacher_checkpoint = v.get<std::string>();
        else if (key == "distill_alpha") spec.distill_alpha = v.get<double>();
        else if (key == "dml_update") {
          const auto s = v.get<std::string>();
          if (s == "simultaneous") spec.dml_update = DmlUpdate::Simultaneous;
          else if (s == "round_robin") spec.dml_update = DmlUpdate::RoundRobin;
          else throw ConfigError("dml_update must be 'simultaneous' or 'round_robin'");
        } else {
          throw ConfigError("unknown method field '" + key + "'");
        }
      }
    } else {
      throw ConfigError("method must be a name or an object");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("method: ") + e.what());
  }
  spec.validate();
  return spec;
}

TrainResult train_independent(std::vector<PeerModel> peers, const Dataset& data,
                              const TrainerConfig& config) {
  config.validate();
  check_not_empty(peers);
  TrainingTrace trace;
  detail::LoopSpec loop;
  loop.objective = [](const std::vector<Tensor>& logits, const Batch& batch,
                      const detail::StepContext&, std::optional<std::size_t>) {
    return supervised(logits, batch);
  };
  detail::run_rounds(peers, data, config, loop, trace);
  return finish(std::move(peers), std::move(trace));
}

TrainResult train_kd(std::vector<PeerModel> students, const PeerModel& teacher,
                     const Dataset& data, const TrainerConfig& config, const MethodSpec& spec) {
  config.validate();
  check_not_empty(students);
  check_teacher(teacher, students);
  const double a = spec.distill_alpha;
  TrainingTrace trace;
  detail::LoopSpec loop;
  loop.objective = [&](const std::vector<Tensor>& logits, const Batch& batch,
                       const detail::StepContext&, std::optional<std::size_t>) {
    const Tensor t = detail::frozen_logits(teacher, batch);
    return distilled(logits, batch, std::vector<Tensor>(logits.size(), t), a,
                     config.kl_temperature);
  };
  detail::run_rounds(students, data, config, loop, trace);
  return finish(std::move(students), std::move(trace));
}

TrainResult train_dml(std::vector<PeerModel> peers, const Dataset& data,
                      const TrainerConfig& config, const MethodSpec& spec) {
  config.validate();
  if (peers.size() < 2) throw ConfigError("dml needs at least two peers");
  const std::size_t m = peers.size();
  const double alpha = config.alpha;
  const double share = 1.0 / static_cast<double>(m);
  const KlOptions kl_opts{.detach_target = true, .temperature = config.kl_temperature};

  auto peer_loss = [&](const std::vector<Tensor>& logits, const Batch& batch, std::size_t i,
                       PeerLossTerms& terms) {
    Tensor ce = cross_entropy(logits[i], batch.labels);
    Tensor kl;
    double kl_value = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      Tensor k = kl_divergence(logits[i], logits[j], kl_opts);
      kl_value += k.item() * share;
      kl = kl.defined() ? add(kl, k) : k;
    }
    terms.ce = ce.item();
    terms.kl = kl_value;
    terms.total = (1.0 - alpha) * share * terms.ce + alpha * terms.kl;
    return scale(add(scale(ce, 1.0 - alpha), scale(kl, alpha)), share);
  };

  TrainingTrace trace;
  detail::LoopSpec loop;
  loop.mode = spec.dml_update == DmlUpdate::RoundRobin ? detail::UpdateMode::RoundRobin
                                                       : detail::UpdateMode::Joint;
  loop.objective = [&](const std::vector<Tensor>& logits, const Batch& batch,
                       const detail::StepContext&, std::optional<std::size_t> only) {
    detail::StepOutput out;
    if (only) {
      out.terms.resize(1);
      out.loss = peer_loss(logits, batch, *only, out.terms[0]);
      return out;
    }
    out.terms.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      Tensor li = peer_loss(logits, batch, i, out.terms[i]);
      out.loss = out.loss.defined() ? add(out.loss, li) : li;
    }
    return out;
  };
  detail::run_rounds(peers, data, config, loop, trace);
  return finish(std::move(peers), std::move(trace));
}

TrainResult train_sd(std::vector<PeerModel> peers, const Dataset& data,
                     const TrainerConfig& config, const MethodSpec& spec) {
  config.validate();
  check_not_empty(peers);
  if (config.total_steps() < 2) throw ConfigError("sd needs a budget of at least 2 steps");
  const std::size_t half = config.total_steps() / 2;
  const double a = spec.distill_alpha;
  std::vector<PeerModel> snapshot;

  TrainingTrace trace;
  detail::LoopSpec loop;
  loop.objective = [&](const std::vector<Tensor>& logits, const Batch& batch,
                       const detail::StepContext& ctx, std::optional<std::size_t>) {
    if (ctx.global_step < half) return supervised(logits, batch);
    if (snapshot.empty()) {
      for (const auto& p : peers) {
        snapshot.push_back(p.clone());
        snapshot.back().set_trainable(false);
      }
    }
    std::vector<Tensor> targets;
    for (const auto& s : snapshot) targets.push_back(detail::frozen_logits(s, batch));
    return distilled(logits, batch, targets, a, config.kl_temperature);
  };
  detail::run_rounds(peers, data, config, loop, trace);
  return finish(std::move(peers), std::move(trace));
}

TrainResult train_kd_dwml(std::vector<PeerModel> peers, const PeerModel& teacher,
                          const Dataset& data, const TrainerConfig& config,
                          const MethodSpec& spec) {
  check_not_empty(peers);
  check_teacher(teacher, peers);
  TrainerConfig c = config;
  c.teacher_alpha = spec.distill_alpha;
  return train_dwml(std::move(peers), data, c, &teacher);
}

TrainResult run_method(const MethodSpec& spec, std::vector<PeerModel> peers,
                       const Dataset& data, const TrainerConfig& config,
                       const PeerModel* teacher) {
  if (spec.needs_teacher() && !teacher)
    throw ConfigError(std::string(to_string(spec.method)) + " requires a teacher");
  switch (spec.method) {
    case Method::Independent: return train_independent(std::move(peers), data, config);
    case Method::Kd: return train_kd(std::move(peers), *teacher, data, config, spec);
    case Method::Dml: return train_dml(std::move(peers), data, config, spec);
    case Method::Sd: return train_sd(std::move(peers), data, config, spec);
    case Method::Dwml: return train_dwml(std::move(peers), data, config);
    case Method::KdDwml: return train_kd_dwml(std::move(peers), *teacher, data, config, spec);
  }
  throw ConfigError("unknown method");
}

}  // namespace peerdistill
