#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "peerdistill/ops.hpp"
#include "peerdistill/wml.hpp"
#include "support/hypergradient_oracle.hpp"

using namespace peerdistill;
using peerdistill::testing::compare_with_unrolled_oracle;

namespace {

Tensor random_logits(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                     bool requires_grad = false) {
  std::normal_distribution<double> n(0.0, 1.5);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = n(rng);
  return Tensor::from({rows, cols}, v, requires_grad);
}

PeerWeights random_simplex(std::size_t m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::vector<double> w(m);
  for (auto& x : w) x = u(rng);
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= s;
  return {w};
}

const double kKl10 = 0.46211715726000974;  // KL(softmax[1,0] || softmax[0,1]) = tanh(1/2)

}  // namespace

TEST_CASE("mirror descent") {
  PeerWeights w{{0.2, 0.3, 0.5}};
  std::vector<double> zeros(3, 0.0);
  auto same = mirror_descent_update(w, zeros, 1.0);
  for (int i = 0; i < 3; ++i) CHECK(same.omega[i] == doctest::Approx(w.omega[i]).epsilon(1e-15));

  auto closed = mirror_descent_update(PeerWeights{{0.5, 0.5}}, std::vector<double>{std::log(2.0), 0.0}, 1.0);
  CHECK(std::abs(closed.omega[0] - 1.0 / 3.0) <= 1e-12);
  CHECK(std::abs(closed.omega[1] - 2.0 / 3.0) <= 1e-12);

  SUBCASE("simplex fuzz") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> g(-10, 10), eta(1e-9, 2.0);
    std::uniform_int_distribution<int> msize(1, 8);
    PeerWeights cur = PeerWeights::uniform(5);
    for (int round = 0; round < 500; ++round) {
      std::vector<double> grad(cur.size());
      for (auto& x : grad) x = g(rng);
      cur = mirror_descent_update(cur, grad, eta(rng));
      double s = 0.0;
      for (double x : cur.omega) {
        CHECK(x > 0.0);
        s += x;
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }

  SUBCASE("shift invariance") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      PeerWeights p = random_simplex(4, rng);
      std::vector<double> g{0.3, -1.2, 2.0, 0.7}, shifted = g;
      for (auto& x : shifted) x += 13.7;
      auto a = mirror_descent_update(p, g, 0.8), b = mirror_descent_update(p, shifted, 0.8);
      for (int i = 0; i < 4; ++i) CHECK(std::abs(a.omega[i] - b.omega[i]) <= 1e-12);
    }
  }

  SUBCASE("step size limits") {
    std::vector<double> g{0.5, -0.25, 1.0};
    auto tiny = mirror_descent_update(w, g, 1e-14);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(tiny.omega[i] - w.omega[i]) <= 1e-13);
    double prev = w.omega[1];
    PeerWeights cur = w;
    for (int k = 0; k < 40; ++k) {
      cur = mirror_descent_update(cur, g, 5.0);
      CHECK(cur.omega[1] >= prev);
      prev = cur.omega[1];
    }
    CHECK(cur.omega[1] == doctest::Approx(1.0).epsilon(1e-12));
  }

  CHECK_THROWS_AS(mirror_descent_update(w, std::vector<double>{1.0}, 1.0), DimensionError);
  CHECK_THROWS_AS(mirror_descent_update(PeerWeights{{0.7, 0.7}}, std::vector<double>{0, 0}, 1.0),
                  ContractError);
  CHECK_THROWS_AS(mirror_descent_update(w, std::vector<double>{NAN, 0, 0}, 1.0), NumericError);
}

TEST_CASE("combined loss") {
  const std::vector<std::int32_t> label0{0};
  {
    std::vector<Tensor> z{Tensor::from({1, 2}, {0, 0}), Tensor::from({1, 2}, {0, 0})};
    CHECK(combined_loss(z, label0, PeerWeights::uniform(2), 0.0).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }
  {
    std::vector<Tensor> z{Tensor::from({1, 3}, {1, 2, 3}), Tensor::from({1, 3}, {1, 2, 3}),
                          Tensor::from({1, 3}, {1, 2, 3})};
    CHECK(combined_loss(z, label0, PeerWeights::uniform(3), 1.0).item() == 0.0);
  }
  {
    std::vector<Tensor> z{Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {0, 1})};
    CHECK(combined_loss(z, label0, PeerWeights::uniform(2), 1.0).item() ==
          doctest::Approx(kKl10).epsilon(1e-14));
    CHECK(std::abs(combined_loss(z, label0, PeerWeights::uniform(2), 1.0).item() - 0.46212) < 5e-6);
  }
  {
    std::vector<Tensor> one{Tensor::from({1, 2}, {0.3, -0.2})};
    CHECK(combined_loss(one, label0, PeerWeights::uniform(1), 0.7).item() ==
          doctest::Approx(0.3 * cross_entropy(one[0], label0).item()).epsilon(1e-15));
    CHECK_THROWS_AS(combined_loss(std::vector<Tensor>{}, label0, PeerWeights::uniform(1), 0.5),
                    ConfigError);
  }

  std::mt19937_64 rng(3);
  std::vector<std::int32_t> labels{0, 2, 1, 3, 2, 0, 1};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> z;
    for (int i = 0; i < 3; ++i) z.push_back(random_logits(7, 4, rng));
    PeerWeights w = random_simplex(3, rng);

    double weighted_ce = 0.0;
    for (int i = 0; i < 3; ++i) weighted_ce += w.omega[i] * cross_entropy(z[i], labels).item();
    CHECK(std::abs(combined_loss(z, labels, w, 0.0).item() - weighted_ce) <= 1e-12);

    // Per-peer terms sum to the joint value.
    auto terms = combined_loss_terms(z, labels, w.tensor(), 0.4);
    double total = 0.0;
    for (const auto& t : terms.peers) total += t.total;
    CHECK(total == doctest::Approx(terms.value.item()).epsilon(1e-13));

    // Uniform weights: M times the mean per-peer mutual-learning loss
    // (1/M)[(1 - alpha) CE_i + alpha sum_{j != i} KL(z_i || z_j)].
    const double alpha = 0.6;
    double per_peer_sum = 0.0;
    for (int i = 0; i < 3; ++i) {
      double kl = 0.0;
      for (int j = 0; j < 3; ++j)
        if (j != i) kl += kl_divergence(z[i], z[j]).item();
      per_peer_sum += ((1 - alpha) * cross_entropy(z[i], labels).item() + alpha * kl) / 3.0;
    }
    CHECK(combined_loss(z, labels, PeerWeights::uniform(3), alpha).item() ==
          doctest::Approx(3.0 * (per_peer_sum / 3.0)).epsilon(1e-13));

    // The ensemble loss of peer i is the partial derivative in omega_i.
    Tensor wt = w.tensor(true);
    {
      Tape tape;
      tape.backward(combined_loss(z, labels, wt, alpha));
    }
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(std::abs(wt.grad()[i] - peer_ensemble_loss(i, z, labels, alpha).item()) <= 1e-12);
  }
}

TEST_CASE("combined loss gradients") {
  std::mt19937_64 rng(4);
  std::vector<std::int32_t> labels{0, 2, 1, 2, 1};
  for (int trial = 0; trial < 10; ++trial) {
    CAPTURE(trial);
    std::vector<Tensor> inputs;
    for (int i = 0; i < 3; ++i) inputs.push_back(random_logits(5, 3, rng, true));
    inputs.push_back(random_simplex(3, rng).tensor(true));
    for (bool renorm : {false, true}) {
      for (bool detach : {false, true}) {
        LossOptions opt{.renormalize_kl_weights = renorm, .detach_kl_target = detach};
        auto loss = [&](const std::vector<Tensor>& in) {
          std::vector<Tensor> z(in.begin(), in.begin() + 3);
          return combined_loss(z, labels, in[3], 0.35, opt);
        };
        if (detach) {
          // The finite difference sees through a detached target; check omega only.
          std::vector<Tensor> in{inputs[0].detach(), inputs[1].detach(), inputs[2].detach(),
                                 inputs[3]};
          CHECK(finite_diff_check(loss, in, 1e-6) < 1e-4);
        } else {
          CHECK(finite_diff_check(loss, inputs, 1e-6) < 1e-4);
        }
      }
    }
    auto outer = [&](const std::vector<Tensor>& in) {
      std::vector<Tensor> z(in.begin(), in.begin() + 3);
      return outer_loss(z, labels, in[3]);
    };
    CHECK(finite_diff_check(outer, inputs, 1e-6) < 1e-4);
    for (std::size_t i = 0; i < 3; ++i) {
      auto la = [&](const std::vector<Tensor>& in) {
        std::vector<Tensor> z(in.begin(), in.begin() + 3);
        return peer_ensemble_loss(i, z, labels, 0.35);
      };
      CHECK(finite_diff_check(la, {inputs[0], inputs[1], inputs[2]}, 1e-6) < 1e-4);
    }
  }
}

TEST_CASE("peer ensemble loss") {
  std::vector<std::int32_t> label0{0};
  std::vector<Tensor> z{Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {0, 1})};
  CHECK(peer_ensemble_loss(0, z, label0, 1.0).item() == doctest::Approx(kKl10).epsilon(1e-14));
  CHECK(peer_ensemble_loss(1, z, label0, 0.0).item() ==
        doctest::Approx(cross_entropy(z[1], label0).item()).epsilon(1e-15));
  std::vector<Tensor> same{z[0], z[0], z[0]};
  CHECK(peer_ensemble_loss(2, same, label0, 1.0).item() == 0.0);
  CHECK_THROWS_AS(peer_ensemble_loss(2, z, label0, 0.5), IndexError);
}

TEST_CASE("outer loss") {
  std::vector<std::int32_t> label0{0};
  std::vector<Tensor> z{Tensor::from({1, 2}, {std::log(0.9), std::log(0.1)}),
                        Tensor::from({1, 2}, {0, 0})};
  CHECK(outer_loss(z, label0, PeerWeights::uniform(2)).item() ==
        doctest::Approx(-std::log(0.7)).epsilon(1e-14));
  std::vector<Tensor> one{Tensor::from({2, 3}, {0.1, 0.2, 0.3, 1, -1, 0})};
  std::vector<std::int32_t> two{2, 0};
  CHECK(outer_loss(one, two, PeerWeights::uniform(1)).item() ==
        doctest::Approx(cross_entropy(one[0], two).item()).epsilon(1e-14));
  // Identical peers: the loss does not depend on omega.
  std::vector<Tensor> twins{z[0], z[0]};
  CHECK(outer_loss(twins, label0, PeerWeights{{0.2, 0.8}}).item() ==
        doctest::Approx(outer_loss(twins, label0, PeerWeights{{0.7, 0.3}}).item()).epsilon(1e-15));
}

namespace {

struct Toy {
  Dataset data;
  std::vector<PeerModel> peers;
  Batch train, val;
};

Toy make_toy(std::uint64_t seed) {
  Toy t;
  t.data = make_synthetic(3, 4, 20, 0.6, seed);
  t.peers.push_back(build(mlp_config(4, 3, 8), seed * 2 + 1));
  t.peers.push_back(build(mlp_config(4, 3, 5), seed * 2 + 2));
  // Spread the initial predictions so the parameter-coupling term matters.
  for (auto& p : t.peers)
    for (auto& [name, tensor] : p.parameters())
      for (double& v : tensor.mutable_values()) v *= 40.0;
  BatchStream tr(t.data, Split::Train, 16, seed), va(t.data, Split::Validation, 6, seed);
  t.train = tr.next();
  t.val = va.next();
  return t;
}

}  // namespace

TEST_CASE("hypergradient") {
  SUBCASE("frozen parameter gradients and gamma = 0 leave the direct term") {
    Toy t = make_toy(1);
    PeerWeights w{{0.4, 0.6}};
    auto frozen = hypergradients(t.peers, w, t.train, t.val, 0.5,
                                 {.gamma = 0.3, .freeze_theta_gradients = true});
    auto zero = hypergradients(t.peers, w, t.train, t.val, 0.5, {.gamma = 0.0});
    Tensor wt = w.tensor(true);
    {
      Tape tape;
      auto logits = peerdistill::testing::eval_logits(t.peers, t.val);
      tape.backward(outer_loss(logits, t.val.labels, wt));
    }
    for (int i = 0; i < 2; ++i) {
      CHECK(frozen.g[i] == frozen.direct[i]);
      CHECK(std::abs(zero.g[i] - wt.grad()[i]) <= 1e-10);
      CHECK(hypergradient(i, t.peers, w, t.train, t.val, 0.5, {.gamma = 0.0}) == zero.g[i]);
    }
    for (const auto& p : t.peers)
      for (const auto& [name, tensor] : p.parameters())
        for (double g : tensor.grad()) CHECK(g == 0.0);
  }

  SUBCASE("matches the one-step-unrolled finite difference") {
    int pass = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Toy t = make_toy(seed);
      auto cmp = compare_with_unrolled_oracle(t.peers, PeerWeights{{0.45, 0.55}}, t.train,
                                              t.val, 0.5, 0.05, {});
      // The coupling term on its own, (fd - direct) against -gamma <., .>, at a
      // step small enough for the O(gamma^2) remainder to be negligible.
      auto fine = compare_with_unrolled_oracle(t.peers, PeerWeights{{0.45, 0.55}}, t.train,
                                               t.val, 0.5, 2e-3, {});
      double coupling_err = 0.0;
      for (int i = 0; i < 2; ++i) {
        const double ref = fine.reference[i] - fine.direct[i];
        const double got = fine.analytic[i] - fine.direct[i];
        coupling_err = std::max(coupling_err, std::abs(got - ref) / std::abs(ref));
      }
      MESSAGE("seed " << seed << " rel err " << cmp.max_relative_error << " coupling rel err "
                      << coupling_err << " g0 " << cmp.analytic[0] << " direct0 "
                      << cmp.direct[0]);
      pass += cmp.max_relative_error < 5e-2 && coupling_err < 5e-2;
    }
    CHECK(pass >= 9);
  }

  SUBCASE("with a teacher term") {
    Toy t = make_toy(3);
    PeerModel teacher = build(mlp_config(4, 3, 12), 99);
    LossOptions loss{.teacher_logits = peerdistill::testing::eval_logits({teacher}, t.train)[0].detach(),
                     .teacher_alpha = 0.4};
    auto cmp = compare_with_unrolled_oracle(t.peers, PeerWeights{{0.5, 0.5}}, t.train, t.val,
                                            0.5, 0.05, loss);
    CHECK(cmp.max_relative_error < 5e-2);
    auto via_pointer = hypergradients(t.peers, PeerWeights{{0.5, 0.5}}, t.train, t.val, 0.5,
                                      {.gamma = 0.05, .loss = {.teacher_alpha = 0.4}}, &teacher);
    auto via_logits = hypergradients(t.peers, PeerWeights{{0.5, 0.5}}, t.train, t.val, 0.5,
                                     {.gamma = 0.05, .loss = loss});
    CHECK(via_pointer.g == via_logits.g);
  }

  SUBCASE("mismatched gradient enumerations") {
    Toy t = make_toy(1);
    FlatGradient a = flat_gradient(t.peers);
    std::vector<PeerModel> fewer{t.peers[0].clone()};
    CHECK_THROWS_AS(inner_product(a, flat_gradient(fewer)), ContractError);
  }
}

TEST_CASE("trainer config") {
  TrainerConfig c;
  c.gamma = 0.25;
  c.eta_anneal = EtaAnneal::Constant;
  c.seed = 17;
  CHECK(to_json(trainer_config_from_json(to_json(c))) == to_json(c));
  CHECK_FALSE(trainer_config_from_json(nlohmann::json::object()).gamma.has_value());
  CHECK_THROWS_AS(trainer_config_from_json({{"alpah", 0.5}}), ConfigError);
  CHECK_THROWS_AS(trainer_config_from_json({{"alpha", 1.5}}), ConfigError);
  CHECK_THROWS_AS(trainer_config_from_json({{"alpha", "x"}}), ConfigError);
  CHECK_THROWS_AS(trainer_config_from_json({{"inner_steps", 0}}), ConfigError);

  TrainerConfig e;
  e.outer_rounds = 11;
  CHECK(e.eta_at(1) == doctest::Approx(0.5));
  CHECK(e.eta_at(6) == doctest::Approx(0.275));
  CHECK(e.eta_at(11) == doctest::Approx(0.05));
  e.outer_rounds = 1;
  CHECK(e.eta_at(1) == 0.5);
  // 0.03% of a desk-scale budget rounds to no warmup.
  CHECK(TrainerConfig{}.warmup_steps() == 0);
  TrainerConfig big;
  big.inner_steps = 10000;
  big.outer_rounds = 1;
  CHECK(big.warmup_steps() == 3);
}

namespace {

TrainerConfig small_config() {
  TrainerConfig c;
  c.inner_steps = 3;
  c.outer_rounds = 4;
  c.batch_size = 16;
  c.val_batch_size = 16;
  c.lr_init = 1e-2;
  c.lr_final = 1e-3;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("train_dwml") {
  Dataset data = make_synthetic(4, 6, 40, 0.5, 2);

  SUBCASE("a single peer keeps weight 1") {
    auto r = train_dwml({build(mlp_config(6, 4, 8), 1)}, data, small_config());
    for (const auto& row : r.trace.weights) CHECK(row.omega == 1.0);
    CHECK(r.trace.metrics.size() == 3 * 4);
    CHECK(r.trace.weights.size() == 5);
  }

  SUBCASE("identical peers keep uniform weights") {
    PeerModel base = build(mlp_config(6, 4, 8), 3);
    std::vector<PeerModel> peers;
    for (int i = 0; i < 4; ++i) peers.push_back(base.clone());
    TrainerConfig c = small_config();
    c.outer_rounds = 10;
    auto r = train_dwml(std::move(peers), data, c);
    for (const auto& row : r.trace.weights) CHECK(std::abs(row.omega - 0.25) <= 1e-6);
  }

  SUBCASE("weights stay on the simplex every round and runs are deterministic") {
    auto make = [] {
      std::vector<PeerModel> peers;
      for (int i = 0; i < 3; ++i) peers.push_back(build(mlp_config(6, 4, 4 + 4 * i), 10 + i));
      return peers;
    };
    auto a = train_dwml(make(), data, small_config());
    auto b = train_dwml(make(), data, small_config());
    std::ostringstream ma, mb, wa, wb;
    write_metrics_csv(ma, a.trace.metrics);
    write_metrics_csv(mb, b.trace.metrics);
    write_weights_csv(wa, a.trace.weights);
    write_weights_csv(wb, b.trace.weights);
    CHECK(ma.str() == mb.str());
    CHECK(wa.str() == wb.str());
    for (std::size_t round = 0; round <= 4; ++round) {
      double s = 0.0;
      for (const auto& row : a.trace.weights)
        if (row.round == round) s += row.omega;
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    CHECK(ma.str().rfind("round,inner_step,peer,loss_ce,loss_kl,loss_total,lr,val_acc\n", 0) == 0);
    for (const auto& row : a.trace.metrics) {
      CHECK(std::isfinite(row.val_acc));
      CHECK(row.lr > 0.0);
    }
    CHECK(a.trace.weights.back().eta == doctest::Approx(0.05));
  }

  SUBCASE("frozen weights disable the outer loop") {
    TrainerConfig c = small_config();
    c.freeze_weights = true;
    auto r = train_dwml({build(mlp_config(6, 4, 8), 1), build(mlp_config(6, 4, 4), 2)}, data, c);
    for (const auto& row : r.trace.weights) {
      CHECK(row.omega == 0.5);
      CHECK(row.hypergradient == 0.0);
    }
  }

  SUBCASE("divergence keeps the partial trace") {
    Dataset bad = data;
    for (std::size_t k = 0; k < 6; ++k) bad.features[bad.train[0] * 6 + k] = INFINITY;
    TrainerConfig c = small_config();
    c.batch_size = 200;
    try {
      train_dwml({build(mlp_config(6, 4, 8), 1)}, bad, c);
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK(std::string(e.what()).find("round 1") != std::string::npos);
      CHECK(e.trace.weights.size() == 1);
    }
  }
}
