#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "peerdistill/checkpoint.hpp"
#include "peerdistill/error.hpp"
#include "peerdistill/io.hpp"
#include "peerdistill/model.hpp"
#include "peerdistill/ops.hpp"

using namespace peerdistill;

namespace {

PeerConfig tiny_transformer(std::int64_t layers = 2, std::int64_t dim = 8,
                            std::int64_t heads = 2) {
  PeerConfig c;
  c.kind = ModelKind::Transformer;
  c.layers = layers;
  c.heads = heads;
  c.hidden_dim = dim;
  c.ff_dim = 16;
  c.vocab_size = 11;
  c.max_seq_len = 6;
  return c;
}

Batch token_batch(std::size_t rows, std::size_t seq, std::int32_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> tok(0, vocab - 1);
  Batch b;
  b.rows = rows;
  b.width = seq;
  for (std::size_t i = 0; i < rows * seq; ++i) {
    b.tokens.push_back(tok(rng));
    b.labels.push_back(tok(rng));
  }
  return b;
}

double within(std::int64_t count, double target) {
  return std::abs(static_cast<double>(count) - target) / target;
}

}  // namespace

TEST_CASE("count_params reproduces the published model sizes") {
  const auto base = count_params(roberta_config(12, 12, 768));
  MESSAGE("base: " << base);
  CHECK(within(base, 125e6) < 0.03);

  struct Preset {
    std::int64_t layers, heads, dim;
    double size;
  };
  for (Preset p : {Preset{8, 32, 512, 60e6}, Preset{16, 8, 256, 42e6},
                   Preset{32, 4, 128, 34e6}, Preset{8, 8, 256, 28e6}}) {
    const auto n = count_params(roberta_config(p.layers, p.heads, p.dim));
    MESSAGE(p.layers << "L/" << p.dim << "d/" << p.heads << "h: " << n);
    CHECK(within(n, p.size) < 0.03);
  }
}

TEST_CASE("count_params hand-evaluated small cases") {
  // d=8, ff=16, vocab 11, seq 6, 1 layer:
  // embeddings 88 + 48 + 8 + 16 = 160
  // layer 4*(64+8) + 16 + (128+16) + (128+8) + 16 = 600
  // head 72 + 16 + 11 = 99
  CHECK(count_params(tiny_transformer(1)) == 160 + 600 + 99);
  // 32 -> 64 -> 10
  CHECK(count_params(mlp_config(32, 10, 64)) == 32 * 64 + 64 + 64 * 10 + 10);
  CHECK(count_params(mlp_config(4, 3, 5, 2)) == (4 * 5 + 5) + (5 * 5 + 5) + (5 * 3 + 3));
}

TEST_CASE("count_params is monotone in depth") {
  for (std::int64_t layers : {1, 2, 4, 8}) {
    CHECK(count_params(roberta_config(2 * layers, 8, 256)) >
          count_params(roberta_config(layers, 8, 256)));
  }
}

TEST_CASE("built tensors sum to count_params for generated configs") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::int64_t> small(1, 4);
  for (int trial = 0; trial < 40; ++trial) {
    PeerConfig c = tiny_transformer(small(rng), 0, small(rng));
    c.hidden_dim = c.heads * small(rng);
    c.ff_dim = small(rng) * 3;
    c.vocab_size = small(rng) + 5;
    c.max_seq_len = small(rng);
    CHECK(static_cast<std::int64_t>(build(c, 1).parameter_count()) == count_params(c));
    PeerConfig m = mlp_config(small(rng), small(rng) + 1, small(rng) * 4, small(rng));
    CHECK(static_cast<std::int64_t>(build(m, 1).parameter_count()) == count_params(m));
  }
}

TEST_CASE("build") {
  const PeerConfig c = tiny_transformer();
  PeerModel a = build(c, 7), b = build(c, 7), other = build(c, 8);
  bool identical = true, differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto va = a.parameters()[i].tensor.values();
    const auto vb = b.parameters()[i].tensor.values();
    const auto vo = other.parameters()[i].tensor.values();
    identical = identical && std::equal(va.begin(), va.end(), vb.begin());
    differs = differs || !std::equal(va.begin(), va.end(), vo.begin());
  }
  CHECK(identical);
  CHECK(differs);

  SUBCASE("initialization statistics") {
    PeerModel big = build(roberta_config(1, 4, 64), 3);
    const Tensor& emb = big.parameter("tok_embed");
    double s = 0.0, s2 = 0.0;
    for (double v : emb.values()) {
      s += v;
      s2 += v * v;
    }
    const double n = static_cast<double>(emb.size());
    CHECK(std::abs(s / n) < 1e-3);
    CHECK(std::sqrt(s2 / n) == doctest::Approx(0.02).epsilon(0.01));
    for (double v : big.parameter("layer0.attn.q.bias").values()) CHECK(v == 0.0);
    for (double v : big.parameter("head.ln.gamma").values()) CHECK(v == 1.0);
  }

  SUBCASE("invalid configs") {
    PeerConfig bad = tiny_transformer();
    bad.heads = 3;
    CHECK_THROWS_AS(build(bad, 1), ConfigError);
    bad = tiny_transformer();
    bad.layers = 0;
    CHECK_THROWS_AS(build(bad, 1), ConfigError);
  }
}

TEST_CASE("transformer forward") {
  const PeerConfig c = tiny_transformer();
  PeerModel model = build(c, 3);
  Batch batch = token_batch(3, 5, 11, 1);

  Tensor logits = model.forward(batch);
  CHECK(logits.shape() == Shape{3, 5, 11});
  for (double v : logits.values()) CHECK(std::isfinite(v));

  Tensor again = model.forward(batch);
  CHECK(std::equal(logits.values().begin(), logits.values().end(), again.values().begin()));

  SUBCASE("zero weights give uniform predictions") {
    for (auto& p : model.parameters())
      std::fill(p.tensor.mutable_values().begin(), p.tensor.mutable_values().end(), 0.0);
    Tensor p = softmax(flatten_logits(model.forward(batch)));
    for (double v : p.values()) CHECK(v == doctest::Approx(1.0 / 11.0).epsilon(1e-12));
  }

  SUBCASE("decoder is tied to the token embedding") {
    model.parameter("tok_embed").mutable_values()[5] += 0.5;
    Tensor changed = model.forward(batch);
    CHECK_FALSE(std::equal(logits.values().begin(), logits.values().end(),
                           changed.values().begin()));
    CHECK_THROWS_AS(model.parameter("decoder.weight"), ContractError);
    CHECK(model.parameter("decoder.bias").size() == 11);
  }

  SUBCASE("bad inputs") {
    Batch bad = batch;
    bad.tokens[2] = 11;
    CHECK_THROWS_AS(model.forward(bad), DataError);
    Batch long_batch = token_batch(1, 7, 11, 2);
    CHECK_THROWS_AS(model.forward(long_batch), DataError);
  }

  SUBCASE("mean logit gradient matches finite differences") {
    std::vector<Tensor> inputs;
    for (auto& p : model.parameters()) inputs.push_back(p.tensor);
    // Push the layer norms off their trivial init so every path carries signal.
    std::mt19937_64 rng(4);
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (auto& t : inputs)
      for (double& v : t.mutable_values()) v += jitter(rng);
    const double err = finite_diff_check(
        [&](const std::vector<Tensor>&) { return mean(model.forward(batch)); }, inputs, 1e-5);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("mlp forward") {
  PeerModel model = build(mlp_config(4, 3, 6, 2), 5);
  Batch b;
  b.rows = 2;
  b.width = 4;
  b.features = {0.1, -0.2, 0.3, 0.5, 1.0, 0.0, -1.0, 0.25};
  b.labels = {0, 2};
  Tensor logits = model.forward(b);
  CHECK(logits.shape() == Shape{2, 3});
  b.width = 3;
  CHECK_THROWS_AS(model.forward(b), DataError);
}

TEST_CASE("dropout is off unless training with an rng") {
  PeerConfig c = tiny_transformer();
  c.dropout = 0.1;
  PeerModel model = build(c, 3);
  Batch batch = token_batch(2, 4, 11, 9);
  Tensor eval1 = model.forward(batch);
  Tensor eval2 = model.forward(batch, {.train = true});
  CHECK(std::equal(eval1.values().begin(), eval1.values().end(), eval2.values().begin()));
  std::mt19937_64 rng(1);
  Tensor train = model.forward(batch, {.train = true, .rng = &rng});
  CHECK_FALSE(std::equal(eval1.values().begin(), eval1.values().end(), train.values().begin()));
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "peerdistill_ckpt_test";
  std::filesystem::create_directories(dir);
  PeerModel model = build(tiny_transformer(), 21);
  model.set_role_index(3);
  save_checkpoint(dir / "m.ckpt", model);
  PeerModel loaded = load_checkpoint(dir / "m.ckpt");
  CHECK(loaded.config() == model.config());
  CHECK(loaded.role_index() == 3);
  REQUIRE(loaded.parameters().size() == model.parameters().size());
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    CHECK(loaded.parameters()[i].name == model.parameters()[i].name);
    const auto a = loaded.parameters()[i].tensor.values();
    const auto b = model.parameters()[i].tensor.values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  {
    std::ofstream junk(dir / "junk.ckpt");
    junk << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), DataError);

  const std::string blob = read_file(dir / "m.ckpt");
  write_file_atomic(dir / "short.ckpt", blob.substr(0, blob.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), DataError);
  write_file_atomic(dir / "long.ckpt", blob + std::string(8, '\0'));
  CHECK_THROWS_AS(load_checkpoint(dir / "long.ckpt"), DataError);
  std::string renamed = blob;
  const auto at = renamed.find("\"name\":\"");
  REQUIRE(at != std::string::npos);
  renamed[at + 8] = renamed[at + 8] == 'x' ? 'y' : 'x';
  write_file_atomic(dir / "renamed.ckpt", renamed);
  CHECK_THROWS_AS(load_checkpoint(dir / "renamed.ckpt"), DataError);
  std::filesystem::remove_all(dir);
}
