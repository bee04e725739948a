#pragma once

// Differentiable operations. Each op computes its forward value eagerly and,
// when should_record() holds, registers its backward rule on the active tape.
// "Row" ops (softmax, losses, layer_norm) treat the last axis as the feature
// axis and all leading axes as rows.

#include <cstdint>
#include <random>
#include <span>

#include "peerdistill/tensor.hpp"

namespace peerdistill {

// [m x k] * [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] * [n x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Elementwise on equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// Elementwise on equal shapes, or with `b` of size 1 broadcast over `a`.
Tensor mul(const Tensor& a, const Tensor& b);
// Elementwise, with the same broadcasting rule as mul.
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// x[rows x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Element i of a as a shape-{1} tensor.
Tensor select(const Tensor& a, std::size_t i);
Tensor reshape(const Tensor& a, Shape shape);

Tensor relu(const Tensor& x);
// Exact erf form.
Tensor gelu(const Tensor& x);
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);

// table[vocab x d] gathered by row indices -> [indices x d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> indices);

// q, k, v: [batch*seq x d] with d split across `heads`. Position t attends
// to positions <= t only.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t batch, std::size_t seq, std::size_t heads);

Tensor softmax(const Tensor& z, double temperature = 1.0);

// mean over rows of -log softmax(logits)[label]
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);

struct KlOptions {
  // Stop the gradient through the second (target) argument.
  bool detach_target = false;
  double temperature = 1.0;
};

// mean over rows of sum_c p_c ln(p_c / q_c), p = softmax(logits_p),
// q = softmax(logits_q).
Tensor kl_divergence(const Tensor& logits_p, const Tensor& logits_q,
                     KlOptions options = {});

// mean over rows of -ln probs[label]; probs must be strictly positive at the
// labelled entries.
Tensor nll_of_probs(const Tensor& probs, std::span<const std::int32_t> labels);

}  // namespace peerdistill
