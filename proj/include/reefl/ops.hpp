// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "reefl/autodiff.hpp"

namespace reefl {

inline constexpr double kLayerNormEps = 1e-5;
/// Floor applied to probabilities inside log() by the KL ops.
inline constexpr double kProbFloor = 1e-12;

// Differentiable ops. Every op records onto the graph of its first operand.

/// a[..., k] x b[k, n] -> [..., n]; leading axes of `a` are treated as rows.
Var matmul(const Var& a, const Var& b);
/// a[B, m, k] x b[B, k, n] -> [B, m, n]; with `transpose_b`, b is [B, n, k].
Var batched_matmul(const Var& a, const Var& b, bool transpose_b = false);

/// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape, in
/// which case it is broadcast over the leading axes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var sum(const Var& x);
Var mean(const Var& x);

/// tanh-approximated GELU.
Var gelu(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = kLayerNormEps);
/// Negative `axis` counts from the end.
Var softmax(const Var& x, int axis = -1);
Var log_softmax(const Var& x);

/// Mean over the batch of -log softmax(logits)[label].
Var cross_entropy(const Var& logits, std::span<const int> labels);
/// Sum over all entries of p * log(p / q), probabilities floored at kProbFloor
/// inside the logs. Row-stacked inputs give the sum of per-row divergences.
Var kl_divergence(const Var& p, const Var& q);

Var concat(std::span<const Var> parts, int axis);
Var slice(const Var& x, int axis, std::size_t begin, std::size_t end);
Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<std::size_t>& order);
/// Swaps the last two axes.
Var transpose(const Var& x);
/// Prepends an axis of size `count` by repetition.
Var expand(const Var& x, std::size_t count);
/// Same value, no gradient flow.
Var detach(const Var& x);

// Value-level helpers, no graph.

double gelu_value(double x);
/// Row-wise softmax over the last axis.
Tensor softmax_rows(const Tensor& x);
/// KL(p || q) for two probability vectors, using the same floor as the graph op.
/// Throws kInput for negative entries or sums away from 1.
double kl_divergence(std::span<const double> p, std::span<const double> q);

}  // namespace reefl
