// SPDX-License-Identifier: Apache-2.0
// Helpers shared by the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "reefl/experiment.hpp"
#include "reefl/grad_check.hpp"
#include "reefl/ops.hpp"

namespace reefl::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape), 0.0);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline BackboneConfig tiny_config(int depth = 2, int hidden = 16, int heads = 2) {
  BackboneConfig c;
  c.depth = depth;
  c.hidden_dim = hidden;
  c.heads = heads;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 3;
  c.num_classes = 4;
  return c;
}

inline Dataset tiny_dataset(int per_class = 4, int image_size = 8, std::uint64_t seed = 1, double noise = 0.3) {
  SynthSpec s;
  s.per_class = per_class;
  s.image_size = image_size;
  s.noise = noise;
  return synth_dataset(s, seed);
}

inline std::vector<Tensor> flat_params(const ModelParams& p) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_tensors(p)) out.push_back(*t);
  return out;
}

/// Perturbs every parameter so that no weight sits at its symmetric init value.
inline void jitter(ModelParams& p, std::mt19937_64& rng, double scale = 0.3) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& [name, t] : named_tensors(p)) {
    for (auto& v : t->data()) v += n(rng);
  }
}

/// Scalar-loop softmax of one row.
inline std::vector<double> softmax_loop(const std::vector<double>& x, double tau = 1.0) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v / tau);
  std::vector<double> out(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (out[i] = std::exp(x[i] / tau - mx));
  for (auto& v : out) v /= z;
  return out;
}

/// Scalar-loop distillation loss: tau^2 / B * sum over students and samples of KL(teacher || student).
/// Probabilities inside the logarithms are floored at `floor`.
inline double kd_loop(const std::vector<std::vector<std::vector<double>>>& logits, int teacher, double tau,
                      double floor = 0.0) {
  const std::size_t batch = logits[0].size();
  double total = 0.0;
  for (std::size_t e = 0; e < logits.size(); ++e) {
    if (static_cast<int>(e) == teacher) continue;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto p = softmax_loop(logits[static_cast<std::size_t>(teacher)][b], tau);
      const auto q = softmax_loop(logits[e][b], tau);
      for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] > 0.0) total += p[k] * (std::log(std::max(p[k], floor)) - std::log(std::max(q[k], floor)));
      }
    }
  }
  return tau * tau * total / static_cast<double>(batch);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace reefl::testing
