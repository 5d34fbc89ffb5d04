// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "reefl/autodiff.hpp"

namespace reefl {

/// Builds a scalar loss on `graph` from the bound parameters (same order as passed in).
using LossFn = std::function<Var(Graph& graph, std::span<const Var> params)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error, so components that are zero
  /// on both sides compare by absolute difference.
  double abs_floor = 1e-6;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
  std::string failure;  // set when a non-finite value aborted the check
};

/// Compares reverse-mode gradients of `loss` against central differences for
/// every component of every tensor in `params`.
GradCheckReport grad_check(const LossFn& loss, std::vector<Tensor> params, const GradCheckOptions& options = {});

}  // namespace reefl
