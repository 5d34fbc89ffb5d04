// SPDX-License-Identifier: Apache-2.0
#include "reefl/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "reefl/error.hpp"

namespace reefl {
namespace {

double evaluate(const LossFn& loss, const std::vector<Tensor>& params) {
  Graph graph(false);
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(graph.constant(p));
  return loss(graph, vars).value()[0];
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss, std::vector<Tensor> params, const GradCheckOptions& options) {
  GradCheckReport report;
  std::vector<Tensor> analytic;
  try {
    Graph graph;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(graph.param(p));
    Var out = loss(graph, vars);
    graph.backward(out);
    for (const auto& v : vars) analytic.push_back(v.grad());
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNonFinite) throw;
    report.failure = e.what();
    return report;
  }

  const double eps = options.epsilon;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].numel(); ++i) {
      const double saved = params[t][i];
      double up = 0.0, down = 0.0;
      try {
        params[t][i] = saved + eps;
        up = evaluate(loss, params);
        params[t][i] = saved - eps;
        down = evaluate(loss, params);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNonFinite) throw;
        report.failure = e.what();
        report.passed = false;
        return report;
      }
      params[t][i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel_err > report.max_rel_error) {
        report.max_rel_error = rel_err;
        report.worst_param = t;
        report.worst_index = i;
      }
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace reefl
