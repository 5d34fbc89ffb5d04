// SPDX-License-Identifier: Apache-2.0
#include "reefl/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "reefl/error.hpp"
#include "reefl/model.hpp"
#include "reefl/ops.hpp"

namespace reefl {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kConfig, what); };
  if (!(lr0 > 0.0) || !(lr_min >= 0.0) || lr_min > lr0) fail("train.lr0 must be > 0 and >= train.lr_min >= 0");
  if (total_rounds < 1) fail("federation.total_rounds must be >= 1");
  if (batch_size < 1) fail("train.batch_size must be >= 1");
  if (local_epochs < 1) fail("train.local_epochs must be >= 1");
  if (!(clip > 0.0)) fail("train.clip must be > 0");
  if (!(tau > 0.0)) fail("train.tau must be > 0");
  if (!(zeta > 0.0 && zeta <= 1.0)) fail("train.zeta must lie in (0,1]");
  if (!(eta_max >= 0.0)) fail("train.eta_max must be >= 0");
  if (ramp_rounds < 1) fail("train.ramp_rounds must be >= 1");
}

std::vector<Var> exit_ce_terms(const ForwardTrace& trace, std::span<const int> labels, int exits) {
  if (exits < 1 || static_cast<std::size_t>(exits) > trace.exit_logits.size()) {
    throw Error(ErrorKind::kTrace, "trace holds " + std::to_string(trace.exit_logits.size()) + " exit logits, " +
                                       std::to_string(exits) + " requested");
  }
  std::vector<Var> terms;
  for (int e = 0; e < exits; ++e) terms.push_back(cross_entropy(trace.exit_logits[static_cast<std::size_t>(e)], labels));
  return terms;
}

std::vector<double> exit_ce_losses(const ForwardTrace& trace, std::span<const int> labels, int exits) {
  std::vector<double> out;
  for (const Var& v : exit_ce_terms(trace, labels, exits)) out.push_back(v.value()[0]);
  return out;
}

RunningEstimate update_running_estimate(const RunningEstimate& estimate, std::span<const double> new_losses,
                                        double zeta) {
  if (!(zeta > 0.0 && zeta <= 1.0)) throw Error(ErrorKind::kState, "zeta must lie in (0,1]");
  RunningEstimate out;
  out.initialized = true;
  if (!estimate.initialized) {
    out.values.assign(new_losses.begin(), new_losses.end());
    return out;
  }
  if (estimate.values.size() != new_losses.size()) {
    throw Error(ErrorKind::kState, "running estimate has " + std::to_string(estimate.values.size()) +
                                       " exits, update has " + std::to_string(new_losses.size()));
  }
  out.values.resize(new_losses.size());
  for (std::size_t i = 0; i < new_losses.size(); ++i) {
    out.values[i] = (1.0 - zeta) * estimate.values[i] + zeta * new_losses[i];
  }
  return out;
}

int select_teacher(const RunningEstimate& estimate) {
  if (!estimate.initialized || estimate.values.empty()) {
    throw Error(ErrorKind::kState, "teacher selection needs an initialised running estimate");
  }
  // min_element returns the first minimum, i.e. the shallowest exit on ties.
  return static_cast<int>(std::min_element(estimate.values.begin(), estimate.values.end()) - estimate.values.begin());
}

KdResult kd_loss(std::span<const Var> exit_logits, int teacher, double tau, bool detach_teacher) {
  if (exit_logits.empty()) throw Error(ErrorKind::kTrace, "kd_loss needs at least one exit");
  if (!(tau > 0.0)) throw Error(ErrorKind::kConfig, "temperature must be > 0");
  if (teacher < 0 || static_cast<std::size_t>(teacher) >= exit_logits.size()) {
    throw Error(ErrorKind::kIndex, "teacher exit " + std::to_string(teacher) + " outside the budget");
  }
  Graph& g = exit_logits[0].graph();
  if (exit_logits.size() < 2) return {g.constant(Tensor::scalar(0.0)), true};
  const double batch = static_cast<double>(exit_logits[0].shape()[0]);
  Var teacher_logits = exit_logits[static_cast<std::size_t>(teacher)];
  if (detach_teacher) teacher_logits = detach(teacher_logits);
  Var target = softmax(scale(teacher_logits, 1.0 / tau), -1);
  Var total;
  for (std::size_t e = 0; e < exit_logits.size(); ++e) {
    if (static_cast<int>(e) == teacher) continue;
    Var term = kl_divergence(target, softmax(scale(exit_logits[e], 1.0 / tau), -1));
    total = total.valid() ? add(total, term) : term;
  }
  return {scale(total, tau * tau / batch), false};
}

KdResult kd_loss(const ForwardTrace& trace, int teacher, double tau, bool detach_teacher, int exits) {
  const std::size_t n = exits < 0 ? trace.exit_logits.size() : static_cast<std::size_t>(exits);
  if (n > trace.exit_logits.size()) throw Error(ErrorKind::kTrace, "kd_loss asked for more exits than recorded");
  return kd_loss(std::span<const Var>(trace.exit_logits.data(), n), teacher, tau, detach_teacher);
}

double eta_schedule(int round, const TrainConfig& cfg) {
  if (round < 1) throw Error(ErrorKind::kSchedule, "rounds are 1-based");
  return cfg.eta_max * std::min(static_cast<double>(round) / static_cast<double>(cfg.ramp_rounds), 1.0);
}

double cosine_lr(int round, const TrainConfig& cfg) {
  if (round < 1 || round > cfg.total_rounds) {
    throw Error(ErrorKind::kSchedule, "round " + std::to_string(round) + " outside [1," +
                                          std::to_string(cfg.total_rounds) + "]");
  }
  // Endpoints are returned verbatim rather than through the cosine.
  if (round == 1) return cfg.lr0;
  if (round == cfg.total_rounds) return cfg.lr_min;
  const double progress = static_cast<double>(round - 1) / static_cast<double>(cfg.total_rounds - 1);
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

void sgd_step(Tensor& param, const Tensor& grad, double lr, double clip) {
  if (param.shape() != grad.shape()) {
    throw Error(ErrorKind::kDimension, "gradient " + shape_str(grad.shape()) + " for parameter " + shape_str(param.shape()));
  }
  auto p = param.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * std::clamp(g[i], -clip, clip);
}

LocalResult local_train(const ModelParams& submodel, const BackboneConfig& config, const ExitSchedule& schedule,
                        const Dataset& data, const IndexList& train, int budget, const TrainConfig& cfg, int round,
                        RunningEstimate estimate, std::mt19937_64& rng) {
  if (train.empty()) throw Error(ErrorKind::kInput, "client has no training examples");
  const int exits = schedule.exits_within(budget);
  if (exits < 1) throw Error(ErrorKind::kBudget, "budget " + std::to_string(budget) + " covers no exit");
  const double lr = cosine_lr(round, cfg);
  const double eta = eta_schedule(round, cfg);
  const bool train_backbone = cfg.mode == TrainMode::kFull;

  LocalResult result;
  result.params = submodel;
  auto tensors = named_tensors(result.params);
  IndexList order = train;
  double loss_sum = 0.0;
  int batch_index = 0;
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const std::size_t> batch(order.data() + start, stop - start);
      const Tensor images = stack_images(data, batch);
      const std::vector<int> labels = gather_labels(data, batch);

      BatchLoss record;
      try {
        Graph graph;
        ModelParamsT<Var> vars = bind_model(graph, result.params, train_backbone);
        ForwardTrace trace = forward_with_exits(vars, config, schedule, images, budget, {cfg.modulation});
        std::vector<Var> ce = exit_ce_terms(trace, labels, exits);
        for (const Var& v : ce) record.ce.push_back(v.value()[0]);
        estimate = update_running_estimate(estimate, record.ce, cfg.zeta);
        record.teacher = select_teacher(estimate);
        Var total = ce[0];
        for (std::size_t e = 1; e < ce.size(); ++e) total = add(total, ce[e]);
        if (cfg.kd_enabled && exits > 1) {
          KdResult kd = kd_loss(trace, record.teacher, cfg.tau, cfg.detach_teacher, exits);
          record.kd = kd.loss.value()[0];
          record.eta = eta;
          total = add(total, scale(kd.loss, eta));
        }
        record.total = total.value()[0];
        graph.backward(total);
        const std::vector<Var> leaves = model_vars(vars);
        for (std::size_t i = 0; i < leaves.size(); ++i) {
          if (!leaves[i].requires_grad()) continue;
          Tensor& param = *tensors[i].second;
          sgd_step(param, leaves[i].grad(), lr, cfg.clip);
          if (cfg.precision == Precision::kFloat32) param.round_to_float();
        }
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNonFinite) throw;
        throw Error(ErrorKind::kDivergence, "non-finite loss at local batch " + std::to_string(batch_index) + ": " +
                                                e.what());
      }
      loss_sum += record.total;
      result.batches.push_back(std::move(record));
    }
  }
  result.num_samples = static_cast<double>(train.size()) * static_cast<double>(cfg.local_epochs);
  result.mean_loss = loss_sum / static_cast<double>(result.batches.size());
  result.estimate = std::move(estimate);
  return result;
}

}  // namespace reefl
