// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <span>
#include <vector>

#include "reefl/data.hpp"
#include "reefl/ree.hpp"

namespace reefl {

enum class TrainMode { kFull, kFrozen };
enum class Precision { kFloat32, kFloat64 };

struct TrainConfig {
  double lr0 = 5e-2;
  double lr_min = 1e-3;
  int total_rounds = 1000;
  int batch_size = 32;
  int local_epochs = 1;
  double clip = 1.0;
  double tau = 1.0;
  double zeta = 0.2;
  double eta_max = 1.0;
  int ramp_rounds = 300;
  bool kd_enabled = true;
  /// Stop-gradient on the teacher exit's logits inside the KD term.
  bool detach_teacher = true;
  bool modulation = true;
  TrainMode mode = TrainMode::kFull;
  /// kFloat32 rounds parameters to single precision after every update.
  Precision precision = Precision::kFloat32;

  void validate() const;
};

/// Exponential moving average of per-exit training CE.
struct RunningEstimate {
  std::vector<double> values;
  bool initialized = false;
};

/// Mean-over-batch CE of each of the first `exits` exits, as graph values.
/// Throws kTrace if the trace recorded fewer exits.
std::vector<Var> exit_ce_terms(const ForwardTrace& trace, std::span<const int> labels, int exits);
std::vector<double> exit_ce_losses(const ForwardTrace& trace, std::span<const int> labels, int exits);

RunningEstimate update_running_estimate(const RunningEstimate& estimate, std::span<const double> new_losses,
                                        double zeta);

/// 0-based argmin of the estimate; ties go to the shallowest exit.
int select_teacher(const RunningEstimate& estimate);

struct KdResult {
  Var loss;
  bool degenerate = false;  // fewer than two exits, loss is a constant 0
};

/// tau^2 / B * sum over non-teacher exits and samples of
/// KL(softmax(teacher / tau) || softmax(student / tau)).
KdResult kd_loss(const ForwardTrace& trace, int teacher, double tau, bool detach_teacher = true, int exits = -1);
/// Same quantity on raw logits [B, K] per exit.
KdResult kd_loss(std::span<const Var> exit_logits, int teacher, double tau, bool detach_teacher = true);

/// Linear ramp eta_max * min(t / ramp_rounds, 1).
double eta_schedule(int round, const TrainConfig& cfg);
/// Cosine annealing from lr0 at round 1 to lr_min at total_rounds.
double cosine_lr(int round, const TrainConfig& cfg);

/// param -= lr * clamp(grad, -clip, clip), componentwise.
void sgd_step(Tensor& param, const Tensor& grad, double lr, double clip);

struct BatchLoss {
  std::vector<double> ce;
  double kd = 0.0;
  double eta = 0.0;
  double total = 0.0;
  int teacher = 0;
};

struct LocalResult {
  ModelParams params;
  double num_samples = 0.0;  // N_i * local_epochs
  double mean_loss = 0.0;
  RunningEstimate estimate;
  std::vector<BatchLoss> batches;
};

/// Local SGD on `train` for cfg.local_epochs passes over blocks 1..budget.
/// Throws kDivergence naming the batch index on a non-finite loss.
LocalResult local_train(const ModelParams& submodel, const BackboneConfig& config, const ExitSchedule& schedule,
                        const Dataset& data, const IndexList& train, int budget, const TrainConfig& cfg, int round,
                        RunningEstimate estimate, std::mt19937_64& rng);

}  // namespace reefl
