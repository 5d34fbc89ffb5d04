// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "reefl/data.hpp"
#include "reefl/model.hpp"
#include "reefl/training.hpp"

namespace reefl {

struct FederationConfig {
  int num_clients = 20;
  double sample_fraction = 0.1;
  int total_rounds = 100;
  int eval_interval = 10;
  /// Only clients whose budget reaches the final block take part.
  bool exclude_underbudget = false;

  void validate() const;
};

/// Splits `clients` into E contiguous groups, group e training up to block
/// b[e]; remainder clients go to the deepest groups.
std::vector<int> assign_budgets(int clients, const ExitSchedule& schedule);

/// Uniform sample without replacement of max(1, round(fraction * |pool|)) ids, returned sorted.
std::vector<int> sample_clients(const std::vector<int>& pool, double fraction, std::mt19937_64& rng);

/// Deep copy of blocks 1..budget plus embeddings, Ree and classifier.
ModelParams slice_submodel(const GlobalModel& global, int budget);

struct ClientUpdate {
  ModelParams params;  // a slice as returned by slice_submodel, after training
  double weight = 0.0; // samples used, N_i * local_epochs
};

/// Per-group sample-weighted mean over the clients holding each group.
/// Groups nobody trained keep the global value; in frozen mode only Ree and
/// classifier groups are averaged.
void aggregate(GlobalModel& global, const std::vector<ClientUpdate>& updates, TrainMode mode);

/// Bytes one transfer of `view` costs: 4 per transferred scalar.
std::uint64_t comm_cost(const ModelParams& view, TrainMode mode);

/// Top-1 accuracy of every exit over `test`, full depth, evaluated in batches of `batch_size`.
std::vector<double> evaluate(const GlobalModel& global, const Dataset& data, const IndexList& test,
                             const ForwardOptions& options = {}, int batch_size = 64);

struct ClientState {
  int id = 0;
  int budget = 0;
  IndexList train;
  IndexList test;
  RunningEstimate estimate;
};

struct RoundReport {
  int round = 0;
  std::vector<int> sampled;
  bool evaluated = false;
  std::vector<double> exit_accuracy;
  double mean_accuracy = 0.0;
  std::vector<double> client_loss;
  double train_loss_mean = 0.0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  double eta = 0.0;
  double lr = 0.0;
};

/// Mixes (seed, round, stream) into an RNG seed; stream is a client id or a server stream tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t round, std::uint64_t stream);
inline constexpr std::uint64_t kServerStream = 0xFFFF'FFFFull;

/// Server state and round loop. Client training runs on up to `threads`
/// workers; every client draws from its own seeded stream, so results do not
/// depend on the thread count.
class Simulator {
 public:
  Simulator(GlobalModel model, std::shared_ptr<const Dataset> data, std::vector<ClientState> clients, IndexList global_test,
            TrainConfig train, FederationConfig federation, std::uint64_t seed, int threads = 1);

  RoundReport run_round(int round);
  /// Rounds 1..total_rounds; `on_report` sees every report as it is produced.
  std::vector<RoundReport> run(const std::function<void(const RoundReport&)>& on_report = {});

  const GlobalModel& model() const noexcept { return model_; }
  const std::vector<ClientState>& clients() const noexcept { return clients_; }
  const IndexList& global_test() const noexcept { return global_test_; }
  void set_threads(int threads) { threads_ = threads < 1 ? 1 : threads; }

 private:
  GlobalModel model_;
  std::shared_ptr<const Dataset> data_;
  std::vector<ClientState> clients_;
  IndexList global_test_;
  TrainConfig train_;
  FederationConfig federation_;
  std::uint64_t seed_;
  int threads_;
};

/// Header and row of the metrics CSV.
std::string metrics_csv_header(int exits);
std::string metrics_csv_row(const RoundReport& report);

}  // namespace reefl
