// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "reefl/config.hpp"

namespace reefl {

/// Everything a run needs, built deterministically from the config.
struct Setup {
  std::shared_ptr<const Dataset> data;
  std::vector<IndexList> partition;
  std::vector<ClientState> clients;
  IndexList global_test;
  GlobalModel model;
};

/// Data (synthetic or loaded), LDA partition, per-client split, budgets, model init.
Setup build_setup(const ExperimentConfig& cfg);
Simulator make_simulator(const ExperimentConfig& cfg, Setup setup);

/// Runs every round and writes config.resolved, metrics.csv and checkpoint.bin
/// into cfg.output_dir.
std::vector<RoundReport> run_experiment(const ExperimentConfig& cfg);

/// Attention rows "sample_id,block,variant,token_index,weight" (header
/// included) for the given dataset examples, full-depth forward.
std::string attention_csv(const GlobalModel& model, const Dataset& data, const std::vector<std::size_t>& samples,
                          const ForwardOptions& options = {});

}  // namespace reefl
