// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "reefl/backbone.hpp"
#include "reefl/federation.hpp"
#include "reefl/ree.hpp"
#include "reefl/training.hpp"

namespace reefl {

struct DataConfig {
  std::string source = "synthetic";  // or "file"
  std::string path;
  int per_class = 100;
  double noise = 0.3;
  double alpha = 1.0;
  double split_ratio = 0.8;
};

struct ScheduleConfig {
  int exits = 0;  // 0: derived from the other keys
  int every_k = 0;
  std::vector<int> exit_blocks;
  bool ree_everywhere = true;
};

struct ExperimentConfig {
  BackboneConfig model;
  ScheduleConfig schedule;
  TrainConfig train;
  FederationConfig federation;
  DataConfig data;
  std::uint64_t seed = 0;
  std::string output_dir = "reefl_out";
  int threads = 0;  // 0: hardware concurrency, capped by REEFL_THREADS

  /// exit_blocks, else every_k, else `exits` evenly spaced, else an exit at every block.
  ExitSchedule resolved_schedule() const;
  TrainConfig resolved_train() const;
  /// Throws kConfig naming the offending key.
  void validate() const;
};

/// Sets one dotted key from its textual value; throws kConfig on unknown keys or bad values.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Applies every `key=value` line ('#' comments and blank lines skipped).
void apply_config_text(ExperimentConfig& cfg, const std::string& text);

/// File values (if `path` non-empty), then `overrides` of the form key=value
/// (a leading "--" is accepted), then validation.
ExperimentConfig parse_config(const std::string& path, const std::vector<std::string>& overrides);

/// Every key with its resolved value, one `key=value` per line; parseable by apply_config_text.
std::string format_config(const ExperimentConfig& cfg);

std::vector<std::string> config_keys();

/// Thread count to use: cfg.threads or hardware concurrency, capped by REEFL_THREADS.
int resolve_threads(int requested);

}  // namespace reefl
