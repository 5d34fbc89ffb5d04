// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "reefl/ree.hpp"

namespace reefl {

/// Backbone + shared Ree + shared classifier, with the schedule they were built for.
struct GlobalModel {
  BackboneConfig config;
  ExitSchedule schedule;
  ModelParams params;
};

GlobalModel init_global_model(const BackboneConfig& config, const ExitSchedule& schedule, std::uint64_t seed);

std::vector<std::pair<std::string, Tensor*>> named_tensors(ModelParams& params);
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const ModelParams& params);
std::size_t parameter_count(const ModelParams& params);

/// Aggregation/transfer unit a tensor belongs to: "embeddings", "block<l>" (1-based), "ree" or "classifier".
std::string param_group(const std::string& name);
bool is_backbone_group(const std::string& group);

/// Leaves on `graph` mirroring `params`. With `train_backbone` false the
/// backbone is bound as constants.
ModelParamsT<Var> bind_model(Graph& graph, const ModelParams& params, bool train_backbone = true);
std::vector<Var> model_vars(const ModelParamsT<Var>& vars);
/// Inverse of model_vars for a model with `depth` blocks.
ModelParamsT<Var> model_from_vars(std::span<const Var> vars, int depth);

/// Binary checkpoint: "REEFLCKP", u32 version, config and schedule as i32,
/// u32 tensor count, then per tensor (u32 name length, name, u32 rank,
/// u32 dims, f32 values), all little-endian.
std::vector<std::uint8_t> encode_checkpoint(const GlobalModel& model);
GlobalModel decode_checkpoint(std::vector<std::uint8_t> bytes);
void save_checkpoint(const std::string& path, const GlobalModel& model);
GlobalModel load_checkpoint(const std::string& path);

}  // namespace reefl
