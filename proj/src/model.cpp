// SPDX-License-Identifier: Apache-2.0
#include "reefl/model.hpp"

#include <random>

#include "reefl/binary_io.hpp"
#include "reefl/error.hpp"

namespace reefl {
namespace {

constexpr char kCheckpointMagic[] = "REEFLCKP";
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

GlobalModel init_global_model(const BackboneConfig& config, const ExitSchedule& schedule, std::uint64_t seed) {
  config.validate();
  schedule.validate(config.depth);
  std::mt19937_64 rng(seed);
  GlobalModel model{config, schedule, {}};
  model.params.backbone = init_backbone(config, rng);
  model.params.ree = init_ree(config, schedule, rng);
  model.params.classifier = init_classifier(config, rng);
  return model;
}

std::vector<std::pair<std::string, Tensor*>> named_tensors(ModelParams& params) {
  std::vector<std::pair<std::string, Tensor*>> out;
  visit_model(params, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_tensors(const ModelParams& params) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit_model(params, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t total = 0;
  visit_model(params, [&](const std::string&, const Tensor& t) { total += t.numel(); });
  return total;
}

std::string param_group(const std::string& name) {
  static const std::string block = "backbone.block";
  if (name.rfind(block, 0) == 0) {
    const std::size_t dot = name.find('.', block.size());
    return "block" + std::to_string(std::stoul(name.substr(block.size(), dot - block.size())) + 1);
  }
  if (name.rfind("backbone.", 0) == 0) return "embeddings";
  if (name.rfind("ree.", 0) == 0) return "ree";
  if (name.rfind("classifier.", 0) == 0) return "classifier";
  throw Error(ErrorKind::kAggregation, "unknown parameter '" + name + "'");
}

bool is_backbone_group(const std::string& group) { return group == "embeddings" || group.rfind("block", 0) == 0; }

ModelParamsT<Var> bind_model(Graph& graph, const ModelParams& params, bool train_backbone) {
  ModelParamsT<Var> vars;
  vars.backbone.blocks.resize(params.backbone.blocks.size());
  const auto tensors = named_tensors(params);
  std::size_t i = 0;
  visit_model(vars, [&](const std::string& name, Var& v) {
    const Tensor& t = *tensors[i++].second;
    const bool trainable = train_backbone || !is_backbone_group(param_group(name));
    v = trainable ? graph.param(t) : graph.constant(t);
  });
  return vars;
}

std::vector<Var> model_vars(const ModelParamsT<Var>& vars) {
  std::vector<Var> out;
  visit_model(vars, [&](const std::string&, const Var& v) { out.push_back(v); });
  return out;
}

ModelParamsT<Var> model_from_vars(std::span<const Var> vars, int depth) {
  ModelParamsT<Var> out;
  out.backbone.blocks.resize(static_cast<std::size_t>(depth));
  std::size_t i = 0;
  visit_model(out, [&](const std::string& name, Var& v) {
    if (i >= vars.size()) throw Error(ErrorKind::kDimension, "too few variables for " + name);
    v = vars[i++];
  });
  if (i != vars.size()) throw Error(ErrorKind::kDimension, "too many variables for a depth-" + std::to_string(depth) + " model");
  return out;
}

std::vector<std::uint8_t> encode_checkpoint(const GlobalModel& model) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const BackboneConfig& c = model.config;
  for (int v : {c.depth, c.hidden_dim, c.heads, c.image_size, c.patch_size, c.channels, c.num_classes}) w.i32(v);
  w.i32(model.schedule.ree_everywhere ? 1 : 0);
  w.i32(model.schedule.num_exits());
  for (int b : model.schedule.exit_blocks) w.i32(b);
  const auto tensors = named_tensors(model.params);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t->data()) w.f32(static_cast<float>(v));
  }
  return w.bytes();
}

GlobalModel decode_checkpoint(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  const std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
  if (r.raw(magic_len) != kCheckpointMagic) throw Error(ErrorKind::kFormat, "bad checkpoint magic at byte offset 0");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(version) + " at byte offset 8");
  }
  BackboneConfig c;
  c.depth = r.i32();
  c.hidden_dim = r.i32();
  c.heads = r.i32();
  c.image_size = r.i32();
  c.patch_size = r.i32();
  c.channels = r.i32();
  c.num_classes = r.i32();
  ExitSchedule s;
  s.ree_everywhere = r.i32() != 0;
  const std::int32_t exits = r.i32();
  if (exits < 1 || exits > 4096) throw Error(ErrorKind::kFormat, "bad exit count at byte offset " + std::to_string(r.offset() - 4));
  for (std::int32_t e = 0; e < exits; ++e) s.exit_blocks.push_back(r.i32());
  try {
    c.validate();
    s.validate(c.depth);
  } catch (const Error& e) {
    throw Error(ErrorKind::kFormat, std::string("checkpoint header: ") + e.what());
  }
  GlobalModel model = init_global_model(c, s, 0);
  auto tensors = named_tensors(model.params);
  const std::uint32_t count = r.u32();
  if (count != tensors.size()) {
    throw Error(ErrorKind::kFormat, "checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                                        std::to_string(tensors.size()));
  }
  for (auto& [name, t] : tensors) {
    const std::size_t at = r.offset();
    const std::string stored = r.raw(r.u32());
    if (stored != name) {
      throw Error(ErrorKind::kFormat, "expected tensor '" + name + "', found '" + stored + "' at byte offset " +
                                          std::to_string(at));
    }
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank && i < 8; ++i) shape.push_back(r.u32());
    if (shape != t->shape()) {
      throw Error(ErrorKind::kFormat, "tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                          shape_str(t->shape()) + " (byte offset " + std::to_string(at) + ")");
    }
    r.need(4 * t->numel(), "tensor '" + name + "'");
    for (auto& v : t->data()) v = static_cast<double>(r.f32());
  }
  if (r.remaining() != 0) {
    throw Error(ErrorKind::kFormat, "trailing bytes after byte offset " + std::to_string(r.offset()));
  }
  return model;
}

void save_checkpoint(const std::string& path, const GlobalModel& model) { write_file(path, encode_checkpoint(model)); }

GlobalModel load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace reefl
