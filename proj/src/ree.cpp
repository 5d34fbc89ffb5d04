// SPDX-License-Identifier: Apache-2.0
#include "reefl/ree.hpp"

#include <algorithm>
#include <cmath>

#include "reefl/error.hpp"
#include "reefl/ops.hpp"

namespace reefl {
namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Var as_row(const Var& t) {
  // [B, d] -> [B, 1, d]
  if (t.shape().size() == 2) return reshape(t, {t.shape()[0], 1, t.shape()[1]});
  return t;
}

}  // namespace

int ree_mlp_hidden(int hidden_dim) {
  return static_cast<int>(std::lround(kReeMlpRatio * static_cast<double>(hidden_dim)));
}

ExitSchedule ExitSchedule::every_k(int depth, int k, bool ree_everywhere) {
  if (k < 1 || depth < 1 || depth % k != 0) {
    throw Error(ErrorKind::kSchedule, "every_k=" + std::to_string(k) + " does not divide depth " + std::to_string(depth));
  }
  ExitSchedule s;
  for (int b = k; b <= depth; b += k) s.exit_blocks.push_back(b);
  s.ree_everywhere = ree_everywhere;
  return s;
}

void ExitSchedule::validate(int depth) const {
  if (exit_blocks.empty()) throw Error(ErrorKind::kSchedule, "schedule has no exits");
  for (std::size_t i = 0; i < exit_blocks.size(); ++i) {
    const int b = exit_blocks[i];
    if (b < 1 || b > depth) throw Error(ErrorKind::kSchedule, "exit block " + std::to_string(b) + " outside [1,depth]");
    if (i > 0 && b <= exit_blocks[i - 1]) throw Error(ErrorKind::kSchedule, "exit blocks must be strictly increasing");
  }
  if (exit_blocks.back() != depth) throw Error(ErrorKind::kSchedule, "last exit must sit at the final block");
}

bool ExitSchedule::is_exit(int block) const {
  return std::binary_search(exit_blocks.begin(), exit_blocks.end(), block);
}

int ExitSchedule::exits_within(int budget) const {
  return static_cast<int>(std::upper_bound(exit_blocks.begin(), exit_blocks.end(), budget) - exit_blocks.begin());
}

int ExitSchedule::queue_capacity(int depth) const { return (ree_everywhere ? depth : num_exits()) + 1; }

ReeParams init_ree(const BackboneConfig& cfg, const ExitSchedule& schedule, std::mt19937_64& rng) {
  ReeParams r;
  const std::size_t d = sz(cfg.hidden_dim);
  r.block = init_block(cfg.hidden_dim, kReeAttnWidth, ree_mlp_hidden(cfg.hidden_dim), rng);
  r.z_meta = trunc_normal({d}, rng);
  r.pos = trunc_normal({sz(schedule.queue_capacity(cfg.depth)), d}, rng);
  return r;
}

ClassifierParams init_classifier(const BackboneConfig& cfg, std::mt19937_64& rng) {
  ClassifierParams c;
  const std::size_t d = sz(cfg.hidden_dim);
  c.ln_gamma = Tensor({d}, 1.0);
  c.ln_beta = Tensor({d}, 0.0);
  c.w = trunc_normal({d, sz(cfg.num_classes)}, rng);
  c.b = Tensor({sz(cfg.num_classes)}, 0.0);
  return c;
}

Var ree_forward(const std::vector<Var>& queue, const ReeParamsT<Var>& ree) {
  if (queue.empty()) throw Error(ErrorKind::kSchedule, "empty class-token queue");
  const std::size_t len = queue.size();
  if (len > ree.pos.shape()[0]) {
    throw Error(ErrorKind::kSchedule, "queue length " + std::to_string(len) + " exceeds " +
                                          std::to_string(ree.pos.shape()[0]) + " positional rows");
  }
  Var seq = add(concat(queue, 1), slice(ree.pos, 0, 0, len));
  return block_forward(seq, ree.block, kReeHeads);
}

Var classify_exit(const Var& m0, const Var& zcls, const ClassifierParamsT<Var>& classifier) {
  Var a = as_row(m0);
  Var b = as_row(zcls);
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::kDimension, "classify_exit: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Var combined = reshape(add(a, b), {a.shape()[0], a.shape()[2]});
  Var normed = layer_norm(combined, classifier.ln_gamma, classifier.ln_beta);
  return add(matmul(normed, classifier.w), classifier.b);
}

Var modulate(const Var& z, const Var& m_last) {
  const Shape& s = z.shape();
  if (s.size() != 3) throw Error(ErrorKind::kDimension, "modulate expects [B,T,d], got " + shape_str(s));
  Var row = as_row(m_last);
  if (row.shape() != Shape{s[0], 1, s[2]}) {
    throw Error(ErrorKind::kDimension, "modulate: token " + shape_str(row.shape()) + " vs " + shape_str(s));
  }
  if (s[1] == 1) return row;
  const Var parts[] = {row, slice(z, 1, 1, s[1])};
  return concat(parts, 1);
}

ForwardTrace forward_with_exits(const ModelParamsT<Var>& model, const BackboneConfig& cfg, const ExitSchedule& schedule,
                                const Tensor& images, int budget, const ForwardOptions& options) {
  if (images.empty() || images.rank() != 4) {
    throw Error(ErrorKind::kInput, "forward_with_exits needs a non-empty [B,C,H,W] batch");
  }
  if (budget < schedule.exit_blocks.front()) {
    throw Error(ErrorKind::kBudget, "budget " + std::to_string(budget) + " does not reach the first exit at block " +
                                        std::to_string(schedule.exit_blocks.front()));
  }
  if (budget > static_cast<int>(model.backbone.blocks.size())) {
    throw Error(ErrorKind::kBudget, "budget " + std::to_string(budget) + " exceeds the " +
                                        std::to_string(model.backbone.blocks.size()) + " blocks held");
  }
  const std::size_t batch = images.dim(0);
  const std::size_t d = sz(cfg.hidden_dim);

  ForwardTrace trace;
  trace.budget = budget;
  trace.queue.push_back(expand(reshape(model.ree.z_meta, {1, d}), batch));
  trace.modulated.resize(sz(budget));
  trace.class_tokens.resize(sz(budget));

  auto hook = [&](int block, const Var& out) -> Var {
    Var zcls = slice(out, 1, 0, 1);
    trace.class_tokens[sz(block - 1)] = zcls;
    const bool exit_here = schedule.is_exit(block);
    if (!schedule.ree_everywhere && !exit_here) return out;
    trace.queue.push_back(zcls);
    Var m = ree_forward(trace.queue, model.ree);
    ++trace.ree_calls;
    trace.modulated[sz(block - 1)] = m;
    if (exit_here) {
      // Classification reads the original class token, before it is replaced.
      trace.exit_logits.push_back(classify_exit(slice(m, 1, 0, 1), zcls, model.classifier));
      trace.exit_blocks.push_back(block);
    }
    if (!options.modulation) return out;
    const std::size_t q = trace.queue.size();
    return modulate(out, slice(m, 1, q - 1, q));
  };

  PrefixResult prefix = prefix_forward(model.backbone, cfg, images, budget, hook);
  trace.tokens = prefix.tokens;
  trace.block_inputs = std::move(prefix.inputs);
  return trace;
}

Tensor query_attention_map(const Var& query, const Var& block_input, const BlockParamsT<Var>& block, int heads) {
  const Shape& s = block_input.shape();
  const std::size_t batch = s[0], tokens = s[1];
  const Var parts[] = {as_row(query), slice(block_input, 1, 1, tokens)};
  Var seq = concat(parts, 1);
  Var attention = msa_forward(layer_norm(seq, block.ln1_gamma, block.ln1_beta), block.attn, heads).attention;
  const Tensor& a = attention.value();  // [B, h, T, T]
  const std::size_t h = a.dim(1);
  const std::size_t n = tokens - 1;
  Tensor out({batch, n}, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t head = 0; head < h; ++head) {
      const double* row = a.data().data() + ((b * h + head) * tokens) * tokens;
      for (std::size_t j = 0; j < n; ++j) out[b * n + j] += row[j + 1] / static_cast<double>(h);
    }
  }
  return out;
}

AttentionMaps attention_maps(const ForwardTrace& trace, const ModelParamsT<Var>& model, const BackboneConfig& cfg,
                             int block) {
  if (block < 1 || block > trace.budget) {
    throw Error(ErrorKind::kIndex, "block " + std::to_string(block) + " was not executed (budget " +
                                       std::to_string(trace.budget) + ")");
  }
  const std::size_t l = sz(block - 1);
  const BlockParamsT<Var>& params = model.backbone.blocks[l];
  const Var& input = trace.block_inputs[l];
  Var prev_cls = block == 1 ? slice(trace.tokens, 1, 0, 1) : trace.class_tokens[l - 1];
  AttentionMaps maps;
  maps.x = query_attention_map(prev_cls, input, params, cfg.heads);
  const Var& m = trace.modulated[l];
  if (m.valid()) {
    const std::size_t q = m.shape()[1];
    maps.m = query_attention_map(slice(m, 1, q - 1, q), input, params, cfg.heads);
    maps.c = query_attention_map(add(slice(m, 1, 0, 1), trace.class_tokens[l]), input, params, cfg.heads);
  }
  return maps;
}

}  // namespace reefl
