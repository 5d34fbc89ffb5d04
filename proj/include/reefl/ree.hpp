// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "reefl/backbone.hpp"

namespace reefl {

inline constexpr int kReeHeads = 8;
/// Total Q/K/V projection width of the Ree block (8 heads x 2).
inline constexpr int kReeAttnWidth = 16;
inline constexpr double kReeMlpRatio = 1.35;

int ree_mlp_hidden(int hidden_dim);

/// Block indices (1-based) carrying an exit, and whether Ree also runs at
/// non-exit blocks.
struct ExitSchedule {
  std::vector<int> exit_blocks;
  bool ree_everywhere = true;

  static ExitSchedule every_k(int depth, int k, bool ree_everywhere = true);

  int num_exits() const { return static_cast<int>(exit_blocks.size()); }
  /// Throws kSchedule unless strictly increasing within [1, depth] and ending at depth.
  void validate(int depth) const;
  bool is_exit(int block) const;
  /// Number of exits at or before `budget`.
  int exits_within(int budget) const;
  /// Rows of the Ree positional embedding: depth + 1, or E + 1 in exit-only mode.
  int queue_capacity(int depth) const;
};

template <class T>
struct ReeParamsT {
  BlockParamsT<T> block;
  T z_meta;  // [d]
  T pos;     // [queue_capacity, d]
};

/// LN followed by a linear layer, shared by all exits.
template <class T>
struct ClassifierParamsT {
  T ln_gamma, ln_beta, w, b;
};

template <class T>
struct ModelParamsT {
  BackboneParamsT<T> backbone;
  ReeParamsT<T> ree;
  ClassifierParamsT<T> classifier;
};

using ReeParams = ReeParamsT<Tensor>;
using ClassifierParams = ClassifierParamsT<Tensor>;
using ModelParams = ModelParamsT<Tensor>;

template <class R, class F>
void visit_ree(R& r, F&& f) {
  visit_block(r.block, "ree.block.", f);
  f(std::string("ree.z_meta"), r.z_meta);
  f(std::string("ree.pos"), r.pos);
}

template <class C, class F>
void visit_classifier(C& c, F&& f) {
  f(std::string("classifier.ln.gamma"), c.ln_gamma);
  f(std::string("classifier.ln.beta"), c.ln_beta);
  f(std::string("classifier.w"), c.w);
  f(std::string("classifier.b"), c.b);
}

/// Every named tensor: embeddings, blocks in order, Ree, classifier.
template <class M, class F>
void visit_model(M& m, F&& f) {
  visit_backbone(m.backbone, f);
  visit_ree(m.ree, f);
  visit_classifier(m.classifier, f);
}

ReeParams init_ree(const BackboneConfig& cfg, const ExitSchedule& schedule, std::mt19937_64& rng);
ClassifierParams init_classifier(const BackboneConfig& cfg, std::mt19937_64& rng);

/// Runs the shared block over queue + pos[:q]. Queue entries are [B, 1, d]
/// with z_meta first; returns the modulated tokens [B, q, d].
Var ree_forward(const std::vector<Var>& queue, const ReeParamsT<Var>& ree);

/// Classifier(m0 + zcls); inputs [B, d] or [B, 1, d], output [B, K].
Var classify_exit(const Var& m0, const Var& zcls, const ClassifierParamsT<Var>& classifier);

/// Replaces token row 0 of z [B, T, d] with m_last ([B, 1, d] or [B, d]).
Var modulate(const Var& z, const Var& m_last);

struct ForwardOptions {
  bool modulation = true;
};

struct ForwardTrace {
  std::vector<Var> queue;        // z_meta slot first, then each class token Ree consumed
  std::vector<Var> exit_logits;  // [B, K] for each exit within budget
  std::vector<int> exit_blocks;  // block index of each recorded exit
  // Indexed by block l - 1. `modulated` is left invalid where Ree did not run.
  std::vector<Var> block_inputs;  // z^{l-1} as fed to block l
  std::vector<Var> class_tokens;  // original z_cls^l [B, 1, d], before modulation
  std::vector<Var> modulated;     // m^l [B, q, d]
  Var tokens;                     // z^0
  int ree_calls = 0;
  int budget = 0;
};

/// Full exit-aware forward over blocks 1..budget of `model`.
ForwardTrace forward_with_exits(const ModelParamsT<Var>& model, const BackboneConfig& cfg, const ExitSchedule& schedule,
                                const Tensor& images, int budget, const ForwardOptions& options = {});

/// Mean-over-heads attention of the block-l query row to patch tokens 1..n,
/// one row per sample. A variant is empty when it is undefined at that block.
struct AttentionMaps {
  Tensor x;  // query z_cls^{l-1}
  Tensor m;  // query m_l^l
  Tensor c;  // query m_0^l + z_cls^l
};

/// First row of the block-l attention over [query, z_1..z_n^{l-1}], self entry removed.
Tensor query_attention_map(const Var& query, const Var& block_input, const BlockParamsT<Var>& block, int heads);

AttentionMaps attention_maps(const ForwardTrace& trace, const ModelParamsT<Var>& model, const BackboneConfig& cfg,
                             int block);

}  // namespace reefl
