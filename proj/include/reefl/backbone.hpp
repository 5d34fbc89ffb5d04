// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "reefl/autodiff.hpp"

namespace reefl {

struct BackboneConfig {
  int depth = 4;
  int hidden_dim = 32;
  int heads = 4;
  int image_size = 16;
  int patch_size = 4;
  int channels = 3;
  int num_classes = 4;

  int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int num_tokens() const { return num_patches() + 1; }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int mlp_dim() const { return 4 * hidden_dim; }
  /// Throws kConfig on any violated invariant.
  void validate() const;
};

/// Q/K/V project d -> width, O projects width -> d. Heads split `width`.
template <class T>
struct AttentionParamsT {
  T wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct BlockParamsT {
  T ln1_gamma, ln1_beta;
  AttentionParamsT<T> attn;
  T ln2_gamma, ln2_beta;
  T fc1_w, fc1_b, fc2_w, fc2_b;
};

template <class T>
struct BackboneParamsT {
  T patch_w, patch_b;  // [patch_dim, d], [d]
  T pos_embed;         // [n + 1, d]
  T class_token;       // [d]
  std::vector<BlockParamsT<T>> blocks;
};

using AttentionParams = AttentionParamsT<Tensor>;
using BlockParams = BlockParamsT<Tensor>;
using BackboneParams = BackboneParamsT<Tensor>;

template <class A, class F>
void visit_attention(A& a, const std::string& prefix, F&& f) {
  f(prefix + "wq", a.wq);
  f(prefix + "bq", a.bq);
  f(prefix + "wk", a.wk);
  f(prefix + "bk", a.bk);
  f(prefix + "wv", a.wv);
  f(prefix + "bv", a.bv);
  f(prefix + "wo", a.wo);
  f(prefix + "bo", a.bo);
}

template <class B, class F>
void visit_block(B& b, const std::string& prefix, F&& f) {
  f(prefix + "ln1.gamma", b.ln1_gamma);
  f(prefix + "ln1.beta", b.ln1_beta);
  visit_attention(b.attn, prefix + "attn.", f);
  f(prefix + "ln2.gamma", b.ln2_gamma);
  f(prefix + "ln2.beta", b.ln2_beta);
  f(prefix + "mlp.fc1.w", b.fc1_w);
  f(prefix + "mlp.fc1.b", b.fc1_b);
  f(prefix + "mlp.fc2.w", b.fc2_w);
  f(prefix + "mlp.fc2.b", b.fc2_b);
}

/// Tokenizer and embeddings only (the non-block part of the backbone).
template <class P, class F>
void visit_embeddings(P& p, F&& f) {
  f(std::string("backbone.patch.w"), p.patch_w);
  f(std::string("backbone.patch.b"), p.patch_b);
  f(std::string("backbone.pos_embed"), p.pos_embed);
  f(std::string("backbone.class_token"), p.class_token);
}

inline std::string block_prefix(std::size_t index) { return "backbone.block" + std::to_string(index) + "."; }

template <class P, class F>
void visit_backbone(P& p, F&& f) {
  visit_embeddings(p, f);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) visit_block(p.blocks[l], block_prefix(l), f);
}

/// Truncated normal (|x| <= 2 std), std 0.02.
Tensor trunc_normal(Shape shape, std::mt19937_64& rng, double stddev = 0.02);
AttentionParams init_attention(int dim, int width, std::mt19937_64& rng);
BlockParams init_block(int dim, int attn_width, int mlp_hidden, std::mt19937_64& rng);
BackboneParams init_backbone(const BackboneConfig& cfg, std::mt19937_64& rng);

/// [B, C, H, W] (or [C, H, W]) -> [B, n, C * p * p], patches in row-major grid order.
Tensor extract_patches(const Tensor& images, int patch_size);

/// Patch projection, class token at row 0, positional embedding added. -> [B, n + 1, d]
Var tokenize(const BackboneParamsT<Var>& params, const Tensor& images, const BackboneConfig& cfg);

struct MsaResult {
  Var output;     // [B, T, d]
  Var attention;  // [B, heads, T, T]
};

/// Scaled dot-product attention with scale 1 / sqrt(width / heads). `x` is
/// the already-normalised input.
MsaResult msa_forward(const Var& x, const AttentionParamsT<Var>& attn, int heads);

/// z + MSA(LN1(z)), then + MLP(LN2(.)). Shape preserving.
Var block_forward(const Var& z, const BlockParamsT<Var>& block, int heads, Var* attention = nullptr);

/// Called after each block with its 1-based index and raw output; the return
/// value becomes the next block's input.
using BlockHook = std::function<Var(int block, const Var& output)>;

struct PrefixResult {
  Var tokens;                // tokenizer output
  std::vector<Var> inputs;   // input to block l at index l - 1 (post-hook of the previous block)
  std::vector<Var> outputs;  // raw output of block l at index l - 1
};

/// Tokenizes then runs blocks 1..upto; throws kBudget if upto is outside [1, blocks].
PrefixResult prefix_forward(const BackboneParamsT<Var>& params, const BackboneConfig& cfg, const Tensor& images,
                            int upto, const BlockHook& hook = {});

}  // namespace reefl
