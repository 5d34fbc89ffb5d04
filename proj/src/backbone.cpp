// SPDX-License-Identifier: Apache-2.0
#include "reefl/backbone.hpp"

#include <cmath>

#include "reefl/error.hpp"
#include "reefl/ops.hpp"

namespace reefl {
namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Var linear(const Var& x, const Var& w, const Var& b) { return add(matmul(x, w), b); }

}  // namespace

void BackboneConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kConfig, what); };
  if (depth < 1) fail("model.depth must be >= 1");
  if (hidden_dim < 1) fail("model.hidden_dim must be >= 1");
  if (heads < 1 || hidden_dim % heads != 0) fail("model.heads must divide model.hidden_dim");
  if (patch_size < 1 || image_size < 1) fail("model.patch_size and model.image_size must be positive");
  if (image_size % patch_size != 0) fail("model.image_size must be divisible by model.patch_size");
  if (channels < 1) fail("model.channels must be >= 1");
  if (num_classes < 2) fail("model.num_classes must be >= 2");
}

Tensor trunc_normal(Shape shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape), 0.0);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) {
    double x = dist(rng);
    while (std::abs(x) > 2.0 * stddev) x = dist(rng);
    v = x;
  }
  return t;
}

AttentionParams init_attention(int dim, int width, std::mt19937_64& rng) {
  AttentionParams a;
  a.wq = trunc_normal({sz(dim), sz(width)}, rng);
  a.bq = Tensor({sz(width)}, 0.0);
  a.wk = trunc_normal({sz(dim), sz(width)}, rng);
  a.bk = Tensor({sz(width)}, 0.0);
  a.wv = trunc_normal({sz(dim), sz(width)}, rng);
  a.bv = Tensor({sz(width)}, 0.0);
  a.wo = trunc_normal({sz(width), sz(dim)}, rng);
  a.bo = Tensor({sz(dim)}, 0.0);
  return a;
}

BlockParams init_block(int dim, int attn_width, int mlp_hidden, std::mt19937_64& rng) {
  BlockParams b;
  b.ln1_gamma = Tensor({sz(dim)}, 1.0);
  b.ln1_beta = Tensor({sz(dim)}, 0.0);
  b.attn = init_attention(dim, attn_width, rng);
  b.ln2_gamma = Tensor({sz(dim)}, 1.0);
  b.ln2_beta = Tensor({sz(dim)}, 0.0);
  b.fc1_w = trunc_normal({sz(dim), sz(mlp_hidden)}, rng);
  b.fc1_b = Tensor({sz(mlp_hidden)}, 0.0);
  b.fc2_w = trunc_normal({sz(mlp_hidden), sz(dim)}, rng);
  b.fc2_b = Tensor({sz(dim)}, 0.0);
  return b;
}

BackboneParams init_backbone(const BackboneConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  BackboneParams p;
  const std::size_t d = sz(cfg.hidden_dim);
  p.patch_w = trunc_normal({sz(cfg.patch_dim()), d}, rng);
  p.patch_b = Tensor({d}, 0.0);
  p.pos_embed = trunc_normal({sz(cfg.num_tokens()), d}, rng);
  p.class_token = trunc_normal({d}, rng);
  for (int l = 0; l < cfg.depth; ++l) {
    p.blocks.push_back(init_block(cfg.hidden_dim, cfg.hidden_dim, cfg.mlp_dim(), rng));
  }
  return p;
}

Tensor extract_patches(const Tensor& images, int patch_size) {
  Shape s = images.shape();
  if (s.size() == 3) s.insert(s.begin(), 1);
  if (s.size() != 4) throw Error(ErrorKind::kDimension, "images must be [B,C,H,W], got " + shape_str(images.shape()));
  const std::size_t batch = s[0], channels = s[1], height = s[2], width = s[3];
  const std::size_t p = sz(patch_size);
  if (p == 0 || height % p != 0 || width % p != 0) {
    throw Error(ErrorKind::kConfig, "image " + std::to_string(height) + "x" + std::to_string(width) +
                                        " not divisible by patch size " + std::to_string(patch_size));
  }
  const std::size_t gh = height / p, gw = width / p;
  const std::size_t patch_dim = channels * p * p;
  Tensor out({batch, gh * gw, patch_dim}, 0.0);
  auto src = images.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        double* row = dst.data() + (b * gh * gw + py * gw + px) * patch_dim;
        std::size_t k = 0;
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t y = 0; y < p; ++y) {
            for (std::size_t x = 0; x < p; ++x) {
              row[k++] = src[((b * channels + c) * height + py * p + y) * width + px * p + x];
            }
          }
        }
      }
    }
  }
  return out;
}

Var tokenize(const BackboneParamsT<Var>& params, const Tensor& images, const BackboneConfig& cfg) {
  Tensor patches = extract_patches(images, cfg.patch_size);
  if (patches.dim(1) != sz(cfg.num_patches()) || patches.dim(2) != sz(cfg.patch_dim())) {
    throw Error(ErrorKind::kConfig, "image shape " + shape_str(images.shape()) + " does not match the model config");
  }
  Graph& g = params.patch_w.graph();
  const std::size_t batch = patches.dim(0);
  const std::size_t d = sz(cfg.hidden_dim);
  Var embedded = linear(g.constant(std::move(patches)), params.patch_w, params.patch_b);
  Var cls = expand(reshape(params.class_token, {1, d}), batch);
  const Var parts[] = {cls, embedded};
  return add(concat(parts, 1), params.pos_embed);
}

MsaResult msa_forward(const Var& x, const AttentionParamsT<Var>& attn, int heads) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw Error(ErrorKind::kDimension, "msa_forward expects [B,T,d], got " + shape_str(s));
  const std::size_t batch = s[0], tokens = s[1];
  const std::size_t width = attn.wq.shape()[1];
  const std::size_t h = sz(heads);
  if (h == 0 || width % h != 0) {
    throw Error(ErrorKind::kConfig, "attention width " + std::to_string(width) + " not divisible by " +
                                        std::to_string(heads) + " heads");
  }
  const std::size_t head_dim = width / h;
  auto split_heads = [&](const Var& t) {
    return reshape(permute(reshape(t, {batch, tokens, h, head_dim}), {0, 2, 1, 3}), {batch * h, tokens, head_dim});
  };
  Var q = split_heads(linear(x, attn.wq, attn.bq));
  Var k = split_heads(linear(x, attn.wk, attn.bk));
  Var v = split_heads(linear(x, attn.wv, attn.bv));
  Var scores = scale(batched_matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  Var weights = softmax(scores, -1);
  Var mixed = batched_matmul(weights, v);
  Var merged = reshape(permute(reshape(mixed, {batch, h, tokens, head_dim}), {0, 2, 1, 3}), {batch, tokens, width});
  return {linear(merged, attn.wo, attn.bo), reshape(weights, {batch, h, tokens, tokens})};
}

Var block_forward(const Var& z, const BlockParamsT<Var>& block, int heads, Var* attention) {
  MsaResult msa = msa_forward(layer_norm(z, block.ln1_gamma, block.ln1_beta), block.attn, heads);
  if (attention) *attention = msa.attention;
  Var mid = add(z, msa.output);
  Var hidden = gelu(linear(layer_norm(mid, block.ln2_gamma, block.ln2_beta), block.fc1_w, block.fc1_b));
  return add(mid, linear(hidden, block.fc2_w, block.fc2_b));
}

PrefixResult prefix_forward(const BackboneParamsT<Var>& params, const BackboneConfig& cfg, const Tensor& images,
                            int upto, const BlockHook& hook) {
  const int depth = static_cast<int>(params.blocks.size());
  if (upto < 1 || upto > depth) {
    throw Error(ErrorKind::kBudget, "prefix depth " + std::to_string(upto) + " outside [1," + std::to_string(depth) + "]");
  }
  PrefixResult result;
  result.tokens = tokenize(params, images, cfg);
  Var z = result.tokens;
  for (int l = 1; l <= upto; ++l) {
    result.inputs.push_back(z);
    Var out = block_forward(z, params.blocks[sz(l - 1)], cfg.heads);
    result.outputs.push_back(out);
    z = hook ? hook(l, out) : out;
  }
  return result;
}

}  // namespace reefl
