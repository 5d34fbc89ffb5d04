// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "reefl/error.hpp"
#include "support.hpp"

using namespace reefl;
using reefl::testing::random_tensor;
using reefl::testing::tiny_config;

namespace {

struct Fixture {
  BackboneConfig cfg;
  ExitSchedule schedule;
  GlobalModel model;
  Tensor images;

  Fixture(int depth, std::vector<int> exits, bool everywhere = true, int heads = 2, std::uint64_t seed = 1)
      : cfg(tiny_config(depth, 16, heads)), schedule{std::move(exits), everywhere} {
    model = init_global_model(cfg, schedule, seed);
    std::mt19937_64 rng(seed + 100);
    reefl::testing::jitter(model.params, rng, 0.2);
    images = random_tensor({2, 3, 8, 8}, rng);
  }
};

}  // namespace

TEST_CASE("ree sizing") {
  CHECK(kReeHeads == 8);
  CHECK(kReeAttnWidth == 16);
  CHECK(ree_mlp_hidden(32) == 43);
  CHECK(ree_mlp_hidden(16) == 22);
  std::mt19937_64 rng(1);
  const BackboneConfig cfg = tiny_config(4, 32, 4);
  const ReeParams r = init_ree(cfg, ExitSchedule{{2, 4}, true}, rng);
  CHECK(r.block.attn.wq.shape() == Shape{32, 16});
  CHECK(r.block.attn.wo.shape() == Shape{16, 32});
  CHECK(r.block.fc1_w.shape() == Shape{32, 43});
  CHECK(r.pos.shape() == Shape{5, 32});
  const ReeParams e = init_ree(cfg, ExitSchedule{{2, 4}, false}, rng);
  CHECK(e.pos.shape() == Shape{3, 32});
}

TEST_CASE("exit schedules") {
  const ExitSchedule s = ExitSchedule::every_k(12, 3);
  CHECK(s.exit_blocks == std::vector<int>{3, 6, 9, 12});
  CHECK(s.exits_within(7) == 2);
  CHECK(s.is_exit(9));
  CHECK_FALSE(s.is_exit(8));
  CHECK_NOTHROW(s.validate(12));
  CHECK_THROWS_AS((ExitSchedule{{3, 6}, true}.validate(12)), Error);
  CHECK_THROWS_AS((ExitSchedule{{6, 3, 12}, true}.validate(12)), Error);
  CHECK_THROWS_AS((ExitSchedule{{}, true}.validate(12)), Error);
  CHECK_THROWS_AS((ExitSchedule{{0, 12}, true}.validate(12)), Error);
}

TEST_CASE("ree forward keeps the queue length") {
  Fixture f(2, {1, 2});
  Graph g(false);
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  std::mt19937_64 rng(2);
  std::vector<Var> queue{g.constant(random_tensor({2, 1, 16}, rng)), g.constant(random_tensor({2, 1, 16}, rng))};
  CHECK(ree_forward(queue, v.ree).shape() == Shape{2, 2, 16});
}

TEST_CASE("ree forward with zeroed residual branches adds the positional rows") {
  Fixture f(2, {1, 2});
  ReeParams& r = f.model.params.ree;
  r.block.attn.wo.fill(0.0);
  r.block.attn.bo.fill(0.0);
  r.block.fc2_w.fill(0.0);
  r.block.fc2_b.fill(0.0);
  Graph g(false);
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor({1, 1, 16}, rng);
  const Tensor b = random_tensor({1, 1, 16}, rng);
  const Tensor m = ree_forward({g.constant(a), g.constant(b)}, v.ree).value();
  for (std::size_t j = 0; j < 16; ++j) {
    CHECK(m[j] == a[j] + r.pos[j]);
    CHECK(m[16 + j] == b[j] + r.pos[16 + j]);
  }
}

TEST_CASE("a queue longer than the positional table is a schedule error") {
  Fixture f(2, {1, 2});
  Graph g(false);
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  std::vector<Var> queue(4, g.constant(Tensor({1, 1, 16}, 0.1)));
  try {
    (void)ree_forward(queue, v.ree);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kSchedule);
  }
}

TEST_CASE("two recurrent applications of the shared block accumulate gradients") {
  Fixture f(2, {1, 2});
  std::vector<Tensor> flat;
  visit_block(f.model.params.ree.block, "", [&](const std::string&, const Tensor& t) { flat.push_back(t); });
  flat.push_back(f.model.params.ree.pos);
  std::mt19937_64 rng(4);
  const Tensor q0 = random_tensor({2, 1, 16}, rng);
  const Tensor q1 = random_tensor({2, 1, 16}, rng);
  const Tensor q2 = random_tensor({2, 1, 16}, rng);
  const Tensor w = random_tensor({2, 3, 16}, rng);
  auto loss = [&](Graph& g, std::span<const Var> x) {
    ReeParamsT<Var> r;
    std::size_t i = 0;
    visit_block(r.block, "", [&](const std::string&, Var& t) { t = x[i++]; });
    r.pos = x[i];
    r.z_meta = g.constant(Tensor({16}));
    Var m1 = ree_forward({g.constant(q0), g.constant(q1)}, r);
    Var m2 = ree_forward({g.constant(q0), slice(m1, 1, 1, 2), g.constant(q2)}, r);
    return sum(mul(m2, g.constant(w)));
  };
  const GradCheckReport rep = grad_check(loss, flat);
  INFO("rel " << rep.max_rel_error);
  CHECK(rep.passed);
}

TEST_CASE("classifier reads the sum of meta and class tokens") {
  Fixture f(2, {1, 2});
  f.model.params.classifier.ln_beta.fill(0.0);
  Graph g(false);
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  std::mt19937_64 rng(5);
  const Tensor z = random_tensor({2, 1, 16}, rng);
  Tensor neg = z;
  for (auto& x : neg.data()) x = -x;
  const Tensor logits = classify_exit(g.constant(neg), g.constant(z), v.classifier).value();
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t k = 0; k < 4; ++k) CHECK(logits[b * 4 + k] == f.model.params.classifier.b[k]);
  }
  const Tensor a = random_tensor({2, 1, 16}, rng);
  Tensor total = a;
  for (std::size_t i = 0; i < total.numel(); ++i) total[i] += z[i];
  const Tensor l1 = classify_exit(g.constant(a), g.constant(z), v.classifier).value();
  const Tensor l2 = classify_exit(g.constant(total), g.constant(Tensor({2, 1, 16})), v.classifier).value();
  CHECK(reefl::testing::max_abs_diff(l1, l2) < 1e-12);
}

TEST_CASE("classifier gradient reaches both inputs") {
  Fixture f(2, {1, 2});
  std::mt19937_64 rng(6);
  const int labels[] = {1, 3};
  auto loss = [&](Graph& g, std::span<const Var> x) {
    ModelParamsT<Var> v = bind_model(g, f.model.params);
    return cross_entropy(classify_exit(x[0], x[1], v.classifier), labels);
  };
  const GradCheckReport r = grad_check(loss, {random_tensor({2, 1, 16}, rng), random_tensor({2, 1, 16}, rng)});
  CHECK(r.passed);
  Graph g;
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  Var m0 = g.param(random_tensor({2, 1, 16}, rng));
  Var z = g.param(random_tensor({2, 1, 16}, rng));
  g.backward(cross_entropy(classify_exit(m0, z, v.classifier), labels));
  CHECK(m0.grad() == z.grad());
  double norm = 0.0;
  const Tensor gm = m0.grad();
  for (double x : gm.data()) norm += x * x;
  CHECK(norm > 0.0);
}

TEST_CASE("modulate replaces only the class-token row") {
  std::mt19937_64 rng(7);
  Graph g(false);
  const Tensor z = random_tensor({2, 5, 16}, rng);
  const Tensor m = random_tensor({2, 1, 16}, rng);
  const Tensor out = modulate(g.constant(z), g.constant(m)).value();
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t j = 0; j < 16; ++j) CHECK(out[b * 80 + j] == m[b * 16 + j]);
    for (std::size_t j = 16; j < 80; ++j) CHECK(out[b * 80 + j] == z[b * 80 + j]);
  }
  Var zv = g.constant(z);
  CHECK(modulate(zv, slice(zv, 1, 0, 1)).value() == z);
}

TEST_CASE("disabling modulation changes later blocks but not the first exit") {
  Fixture f(2, {1, 2});
  Graph g(false);
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  ForwardTrace on = forward_with_exits(v, f.cfg, f.schedule, f.images, 2, {true});
  ForwardTrace off = forward_with_exits(v, f.cfg, f.schedule, f.images, 2, {false});
  CHECK(on.exit_logits[0].value() == off.exit_logits[0].value());
  CHECK(on.class_tokens[0].value() == off.class_tokens[0].value());
  CHECK_FALSE(on.block_inputs[1].value() == off.block_inputs[1].value());
  CHECK_FALSE(on.exit_logits[1].value() == off.exit_logits[1].value());
}

TEST_CASE("exit logits use the class token from before modulation") {
  Fixture f(3, {1, 2, 3});
  Graph g(false);
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  ForwardTrace t = forward_with_exits(v, f.cfg, f.schedule, f.images, 3);
  for (int e = 0; e < 3; ++e) {
    const auto i = static_cast<std::size_t>(e);
    const Tensor expect = classify_exit(slice(t.modulated[i], 1, 0, 1), t.class_tokens[i], v.classifier).value();
    CHECK(t.exit_logits[i].value() == expect);
    const std::size_t q = t.modulated[i].shape()[1];
    if (e < 2) CHECK(slice(t.block_inputs[i + 1], 1, 0, 1).value() == slice(t.modulated[i], 1, q - 1, q).value());
  }
}

TEST_CASE("exit counting under a budget") {
  BackboneConfig cfg = tiny_config(12, 16, 2);
  ExitSchedule all = ExitSchedule::every_k(12, 1);
  GlobalModel m = init_global_model(cfg, all, 2);
  std::mt19937_64 rng(8);
  const Tensor img = random_tensor({1, 3, 8, 8}, rng);
  Graph g(false);
  ModelParamsT<Var> v = bind_model(g, m.params);
  ForwardTrace t = forward_with_exits(v, cfg, all, img, 3);
  CHECK(t.exit_logits.size() == 3);
  CHECK(t.queue.size() == 4);
  CHECK(t.ree_calls == 3);

  ExitSchedule sparse{{3, 6, 9, 12}, false};
  GlobalModel m2 = init_global_model(cfg, sparse, 3);
  Graph g2(false);
  ModelParamsT<Var> v2 = bind_model(g2, m2.params);
  ForwardTrace t2 = forward_with_exits(v2, cfg, sparse, img, 12);
  CHECK(t2.ree_calls == 4);
  CHECK(t2.queue.size() == 5);
  CHECK(t2.exit_logits.size() == 4);
  CHECK(t2.exit_blocks == std::vector<int>{3, 6, 9, 12});
}

TEST_CASE("exit logits depend only on blocks up to the exit") {
  Fixture f(4, {2, 4});
  ModelParams changed = f.model.params;
  for (auto& x : changed.backbone.blocks[2].fc1_w.data()) x += 0.5;
  for (auto& x : changed.backbone.blocks[3].attn.wq.data()) x -= 0.5;
  for (bool mod : {false, true}) {
    Graph g(false);
    ModelParamsT<Var> a = bind_model(g, f.model.params);
    ModelParamsT<Var> b = bind_model(g, changed);
    ForwardTrace ta = forward_with_exits(a, f.cfg, f.schedule, f.images, 4, {mod});
    ForwardTrace tb = forward_with_exits(b, f.cfg, f.schedule, f.images, 4, {mod});
    ForwardTrace short_run = forward_with_exits(a, f.cfg, f.schedule, f.images, 2, {mod});
    CHECK(ta.exit_logits[0].value() == tb.exit_logits[0].value());
    CHECK(ta.exit_logits[0].value() == short_run.exit_logits[0].value());
    CHECK_FALSE(ta.exit_logits[1].value() == tb.exit_logits[1].value());
  }
}

TEST_CASE("forward argument errors") {
  Fixture f(2, {1, 2});
  Graph g(false);
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  try {
    (void)forward_with_exits(v, f.cfg, f.schedule, Tensor(), 2);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInput);
  }
  Fixture late(3, {2, 3});
  Graph g2(false);
  ModelParamsT<Var> v2 = bind_model(g2, late.model.params);
  try {
    (void)forward_with_exits(v2, late.cfg, late.schedule, late.images, 1);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kBudget);
  }
}

TEST_CASE("exit-only mode with an exit at every block matches the recurrent mode bitwise") {
  Fixture a(3, {1, 2, 3}, true, 2, 9);
  GlobalModel b = a.model;
  b.schedule.ree_everywhere = false;
  Graph g(false);
  ModelParamsT<Var> va = bind_model(g, a.model.params);
  ModelParamsT<Var> vb = bind_model(g, b.params);
  ForwardTrace ta = forward_with_exits(va, a.cfg, a.model.schedule, a.images, 3);
  ForwardTrace tb = forward_with_exits(vb, a.cfg, b.schedule, a.images, 3);
  for (std::size_t e = 0; e < 3; ++e) CHECK(ta.exit_logits[e].value() == tb.exit_logits[e].value());
}

TEST_CASE("attention maps") {
  Fixture f(3, {1, 3}, true, 1);
  Graph g(false);
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  ForwardTrace t = forward_with_exits(v, f.cfg, f.schedule, f.images, 3);
  for (int l = 1; l <= 3; ++l) {
    const AttentionMaps maps = attention_maps(t, v, f.cfg, l);
    for (const Tensor* m : {&maps.x, &maps.m, &maps.c}) {
      CHECK(m->shape() == Shape{2, 4});
      for (std::size_t b = 0; b < 2; ++b) {
        double total = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
          const double w = (*m)[b * 4 + j];
          CHECK(w >= 0.0);
          CHECK(w <= 1.0);
          total += w;
        }
        CHECK(total <= 1.0 + 1e-12);
      }
    }
    // Direct recomputation of the first attention row with the previous class token as query.
    const auto i = static_cast<std::size_t>(l - 1);
    const BlockParamsT<Var>& blk = v.backbone.blocks[i];
    Var prev = l == 1 ? slice(t.tokens, 1, 0, 1) : t.class_tokens[i - 1];
    const Var parts[] = {prev, slice(t.block_inputs[i], 1, 1, 5)};
    Var seq = concat(parts, 1);
    const Tensor att = msa_forward(layer_norm(seq, blk.ln1_gamma, blk.ln1_beta), blk.attn, 1).attention.value();
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t j = 0; j < 4; ++j) CHECK(maps.x[b * 4 + j] == doctest::Approx(att[b * 25 + j + 1]).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(attention_maps(t, v, f.cfg, 4), Error);
  CHECK_THROWS_AS(attention_maps(t, v, f.cfg, 0), Error);
}

TEST_CASE("full exit loss gradient on a two-block model") {
  Fixture f(2, {1, 2});
  const std::vector<Tensor> params = reefl::testing::flat_params(f.model.params);
  const int labels[] = {0, 3};
  auto loss = [&](Graph& g, std::span<const Var> x) {
    (void)g;
    ModelParamsT<Var> v = model_from_vars(x, 2);
    ForwardTrace t = forward_with_exits(v, f.cfg, f.schedule, f.images, 2);
    return add(cross_entropy(t.exit_logits[0], labels), cross_entropy(t.exit_logits[1], labels));
  };
  const GradCheckReport r = grad_check(loss, params);
  INFO("rel " << r.max_rel_error);
  CHECK(r.passed);
}
