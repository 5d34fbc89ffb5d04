// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "reefl/error.hpp"
#include "support.hpp"

using namespace reefl;
using reefl::testing::random_tensor;

namespace {

std::vector<std::vector<std::vector<double>>> as_nested(const std::vector<Tensor>& logits) {
  std::vector<std::vector<std::vector<double>>> out;
  for (const Tensor& t : logits) {
    const std::size_t k = t.last_dim();
    std::vector<std::vector<double>> rows;
    for (std::size_t b = 0; b < t.rows(); ++b) rows.emplace_back(t.data().begin() + b * k, t.data().begin() + (b + 1) * k);
    out.push_back(std::move(rows));
  }
  return out;
}

double kd_value(const std::vector<Tensor>& logits, int teacher, double tau) {
  Graph g(false);
  std::vector<Var> vars;
  for (const Tensor& t : logits) vars.push_back(g.constant(t));
  return kd_loss(vars, teacher, tau).loss.value()[0];
}

}  // namespace

TEST_CASE("defaults") {
  const TrainConfig c;
  CHECK(c.batch_size == 32);
  CHECK(c.local_epochs == 1);
  CHECK(c.clip == 1.0);
  CHECK(c.zeta == 0.2);
  CHECK(c.tau == 1.0);
  CHECK(c.ramp_rounds == 300);
  CHECK(c.lr0 == 5e-2);
  CHECK(c.lr_min == 1e-3);
  CHECK(c.detach_teacher);
}

TEST_CASE("per-exit cross entropy") {
  Graph g(false);
  ForwardTrace t;
  t.exit_logits = {g.constant(Tensor({3, 4})), g.constant(Tensor({3, 4}))};
  const int labels[] = {0, 1, 2};
  const auto ce = exit_ce_losses(t, labels, 2);
  REQUIRE(ce.size() == 2);
  for (double v : ce) CHECK(v == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(exit_ce_losses(t, labels, 1).size() == 1);
  try {
    (void)exit_ce_losses(t, labels, 3);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kTrace);
  }
}

TEST_CASE("running estimate") {
  RunningEstimate est{{1.0}, true};
  const double zero[] = {0.0};
  CHECK(update_running_estimate(est, zero, 0.2).values[0] == doctest::Approx(0.8).epsilon(1e-15));
  const double fresh[] = {0.4, 0.7};
  CHECK(update_running_estimate(RunningEstimate{}, fresh, 0.2).values == std::vector<double>{0.4, 0.7});
  CHECK(update_running_estimate(RunningEstimate{{3.0, 1.0}, true}, fresh, 1.0).values == std::vector<double>{0.4, 0.7});
  CHECK_THROWS_AS(update_running_estimate(RunningEstimate{{1.0}, true}, fresh, 0.2), Error);
  CHECK_THROWS_AS(update_running_estimate(RunningEstimate{}, fresh, 0.0), Error);
}

TEST_CASE("running estimate decays geometrically toward a constant") {
  RunningEstimate est{{1.0, 2.0}, true};
  const double target[] = {0.0, 1.0};
  for (int t = 1; t <= 40; ++t) {
    est = update_running_estimate(est, target, 0.2);
    CHECK(std::abs(est.values[0] - std::pow(0.8, t)) < 1e-12);
    CHECK(std::abs(est.values[1] - (1.0 + std::pow(0.8, t))) < 1e-12);
  }
}

TEST_CASE("teacher selection") {
  CHECK(select_teacher({{0.5, 0.2, 0.9}, true}) == 1);
  CHECK(select_teacher({{0.3, 0.3}, true}) == 0);
  CHECK(select_teacher({{5.5, 5.2, 5.9}, true}) == 1);
  CHECK_THROWS_AS(select_teacher(RunningEstimate{}), Error);
}

TEST_CASE("distillation loss values") {
  CHECK(kd_value({Tensor::matrix({{std::log(3.0), 0.0}}), Tensor::matrix({{0.0, 0.0}})}, 0, 1.0) ==
        doctest::Approx(0.75 * std::log(1.5) + 0.25 * std::log(0.5)).epsilon(1e-12));
  std::mt19937_64 rng(1);
  const Tensor same = random_tensor({3, 5}, rng);
  CHECK(kd_value({same, same, same}, 1, 2.0) == 0.0);
  for (double tau : {0.5, 1.0, 2.0, 3.0}) {
    const std::vector<Tensor> logits{random_tensor({4, 5}, rng, 2.0), random_tensor({4, 5}, rng, 2.0),
                                     random_tensor({4, 5}, rng, 2.0)};
    CHECK(kd_value(logits, 2, tau) == doctest::Approx(reefl::testing::kd_loop(as_nested(logits), 2, tau)).epsilon(1e-10));
  }
}

TEST_CASE("distillation with a single exit is degenerate") {
  Graph g(false);
  const Var one[] = {g.constant(Tensor({2, 3}, 0.5))};
  const KdResult r = kd_loss(one, 0, 1.0);
  CHECK(r.degenerate);
  CHECK(r.loss.value()[0] == 0.0);
  const Var two[] = {one[0], one[0]};
  CHECK_THROWS_AS(kd_loss(two, 2, 1.0), Error);
  CHECK_THROWS_AS(kd_loss(two, 0, 0.0), Error);
}

TEST_CASE("teacher logits receive no distillation gradient") {
  std::mt19937_64 rng(2);
  Graph g;
  Var a = g.param(random_tensor({2, 4}, rng));
  Var b = g.param(random_tensor({2, 4}, rng));
  const Var logits[] = {a, b};
  g.backward(kd_loss(logits, 1, 2.0, true).loss);
  const Tensor gb = b.grad();
  for (double v : gb.data()) CHECK(v == 0.0);
  double norm = 0.0;
  const Tensor ga = a.grad();
  for (double v : ga.data()) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("distillation gradient without the stop-gradient matches finite differences") {
  std::mt19937_64 rng(3);
  auto loss = [](Graph&, std::span<const Var> p) {
    const Var logits[] = {p[0], p[1], p[2]};
    return kd_loss(logits, 1, 2.0, false).loss;
  };
  const GradCheckReport r =
      grad_check(loss, {random_tensor({2, 4}, rng), random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)});
  CHECK(r.passed);
}

TEST_CASE("eta ramp") {
  TrainConfig c;
  CHECK(eta_schedule(300, c) == 1.0);
  CHECK(eta_schedule(600, c) == 1.0);
  CHECK(eta_schedule(150, c) == 0.5);
  double prev = 0.0;
  for (int t = 1; t <= 400; ++t) {
    const double e = eta_schedule(t, c);
    CHECK(e >= prev);
    prev = e;
  }
  CHECK_THROWS_AS(eta_schedule(0, c), Error);
}

TEST_CASE("cosine learning rate") {
  TrainConfig c;
  c.total_rounds = 101;
  CHECK(cosine_lr(1, c) == 5e-2);
  CHECK(cosine_lr(101, c) == 1e-3);
  CHECK(cosine_lr(51, c) == doctest::Approx((5e-2 + 1e-3) / 2.0).epsilon(1e-12));
  double prev = 1.0;
  for (int t = 1; t <= 101; ++t) {
    const double lr = cosine_lr(t, c);
    CHECK(lr <= prev);
    prev = lr;
  }
  try {
    (void)cosine_lr(102, c);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kSchedule);
  }
}

TEST_CASE("sgd step clips each gradient value") {
  Tensor p = Tensor::vector({1.0, 1.0, 1.0});
  sgd_step(p, Tensor::vector({5.0, -0.5, -7.0}), 0.1, 1.0);
  CHECK(p[0] == doctest::Approx(0.9));
  CHECK(p[1] == doctest::Approx(1.05));
  CHECK(p[2] == doctest::Approx(1.1));
  CHECK_THROWS_AS(sgd_step(p, Tensor::vector({1.0}), 0.1, 1.0), Error);
}

namespace {

struct LocalFixture {
  BackboneConfig cfg = reefl::testing::tiny_config(2);
  ExitSchedule schedule{{1, 2}, true};
  GlobalModel model = init_global_model(cfg, schedule, 4);
  Dataset data = reefl::testing::tiny_dataset(4);
  IndexList train;
  TrainConfig tc;
  LocalFixture() {
    for (std::size_t i = 0; i < data.size(); ++i) train.push_back(i);
    tc.total_rounds = 10;
    tc.batch_size = 5;
    tc.precision = Precision::kFloat64;
  }
};

}  // namespace

TEST_CASE("local training reports a decomposed loss") {
  LocalFixture f;
  std::mt19937_64 rng(5);
  const LocalResult r = local_train(f.model.params, f.cfg, f.schedule, f.data, f.train, 2, f.tc, 5, {}, rng);
  CHECK(r.batches.size() == 4);
  CHECK(r.num_samples == 16.0);
  for (const BatchLoss& b : r.batches) {
    const double ce = std::accumulate(b.ce.begin(), b.ce.end(), 0.0);
    CHECK(std::abs(b.total - (ce + b.eta * b.kd)) < 1e-6);
    CHECK(b.ce.size() == 2);
  }
  CHECK(r.estimate.initialized);
  CHECK(r.estimate.values.size() == 2);
}

TEST_CASE("one batch of local training equals one explicit SGD step") {
  LocalFixture f;
  f.tc.kd_enabled = false;
  f.tc.batch_size = 16;
  std::mt19937_64 rng(6);
  std::mt19937_64 rng_copy = rng;
  const LocalResult r = local_train(f.model.params, f.cfg, f.schedule, f.data, f.train, 2, f.tc, 3, {}, rng);

  IndexList order = f.train;
  std::shuffle(order.begin(), order.end(), rng_copy);
  Graph g;
  ModelParamsT<Var> v = bind_model(g, f.model.params);
  ForwardTrace t = forward_with_exits(v, f.cfg, f.schedule, stack_images(f.data, order), 2);
  const auto labels = gather_labels(f.data, order);
  g.backward(add(cross_entropy(t.exit_logits[0], labels), cross_entropy(t.exit_logits[1], labels)));
  ModelParams expect = f.model.params;
  const auto vars = model_vars(v);
  auto named = named_tensors(expect);
  const double lr = cosine_lr(3, f.tc);
  for (std::size_t i = 0; i < vars.size(); ++i) sgd_step(*named[i].second, vars[i].grad(), lr, 1.0);
  auto got = named_tensors(r.params);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(*got[i].second == *named[i].second);
}

TEST_CASE("frozen training leaves the backbone untouched") {
  LocalFixture f;
  f.tc.mode = TrainMode::kFrozen;
  std::mt19937_64 rng(7);
  const LocalResult r = local_train(f.model.params, f.cfg, f.schedule, f.data, f.train, 2, f.tc, 2, {}, rng);
  const auto before = named_tensors(f.model.params);
  const auto after = named_tensors(r.params);
  bool ree_changed = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (is_backbone_group(param_group(before[i].first))) {
      CHECK(*before[i].second == *after[i].second);
    } else if (!(*before[i].second == *after[i].second)) {
      ree_changed = true;
    }
  }
  CHECK(ree_changed);
}

TEST_CASE("local training is deterministic and stores 32-bit values by default") {
  LocalFixture f;
  f.tc.precision = Precision::kFloat32;
  std::mt19937_64 a(8), b(8);
  const LocalResult ra = local_train(f.model.params, f.cfg, f.schedule, f.data, f.train, 2, f.tc, 1, {}, a);
  const LocalResult rb = local_train(f.model.params, f.cfg, f.schedule, f.data, f.train, 2, f.tc, 1, {}, b);
  for (const auto& [name, t] : named_tensors(ra.params)) {
    for (double v : t->data()) CHECK(v == static_cast<double>(static_cast<float>(v)));
  }
  CHECK(encode_checkpoint(GlobalModel{f.cfg, f.schedule, ra.params}) ==
        encode_checkpoint(GlobalModel{f.cfg, f.schedule, rb.params}));
}

TEST_CASE("a shallow budget trains only the exits it reaches") {
  LocalFixture f;
  std::mt19937_64 rng(9);
  ModelParams sub = f.model.params;
  sub.backbone.blocks.resize(1);
  const LocalResult r = local_train(sub, f.cfg, f.schedule, f.data, f.train, 1, f.tc, 1, {}, rng);
  for (const BatchLoss& b : r.batches) {
    CHECK(b.ce.size() == 1);
    CHECK(b.kd == 0.0);
  }
}

TEST_CASE("divergence names the batch") {
  LocalFixture f;
  f.model.params.classifier.w.fill(1e308);
  std::mt19937_64 rng(10);
  try {
    (void)local_train(f.model.params, f.cfg, f.schedule, f.data, f.train, 2, f.tc, 1, {}, rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDivergence);
    CHECK(std::string(e.what()).find("batch 0") != std::string::npos);
  }
}
