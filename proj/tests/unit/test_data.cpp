// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "reefl/binary_io.hpp"
#include "reefl/error.hpp"
#include "support.hpp"

using namespace reefl;

namespace {

std::vector<int> balanced_labels(int classes, int per_class) {
  std::vector<int> out;
  for (int k = 0; k < classes; ++k) out.insert(out.end(), static_cast<std::size_t>(per_class), k);
  return out;
}

double label_entropy(const IndexList& part, const std::vector<int>& labels, int classes) {
  std::vector<double> h(static_cast<std::size_t>(classes), 0.0);
  for (std::size_t i : part) h[static_cast<std::size_t>(labels[i])] += 1.0;
  double e = 0.0;
  for (double c : h) {
    if (c > 0.0) {
      const double p = c / static_cast<double>(part.size());
      e -= p * std::log(p);
    }
  }
  return e;
}

}  // namespace

TEST_CASE("synthetic data counts, range and determinism") {
  SynthSpec s;
  const Dataset d = synth_dataset(s, 3);
  REQUIRE(d.size() == 400);
  std::vector<int> counts(4, 0);
  for (const Example& e : d) {
    ++counts[static_cast<std::size_t>(e.label)];
    CHECK(e.image.shape() == Shape{3, 16, 16});
    for (double v : e.image.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK(counts == std::vector<int>{100, 100, 100, 100});
  const Dataset again = synth_dataset(s, 3);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(again[i].image == d[i].image);
  CHECK_THROWS_AS(synth_dataset(SynthSpec{1, 10, 3, 8, 0.1}, 1), Error);
}

TEST_CASE("zero noise makes examples of a class identical") {
  SynthSpec s;
  s.noise = 0.0;
  s.per_class = 5;
  const Dataset d = synth_dataset(s, 4);
  for (const Example& e : d) {
    const Example& first = d[static_cast<std::size_t>(e.label * 5)];
    CHECK(e.image == first.image);
  }
  CHECK_FALSE(d[0].image == d[5].image);
}

TEST_CASE("centralized training on a two-block model separates the synthetic classes") {
  const Dataset d = reefl::testing::tiny_dataset(100, 8, 11);
  IndexList all(d.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::mt19937_64 split_rng(1);
  auto [train, test] = split_train_test(all, 0.8, split_rng);
  const BackboneConfig cfg = reefl::testing::tiny_config(2, 32, 4);
  const ExitSchedule sched{{2}, true};
  GlobalModel m = init_global_model(cfg, sched, 2);
  TrainConfig tc;
  tc.total_rounds = 200;
  std::mt19937_64 rng(3);
  RunningEstimate est;
  double acc = 0.0;
  int epoch = 1;
  for (; epoch <= 200 && acc <= 0.8; ++epoch) {
    LocalResult r = local_train(m.params, cfg, sched, d, train, 2, tc, epoch, est, rng);
    m.params = r.params;
    est = r.estimate;
    acc = evaluate(m, d, test)[0];
  }
  INFO("epochs " << epoch - 1 << " accuracy " << acc);
  CHECK(acc > 0.8);
}

TEST_CASE("lda partition is a permutation of the example indices") {
  const std::vector<int> labels = balanced_labels(4, 50);
  const auto parts = lda_partition(labels, {7, 0.5, 9});
  REQUIRE(parts.size() == 7);
  std::vector<std::size_t> all;
  for (const auto& p : parts) {
    CHECK_FALSE(p.empty());
    all.insert(all.end(), p.begin(), p.end());
  }
  std::sort(all.begin(), all.end());
  REQUIRE(all.size() == labels.size());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
}

TEST_CASE("lda partition needs at least one example per client") {
  const std::vector<int> labels = balanced_labels(2, 2);
  try {
    (void)lda_partition(labels, {5, 1.0, 1});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kPartition);
  }
}

TEST_CASE("large alpha gives near-uniform label histograms") {
  const std::vector<int> labels = balanced_labels(4, 2000);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto parts = lda_partition(labels, {10, 1000.0, seed});
    for (const auto& p : parts) {
      std::vector<double> h(4, 0.0);
      for (std::size_t i : p) h[static_cast<std::size_t>(labels[i])] += 1.0;
      const double uniform = static_cast<double>(p.size()) / 4.0;
      for (double c : h) CHECK(std::abs(c - uniform) / uniform < 0.2);
    }
  }
}

TEST_CASE("tiny alpha concentrates each client on one class") {
  const std::vector<int> labels = balanced_labels(10, 100);
  std::vector<double> shares;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& p : lda_partition(labels, {10, 0.01, seed})) {
      std::vector<double> h(10, 0.0);
      for (std::size_t i : p) h[static_cast<std::size_t>(labels[i])] += 1.0;
      shares.push_back(*std::max_element(h.begin(), h.end()) / static_cast<double>(p.size()));
    }
  }
  std::nth_element(shares.begin(), shares.begin() + static_cast<std::ptrdiff_t>(shares.size() / 2), shares.end());
  CHECK(shares[shares.size() / 2] > 0.9);
}

TEST_CASE("mean label entropy grows with alpha") {
  const std::vector<int> labels = balanced_labels(4, 100);
  std::vector<double> means;
  for (double alpha : {0.1, 1.0, 1000.0}) {
    double total = 0.0;
    int n = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      for (const auto& p : lda_partition(labels, {10, alpha, seed})) {
        total += label_entropy(p, labels, 4);
        ++n;
      }
    }
    means.push_back(total / n);
  }
  CHECK(means[0] <= means[1]);
  CHECK(means[1] <= means[2]);
}

TEST_CASE("dirichlet draws are finite probability vectors for tiny alpha") {
  std::mt19937_64 rng(5);
  for (double alpha : {1e-3, 0.01, 1.0, 100.0}) {
    const auto p = sample_dirichlet(alpha, 6, rng);
    double total = 0.0;
    for (double v : p) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("train/test split sizes") {
  std::mt19937_64 rng(6);
  IndexList ten(10);
  for (std::size_t i = 0; i < 10; ++i) ten[i] = i * 3;
  auto [train, test] = split_train_test(ten, 0.8, rng);
  CHECK(train.size() == 8);
  CHECK(test.size() == 2);
  std::set<std::size_t> seen(train.begin(), train.end());
  for (std::size_t i : test) CHECK(seen.insert(i).second);
  CHECK(seen == std::set<std::size_t>(ten.begin(), ten.end()));

  auto [a, b] = split_train_test(IndexList{4, 9}, 0.8, rng);
  CHECK(a.size() == 1);
  CHECK(b.size() == 1);
  try {
    (void)split_train_test(IndexList{1}, 0.8, rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kSplit);
  }
}

TEST_CASE("split is deterministic in the generator state") {
  IndexList items(20);
  for (std::size_t i = 0; i < 20; ++i) items[i] = i;
  std::mt19937_64 r1(7), r2(7);
  CHECK(split_train_test(items, 0.75, r1) == split_train_test(items, 0.75, r2));
}

TEST_CASE("dataset file round trip and pixel scaling") {
  Dataset d;
  Tensor img({1, 2, 2}, 0.0);
  img[1] = 1.0;
  img[2] = 128.0 / 255.0;
  d.push_back({img, 2});
  d.push_back({Tensor({1, 2, 2}, 1.0), 0});
  const auto bytes = encode_dataset(d, 3);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "REEFLDS1");
  int k = 0;
  const Dataset back = decode_dataset(bytes, &k);
  CHECK(k == 3);
  REQUIRE(back.size() == 2);
  CHECK(back[0].label == 2);
  CHECK(back[0].image == d[0].image);
  CHECK(back[1].image == d[1].image);
  CHECK(back[0].image[0] == 0.0);
  CHECK(back[0].image[1] == 1.0);

  const auto path = (std::filesystem::temp_directory_path() / "reefl_data_test.bin").string();
  const Dataset synth = reefl::testing::tiny_dataset(3);
  save_dataset(path, synth, 4);
  const Dataset loaded = load_dataset(path);
  for (std::size_t i = 0; i < synth.size(); ++i) {
    CHECK(loaded[i].image == synth[i].image);
    CHECK(loaded[i].label == synth[i].label);
  }
  std::filesystem::remove(path);
}

TEST_CASE("pixel order in the file is height, width, channel") {
  Tensor img({2, 1, 2}, 0.0);  // [C, H, W]
  img.at({0, 0, 1}) = 1.0;     // channel 0, x = 1
  img.at({1, 0, 0}) = 1.0;     // channel 1, x = 0
  const auto bytes = encode_dataset(Dataset{{img, 0}}, 1);
  const std::size_t base = 8 + 5 * 4 + 4;
  CHECK(bytes[base + 0] == 0);
  CHECK(bytes[base + 1] == 255);
  CHECK(bytes[base + 2] == 255);
  CHECK(bytes[base + 3] == 0);
}

TEST_CASE("malformed dataset files") {
  const Dataset d = reefl::testing::tiny_dataset(1);
  const auto bytes = encode_dataset(d, 4);
  auto message = [](std::vector<std::uint8_t> b) -> std::string {
    try {
      (void)decode_dataset(std::move(b));
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kFormat);
      return e.what();
    }
    FAIL("expected an error");
    return {};
  };
  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  const std::string t = message(truncated);
  CHECK(t.find(std::to_string(bytes.size())) != std::string::npos);
  CHECK(t.find(std::to_string(bytes.size() - 10)) != std::string::npos);

  auto magic = bytes;
  magic[3] = 'x';
  CHECK(message(magic).find("magic") != std::string::npos);

  auto label = bytes;
  label[28] = 9;  // first record's label
  CHECK(message(label).find("offset 28") != std::string::npos);
}

TEST_CASE("partition manifest") {
  const std::string csv = partition_manifest_csv({{2, 0}, {1}});
  CHECK(csv == "client_id,example_index\n0,2\n0,0\n1,1\n");
}
