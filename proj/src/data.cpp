// SPDX-License-Identifier: Apache-2.0
#include "reefl/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "reefl/binary_io.hpp"
#include "reefl/error.hpp"

namespace reefl {
namespace {

constexpr char kDatasetMagic[] = "REEFLDS1";
constexpr int kMaxRedraws = 100;

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) throw Error(ErrorKind::kConfig, "synthetic data needs at least 2 classes");
  if (spec.per_class < 1 || spec.channels < 1 || spec.image_size < 1) {
    throw Error(ErrorKind::kConfig, "synthetic data dimensions must be positive");
  }
  if (spec.noise < 0.0) throw Error(ErrorKind::kConfig, "synthetic noise must be >= 0");
  std::mt19937_64 rng(seed);
  const Shape shape{static_cast<std::size_t>(spec.channels), static_cast<std::size_t>(spec.image_size),
                    static_cast<std::size_t>(spec.image_size)};
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<Tensor> patterns;
  for (int k = 0; k < spec.num_classes; ++k) {
    Tensor p(shape, 0.0);
    for (auto& v : p.data()) v = uniform(rng);
    patterns.push_back(std::move(p));
  }
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset data;
  data.reserve(static_cast<std::size_t>(spec.num_classes * spec.per_class));
  for (int k = 0; k < spec.num_classes; ++k) {
    for (int i = 0; i < spec.per_class; ++i) {
      Tensor img = patterns[static_cast<std::size_t>(k)];
      for (auto& v : img.data()) v = quantize(v + spec.noise * gauss(rng));
      data.push_back({std::move(img), k});
    }
  }
  return data;
}

std::vector<double> sample_dirichlet(double alpha, std::size_t k, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw Error(ErrorKind::kPartition, "Dirichlet concentration must be > 0");
  // log Gamma(a) draws as log Gamma(a + 1) + log(U) / a, which stays finite for tiny a.
  std::gamma_distribution<double> gamma(alpha + 1.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> logs(k);
  for (auto& l : logs) {
    double u = uniform(rng);
    while (u <= 0.0) u = uniform(rng);
    l = std::log(gamma(rng)) + std::log(u) / alpha;
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  std::vector<double> out(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = std::exp(logs[i] - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

std::vector<IndexList> lda_partition(std::span<const int> labels, const PartitionSpec& spec) {
  if (spec.num_clients < 1) throw Error(ErrorKind::kPartition, "need at least one client");
  if (!(spec.alpha > 0.0)) throw Error(ErrorKind::kPartition, "alpha must be > 0");
  const std::size_t clients = static_cast<std::size_t>(spec.num_clients);
  if (labels.size() < clients) {
    throw Error(ErrorKind::kPartition, std::to_string(labels.size()) + " examples cannot cover " +
                                           std::to_string(clients) + " clients");
  }
  int max_label = -1;
  for (int y : labels) {
    if (y < 0) throw Error(ErrorKind::kPartition, "negative label");
    max_label = std::max(max_label, y);
  }
  const std::size_t k = static_cast<std::size_t>(max_label + 1);
  std::mt19937_64 rng(spec.seed);

  std::vector<IndexList> by_class(k);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  for (auto& members : by_class) std::shuffle(members.begin(), members.end(), rng);

  std::vector<std::vector<double>> props(clients);
  for (auto& p : props) p = sample_dirichlet(spec.alpha, k, rng);

  auto assign = [&]() {
    std::vector<IndexList> parts(clients);
    for (std::size_t c = 0; c < k; ++c) {
      const IndexList& members = by_class[c];
      if (members.empty()) continue;
      double column = 0.0;
      for (const auto& p : props) column += p[c];
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t i = 0; i < clients; ++i) {
        cum += column > 0.0 ? props[i][c] / column : 1.0 / static_cast<double>(clients);
        std::size_t stop = i + 1 == clients
                               ? members.size()
                               : std::min(members.size(), static_cast<std::size_t>(std::llround(cum * static_cast<double>(members.size()))));
        stop = std::max(stop, start);
        parts[i].insert(parts[i].end(), members.begin() + static_cast<std::ptrdiff_t>(start),
                        members.begin() + static_cast<std::ptrdiff_t>(stop));
        start = stop;
      }
    }
    return parts;
  };

  std::vector<int> redraws(clients, 0);
  for (;;) {
    std::vector<IndexList> parts = assign();
    bool all_filled = true;
    for (std::size_t i = 0; i < clients; ++i) {
      if (!parts[i].empty()) continue;
      all_filled = false;
      if (++redraws[i] > kMaxRedraws) {
        throw Error(ErrorKind::kPartition, "client " + std::to_string(i) + " still empty after " +
                                               std::to_string(kMaxRedraws) + " Dirichlet redraws");
      }
      props[i] = sample_dirichlet(spec.alpha, k, rng);
    }
    if (all_filled) {
      for (auto& p : parts) std::sort(p.begin(), p.end());
      return parts;
    }
  }
}

std::pair<IndexList, IndexList> split_train_test(const IndexList& items, double ratio, std::mt19937_64& rng) {
  if (items.size() < 2) {
    throw Error(ErrorKind::kSplit, "need at least 2 examples to split, got " + std::to_string(items.size()));
  }
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error(ErrorKind::kSplit, "split ratio must lie in (0,1)");
  IndexList shuffled = items;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const double want = std::ceil(ratio * static_cast<double>(items.size()) - 1e-9);
  const std::size_t train = std::clamp<std::size_t>(static_cast<std::size_t>(want), 1, items.size() - 1);
  IndexList test(shuffled.begin() + static_cast<std::ptrdiff_t>(train), shuffled.end());
  shuffled.resize(train);
  return {std::move(shuffled), std::move(test)};
}

std::vector<int> labels_of(const Dataset& data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& e : data) out.push_back(e.label);
  return out;
}

Tensor stack_images(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorKind::kInput, "empty batch");
  const Shape& s = data.at(indices[0]).image.shape();
  Shape out_shape = s;
  out_shape.insert(out_shape.begin(), indices.size());
  Tensor out(out_shape, 0.0);
  const std::size_t n = shape_numel(s);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor& img = data.at(indices[b]).image;
    if (img.shape() != s) throw Error(ErrorKind::kInput, "images in a batch differ in shape");
    std::copy_n(img.data().data(), n, out.data().data() + b * n);
  }
  return out;
}

std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.at(i).label);
  return out;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data, int num_classes) {
  if (data.empty()) throw Error(ErrorKind::kInput, "cannot encode an empty dataset");
  const Shape& s = data[0].image.shape();
  if (s.size() != 3) throw Error(ErrorKind::kInput, "images must be [C,H,W]");
  const std::size_t channels = s[0], height = s[1], width = s[2];
  ByteWriter w;
  w.raw(kDatasetMagic);
  for (std::size_t v : {static_cast<std::size_t>(num_classes), channels, height, width, data.size()}) {
    w.i32(static_cast<std::int32_t>(v));
  }
  for (const auto& e : data) {
    if (e.image.shape() != s) throw Error(ErrorKind::kInput, "images differ in shape");
    if (e.label < 0 || e.label >= num_classes) throw Error(ErrorKind::kInput, "label outside [0,K)");
    w.i32(e.label);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        for (std::size_t c = 0; c < channels; ++c) {
          const double v = std::clamp(e.image[(c * height + y) * width + x], 0.0, 1.0);
          w.u8(static_cast<std::uint8_t>(std::lround(v * 255.0)));
        }
      }
    }
  }
  return w.bytes();
}

Dataset decode_dataset(std::vector<std::uint8_t> bytes, int* num_classes) {
  ByteReader r(std::move(bytes));
  const std::size_t magic_len = sizeof(kDatasetMagic) - 1;
  r.need(magic_len, "dataset magic");
  if (r.raw(magic_len) != kDatasetMagic) throw Error(ErrorKind::kFormat, "bad dataset magic at byte offset 0");
  const std::int32_t k = r.i32(), channels = r.i32(), height = r.i32(), width = r.i32(), n = r.i32();
  if (k < 1 || channels < 1 || height < 1 || width < 1 || n < 0) {
    throw Error(ErrorKind::kFormat, "invalid dataset header at byte offset 8");
  }
  const std::size_t pixels = static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
                             static_cast<std::size_t>(width);
  const std::size_t expected = r.offset() + static_cast<std::size_t>(n) * (4 + pixels);
  if (r.size() < expected) {
    throw Error(ErrorKind::kFormat, "truncated dataset: expected " + std::to_string(expected) + " bytes, got " +
                                        std::to_string(r.size()));
  }
  Dataset data;
  data.reserve(static_cast<std::size_t>(n));
  const Shape shape{static_cast<std::size_t>(channels), static_cast<std::size_t>(height),
                    static_cast<std::size_t>(width)};
  for (std::int32_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    const std::int32_t label = r.i32();
    if (label < 0 || label >= k) {
      throw Error(ErrorKind::kFormat, "label " + std::to_string(label) + " outside [0," + std::to_string(k) +
                                          ") at byte offset " + std::to_string(at));
    }
    Tensor img(shape, 0.0);
    for (std::int32_t y = 0; y < height; ++y) {
      for (std::int32_t x = 0; x < width; ++x) {
        for (std::int32_t c = 0; c < channels; ++c) {
          img[(static_cast<std::size_t>(c) * static_cast<std::size_t>(height) + static_cast<std::size_t>(y)) *
                  static_cast<std::size_t>(width) +
              static_cast<std::size_t>(x)] = static_cast<double>(r.u8()) / 255.0;
        }
      }
    }
    data.push_back({std::move(img), label});
  }
  if (r.remaining() != 0) {
    throw Error(ErrorKind::kFormat, "trailing bytes after byte offset " + std::to_string(r.offset()));
  }
  if (num_classes) *num_classes = k;
  return data;
}

void save_dataset(const std::string& path, const Dataset& data, int num_classes) {
  write_file(path, encode_dataset(data, num_classes));
}

Dataset load_dataset(const std::string& path, int* num_classes) { return decode_dataset(read_file(path), num_classes); }

std::string partition_manifest_csv(const std::vector<IndexList>& partition) {
  std::ostringstream os;
  os << "client_id,example_index\n";
  for (std::size_t c = 0; c < partition.size(); ++c) {
    for (auto i : partition[c]) os << c << ',' << i << '\n';
  }
  return os.str();
}

}  // namespace reefl
