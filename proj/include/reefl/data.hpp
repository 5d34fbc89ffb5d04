// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "reefl/tensor.hpp"

namespace reefl {

struct Example {
  Tensor image;  // [C, H, W], values in [0, 1]
  int label = 0;
};

using Dataset = std::vector<Example>;
using IndexList = std::vector<std::size_t>;

struct SynthSpec {
  int num_classes = 4;
  int per_class = 100;
  int channels = 3;
  int image_size = 16;
  /// Std of the per-pixel Gaussian noise added to each class pattern.
  double noise = 0.3;
};

/// Class-conditional images: a fixed random pattern per class plus pixel
/// noise, clamped to [0, 1] and quantised to multiples of 1/255. Examples are
/// grouped by class, `per_class` each.
Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed);

struct PartitionSpec {
  int num_clients = 10;
  double alpha = 1.0;
  std::uint64_t seed = 0;
};

/// Draws class proportions from Dir(alpha) per client, normalises each class
/// column over clients, and splits each class's (shuffled) examples at the
/// cumulative proportions. Clients left empty are redrawn, up to 100 times each.
std::vector<IndexList> lda_partition(std::span<const int> labels, const PartitionSpec& spec);

/// One Dirichlet(alpha * 1_k) draw; stable for small alpha.
std::vector<double> sample_dirichlet(double alpha, std::size_t k, std::mt19937_64& rng);

/// Shuffles then cuts min(ceil(ratio * n), n - 1) items into train, rest into test.
std::pair<IndexList, IndexList> split_train_test(const IndexList& items, double ratio, std::mt19937_64& rng);

std::vector<int> labels_of(const Dataset& data);
/// Stacks the selected images into [B, C, H, W].
Tensor stack_images(const Dataset& data, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices);

/// Record file: "REEFLDS1", then K, C, H, W, N as little-endian i32, then N
/// records of (i32 label, H*W*C u8 pixels in row-major H, W, C order).
std::vector<std::uint8_t> encode_dataset(const Dataset& data, int num_classes);
Dataset decode_dataset(std::vector<std::uint8_t> bytes, int* num_classes = nullptr);
void save_dataset(const std::string& path, const Dataset& data, int num_classes);
Dataset load_dataset(const std::string& path, int* num_classes = nullptr);

/// "client_id,example_index" rows.
std::string partition_manifest_csv(const std::vector<IndexList>& partition);

}  // namespace reefl
