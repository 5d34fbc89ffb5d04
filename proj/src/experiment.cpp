// SPDX-License-Identifier: Apache-2.0
#include "reefl/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "reefl/error.hpp"

namespace reefl {
namespace {

// Seed streams for the setup phase (round 0).
constexpr std::uint64_t kDataStream = 0xDA7Aull << 32;
constexpr std::uint64_t kPartitionStream = 0x9A27ull << 32;
constexpr std::uint64_t kModelStream = 0x30DEull << 32;
constexpr std::uint64_t kSplitStream = 0x5B11ull << 32;

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

}  // namespace

Setup build_setup(const ExperimentConfig& cfg) {
  cfg.validate();
  Setup setup;
  Dataset data;
  if (cfg.data.source == "file") {
    int k = 0;
    data = load_dataset(cfg.data.path, &k);
    if (k != cfg.model.num_classes) {
      throw Error(ErrorKind::kConfig, "dataset has " + std::to_string(k) + " classes, model.num_classes is " +
                                          std::to_string(cfg.model.num_classes));
    }
    const Shape want{static_cast<std::size_t>(cfg.model.channels), static_cast<std::size_t>(cfg.model.image_size),
                     static_cast<std::size_t>(cfg.model.image_size)};
    if (data.empty() || data[0].image.shape() != want) {
      throw Error(ErrorKind::kConfig, "dataset images do not match model.channels/model.image_size");
    }
  } else {
    SynthSpec spec;
    spec.num_classes = cfg.model.num_classes;
    spec.per_class = cfg.data.per_class;
    spec.channels = cfg.model.channels;
    spec.image_size = cfg.model.image_size;
    spec.noise = cfg.data.noise;
    data = synth_dataset(spec, derive_seed(cfg.seed, 0, kDataStream));
  }
  const std::vector<int> labels = labels_of(data);
  setup.partition = lda_partition(labels, {cfg.federation.num_clients, cfg.data.alpha,
                                           derive_seed(cfg.seed, 0, kPartitionStream)});
  const ExitSchedule schedule = cfg.resolved_schedule();
  const std::vector<int> budgets = assign_budgets(cfg.federation.num_clients, schedule);
  for (std::size_t i = 0; i < setup.partition.size(); ++i) {
    ClientState client;
    client.id = static_cast<int>(i);
    client.budget = budgets[i];
    if (setup.partition[i].size() < 2) {
      client.train = setup.partition[i];
    } else {
      std::mt19937_64 rng(derive_seed(cfg.seed, 0, kSplitStream + i));
      auto [train, test] = split_train_test(setup.partition[i], cfg.data.split_ratio, rng);
      client.train = std::move(train);
      client.test = std::move(test);
    }
    setup.global_test.insert(setup.global_test.end(), client.test.begin(), client.test.end());
    setup.clients.push_back(std::move(client));
  }
  std::sort(setup.global_test.begin(), setup.global_test.end());
  if (setup.global_test.empty()) throw Error(ErrorKind::kConfig, "partition left no test examples");
  setup.data = std::make_shared<const Dataset>(std::move(data));
  setup.model = init_global_model(cfg.model, schedule, derive_seed(cfg.seed, 0, kModelStream));
  return setup;
}

Simulator make_simulator(const ExperimentConfig& cfg, Setup setup) {
  return Simulator(std::move(setup.model), std::move(setup.data), std::move(setup.clients), std::move(setup.global_test),
                   cfg.resolved_train(), cfg.federation, cfg.seed, resolve_threads(cfg.threads));
}

std::vector<RoundReport> run_experiment(const ExperimentConfig& cfg) {
  Simulator sim = make_simulator(cfg, build_setup(cfg));
  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);
  write_text(dir / "config.resolved", format_config(cfg));
  std::ostringstream metrics;
  metrics << metrics_csv_header(sim.model().schedule.num_exits()) << '\n';
  std::vector<RoundReport> reports = sim.run([&](const RoundReport& r) {
    if (r.evaluated) metrics << metrics_csv_row(r) << '\n';
  });
  write_text(dir / "metrics.csv", metrics.str());
  save_checkpoint((dir / "checkpoint.bin").string(), sim.model());
  return reports;
}

std::string attention_csv(const GlobalModel& model, const Dataset& data, const std::vector<std::size_t>& samples,
                          const ForwardOptions& options) {
  std::ostringstream os;
  os << "sample_id,block,variant,token_index,weight\n";
  char buf[32];
  for (std::size_t id : samples) {
    if (id >= data.size()) {
      throw Error(ErrorKind::kInput, "sample id " + std::to_string(id) + " outside dataset of " +
                                         std::to_string(data.size()));
    }
    const std::size_t one[] = {id};
    Graph graph(false);
    ModelParamsT<Var> vars = bind_model(graph, model.params);
    ForwardTrace trace =
        forward_with_exits(vars, model.config, model.schedule, stack_images(data, one), model.config.depth, options);
    for (int block = 1; block <= model.config.depth; ++block) {
      const AttentionMaps maps = attention_maps(trace, vars, model.config, block);
      const std::pair<const char*, const Tensor*> variants[] = {{"x", &maps.x}, {"m", &maps.m}, {"c", &maps.c}};
      for (const auto& [name, map] : variants) {
        if (map->empty()) continue;
        for (std::size_t j = 0; j < map->numel(); ++j) {
          std::snprintf(buf, sizeof(buf), "%.9g", (*map)[j]);
          os << id << ',' << block << ',' << name << ',' << (j + 1) << ',' << buf << '\n';
        }
      }
    }
  }
  return os.str();
}

}  // namespace reefl
