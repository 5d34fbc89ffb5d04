// SPDX-License-Identifier: Apache-2.0
// reefl command-line front-end.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "reefl/config.hpp"
#include "reefl/error.hpp"
#include "reefl/experiment.hpp"

namespace {

using namespace reefl;

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path);
  out << text;
}

std::vector<std::string> extra_overrides(const CLI::App& app) {
  std::vector<std::string> out;
  for (const std::string& arg : app.remaining()) {
    if (arg.rfind("--", 0) != 0 || arg.find('=') == std::string::npos) {
      throw Error(ErrorKind::kConfig, "unexpected argument '" + arg + "' (overrides look like --section.key=value)");
    }
    out.push_back(arg);
  }
  return out;
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  try {
    cfg = parse_config(config_path, overrides);
  } catch (const Error& e) {
    std::cerr << "reefl run: " << e.what() << '\n';
    return kExitConfig;
  }
  const auto reports = run_experiment(cfg);
  for (const RoundReport& r : reports) {
    if (!r.evaluated) continue;
    std::fprintf(stderr, "round %d  mean_acc %.4f  train_loss %.4f\n", r.round, r.mean_accuracy, r.train_loss_mean);
  }
  std::cerr << "wrote " << (std::filesystem::path(cfg.output_dir) / "metrics.csv").string() << '\n';
  return 0;
}

int cmd_inspect(const std::string& path) {
  const GlobalModel model = load_checkpoint(path);
  const BackboneConfig& c = model.config;
  std::printf("depth=%d hidden_dim=%d heads=%d image_size=%d patch_size=%d channels=%d num_classes=%d\n", c.depth,
              c.hidden_dim, c.heads, c.image_size, c.patch_size, c.channels, c.num_classes);
  std::printf("exits=");
  for (std::size_t i = 0; i < model.schedule.exit_blocks.size(); ++i) {
    std::printf("%s%d", i ? "," : "", model.schedule.exit_blocks[i]);
  }
  std::printf(" ree_everywhere=%s\n", model.schedule.ree_everywhere ? "true" : "false");
  for (const auto& [name, tensor] : named_tensors(model.params)) {
    std::printf("%-32s %s\n", name.c_str(), shape_str(tensor->shape()).c_str());
  }
  std::printf("parameters=%zu\n", parameter_count(model.params));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ReeFL federated early-exit simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run an experiment; extra --section.key=value flags override the file");
  std::string run_config;
  run->add_option("-c,--config", run_config, "key=value config file");
  run->allow_extras();

  auto* attention = app.add_subcommand("attention", "dump Ree attention maps as CSV");
  std::string att_ckpt, att_data, att_config, att_out;
  std::vector<std::size_t> att_samples;
  bool att_no_mod = false;
  attention->add_option("--checkpoint", att_ckpt, "checkpoint file")->required();
  attention->add_option("--dataset", att_data, "dataset file");
  attention->add_option("--config", att_config, "experiment config whose data to use when --dataset is absent");
  attention->add_option("--samples", att_samples, "dataset indices")->required()->delimiter(',');
  attention->add_option("-o,--out", att_out, "output CSV (default stdout)");
  attention->add_flag("--no-modulation", att_no_mod, "forward without feature modulation");

  auto* inspect = app.add_subcommand("inspect-checkpoint", "print checkpoint header and tensors");
  std::string inspect_path;
  inspect->add_option("checkpoint", inspect_path)->required();

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset file");
  SynthSpec spec;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--classes", spec.num_classes)->check(CLI::PositiveNumber);
  gen->add_option("--per-class", spec.per_class)->check(CLI::PositiveNumber);
  gen->add_option("--channels", spec.channels)->check(CLI::PositiveNumber);
  gen->add_option("--image-size", spec.image_size)->check(CLI::PositiveNumber);
  gen->add_option("--noise", spec.noise)->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed);
  gen->add_option("-o,--out", gen_out)->required();

  auto* part = app.add_subcommand("partition", "write an LDA partition manifest CSV");
  std::string part_data, part_out;
  PartitionSpec pspec;
  part->add_option("--dataset", part_data)->required();
  part->add_option("--clients", pspec.num_clients)->check(CLI::PositiveNumber);
  part->add_option("--alpha", pspec.alpha)->check(CLI::PositiveNumber);
  part->add_option("--seed", pspec.seed);
  part->add_option("-o,--out", part_out, "output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) {
      std::vector<std::string> overrides;
      try {
        overrides = extra_overrides(*run);
      } catch (const Error& e) {
        std::cerr << "reefl run: " << e.what() << '\n';
        return kExitConfig;
      }
      return cmd_run(run_config, overrides);
    }
    if (*attention) {
      const GlobalModel model = load_checkpoint(att_ckpt);
      Dataset data;
      if (!att_data.empty()) {
        data = load_dataset(att_data);
      } else if (!att_config.empty()) {
        data = *build_setup(parse_config(att_config, {})).data;
      } else {
        throw Error(ErrorKind::kInput, "attention needs --dataset or --config");
      }
      write_output(att_out, attention_csv(model, data, att_samples, {!att_no_mod}));
      return 0;
    }
    if (*inspect) return cmd_inspect(inspect_path);
    if (*gen) {
      save_dataset(gen_out, synth_dataset(spec, gen_seed), spec.num_classes);
      return 0;
    }
    if (*part) {
      const Dataset data = load_dataset(part_data);
      write_output(part_out, partition_manifest_csv(lda_partition(labels_of(data), pspec)));
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "reefl: " << e.what() << '\n';
    return e.kind() == ErrorKind::kConfig ? kExitConfig : kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "reefl: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
