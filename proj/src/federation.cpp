// SPDX-License-Identifier: Apache-2.0
#include "reefl/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <sstream>
#include <thread>

#include "reefl/error.hpp"
#include "reefl/ops.hpp"

namespace reefl {

void FederationConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kConfig, what); };
  if (num_clients < 1) fail("federation.num_clients must be >= 1");
  if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) fail("federation.sample_fraction must lie in (0,1]");
  if (total_rounds < 1) fail("federation.total_rounds must be >= 1");
  if (eval_interval < 1) fail("federation.eval_interval must be >= 1");
}

std::vector<int> assign_budgets(int clients, const ExitSchedule& schedule) {
  const int exits = schedule.num_exits();
  if (exits < 1) throw Error(ErrorKind::kConfig, "schedule has no exits");
  if (clients < exits) {
    throw Error(ErrorKind::kConfig, std::to_string(clients) + " clients cannot fill " + std::to_string(exits) +
                                        " budget groups");
  }
  const int base = clients / exits;
  const int extra = clients % exits;
  std::vector<int> budgets;
  budgets.reserve(static_cast<std::size_t>(clients));
  for (int e = 0; e < exits; ++e) {
    const int size = base + (e >= exits - extra ? 1 : 0);
    budgets.insert(budgets.end(), static_cast<std::size_t>(size), schedule.exit_blocks[static_cast<std::size_t>(e)]);
  }
  return budgets;
}

std::vector<int> sample_clients(const std::vector<int>& pool, double fraction, std::mt19937_64& rng) {
  if (pool.empty()) throw Error(ErrorKind::kConfig, "empty client pool");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorKind::kConfig, "sample fraction must lie in (0,1]");
  const auto want = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
  const std::size_t count = std::clamp<std::size_t>(want, 1, pool.size());
  std::vector<int> shuffled = pool;
  // Partial Fisher-Yates with an explicit draw keeps the sample stable across standard libraries.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t span = shuffled.size() - i;
    const std::size_t j = i + static_cast<std::size_t>(rng() % span);
    std::swap(shuffled[i], shuffled[j]);
  }
  shuffled.resize(count);
  std::sort(shuffled.begin(), shuffled.end());
  return shuffled;
}

ModelParams slice_submodel(const GlobalModel& global, int budget) {
  const int depth = static_cast<int>(global.params.backbone.blocks.size());
  if (budget < 1 || budget > depth) {
    throw Error(ErrorKind::kBudget, "budget " + std::to_string(budget) + " outside [1," + std::to_string(depth) + "]");
  }
  ModelParams view = global.params;
  view.backbone.blocks.resize(static_cast<std::size_t>(budget));
  return view;
}

void aggregate(GlobalModel& global, const std::vector<ClientUpdate>& updates, TrainMode mode) {
  if (updates.empty()) throw Error(ErrorKind::kAggregation, "no client updates");
  std::vector<std::map<std::string, const Tensor*>> by_name;
  for (const auto& u : updates) {
    if (!(u.weight > 0.0)) throw Error(ErrorKind::kAggregation, "client weight must be positive");
    std::map<std::string, const Tensor*> names;
    for (const auto& [name, t] : named_tensors(u.params)) names.emplace(name, t);
    by_name.push_back(std::move(names));
  }
  for (auto& [name, target] : named_tensors(global.params)) {
    if (mode == TrainMode::kFrozen && is_backbone_group(param_group(name))) continue;
    std::vector<std::pair<const Tensor*, double>> contributors;
    double total = 0.0;
    for (std::size_t i = 0; i < updates.size(); ++i) {
      auto it = by_name[i].find(name);
      if (it == by_name[i].end()) continue;
      if (it->second->shape() != target->shape()) {
        throw Error(ErrorKind::kAggregation, "tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                                                 ", expected " + shape_str(target->shape()));
      }
      contributors.emplace_back(it->second, updates[i].weight);
      total += updates[i].weight;
    }
    if (contributors.empty()) continue;
    // ref + sum_i w_i (theta_i - ref): exact for one contributor or identical inputs.
    const Tensor& ref = *contributors.front().first;
    Tensor merged = ref;
    auto out = merged.data();
    for (const auto& [t, w] : contributors) {
      const double share = w / total;
      auto v = t->data();
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += share * (v[j] - ref[j]);
    }
    *target = std::move(merged);
  }
}

std::uint64_t comm_cost(const ModelParams& view, TrainMode mode) {
  std::uint64_t scalars = 0;
  for (const auto& [name, t] : named_tensors(view)) {
    if (mode == TrainMode::kFrozen && is_backbone_group(param_group(name))) continue;
    scalars += t->numel();
  }
  return 4 * scalars;
}

std::vector<double> evaluate(const GlobalModel& global, const Dataset& data, const IndexList& test,
                             const ForwardOptions& options, int batch_size) {
  if (test.empty()) throw Error(ErrorKind::kConfig, "empty test set");
  if (batch_size < 1) throw Error(ErrorKind::kConfig, "evaluation batch size must be >= 1");
  const int exits = global.schedule.num_exits();
  const int depth = global.config.depth;
  std::vector<std::size_t> correct(static_cast<std::size_t>(exits), 0);
  for (std::size_t start = 0; start < test.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(test.size(), start + static_cast<std::size_t>(batch_size));
    std::span<const std::size_t> batch(test.data() + start, stop - start);
    Graph graph(false);
    ModelParamsT<Var> vars = bind_model(graph, global.params);
    ForwardTrace trace = forward_with_exits(vars, global.config, global.schedule, stack_images(data, batch), depth, options);
    const std::vector<int> labels = gather_labels(data, batch);
    for (int e = 0; e < exits; ++e) {
      const Tensor& logits = trace.exit_logits[static_cast<std::size_t>(e)].value();
      const std::size_t k = logits.last_dim();
      for (std::size_t b = 0; b < labels.size(); ++b) {
        const double* row = logits.data().data() + b * k;
        const auto pred = static_cast<int>(std::max_element(row, row + k) - row);
        if (pred == labels[b]) ++correct[static_cast<std::size_t>(e)];
      }
    }
  }
  std::vector<double> acc;
  for (auto c : correct) acc.push_back(static_cast<double>(c) / static_cast<double>(test.size()));
  return acc;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t round, std::uint64_t stream) {
  // splitmix64 finaliser over a running mix.
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ round) ^ stream);
}

Simulator::Simulator(GlobalModel model, std::shared_ptr<const Dataset> data, std::vector<ClientState> clients,
                     IndexList global_test, TrainConfig train, FederationConfig federation, std::uint64_t seed,
                     int threads)
    : model_(std::move(model)),
      data_(std::move(data)),
      clients_(std::move(clients)),
      global_test_(std::move(global_test)),
      train_(train),
      federation_(federation),
      seed_(seed),
      threads_(threads < 1 ? 1 : threads) {
  train_.total_rounds = federation_.total_rounds;
  train_.validate();
  federation_.validate();
  if (clients_.empty()) throw Error(ErrorKind::kConfig, "no clients");
  for (const auto& c : clients_) {
    if (c.train.empty()) throw Error(ErrorKind::kConfig, "client " + std::to_string(c.id) + " has no training data");
    if (model_.schedule.exits_within(c.budget) < 1 || c.budget > model_.config.depth) {
      throw Error(ErrorKind::kBudget, "client " + std::to_string(c.id) + " budget " + std::to_string(c.budget) +
                                          " does not cover an exit");
    }
  }
}

RoundReport Simulator::run_round(int round) {
  RoundReport report;
  report.round = round;
  report.eta = eta_schedule(round, train_);
  report.lr = cosine_lr(round, train_);

  std::vector<int> pool;
  for (std::size_t i = 0; i < clients_.size(); ++i) {
    if (federation_.exclude_underbudget && clients_[i].budget != model_.config.depth) continue;
    pool.push_back(static_cast<int>(i));
  }
  std::mt19937_64 server_rng(derive_seed(seed_, static_cast<std::uint64_t>(round), kServerStream));
  report.sampled = sample_clients(pool, federation_.sample_fraction, server_rng);

  const std::size_t n = report.sampled.size();
  std::vector<LocalResult> results(n);
  std::vector<std::exception_ptr> failures(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t slot = next++; slot < n; slot = next++) {
      const ClientState& client = clients_[static_cast<std::size_t>(report.sampled[slot])];
      try {
        std::mt19937_64 rng(derive_seed(seed_, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client.id)));
        results[slot] = local_train(slice_submodel(model_, client.budget), model_.config, model_.schedule, *data_,
                                    client.train, client.budget, train_, round, client.estimate, rng);
      } catch (const Error& e) {
        failures[slot] = std::make_exception_ptr(Error(
            e.kind(), "round " + std::to_string(round) + ", client " + std::to_string(client.id) + ": " + e.what()));
      } catch (...) {
        failures[slot] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads_), n);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool_threads;
    for (std::size_t w = 0; w < workers; ++w) pool_threads.emplace_back(worker);
    for (auto& t : pool_threads) t.join();
  }
  for (auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  std::vector<ClientUpdate> updates;
  double loss_total = 0.0;
  for (std::size_t slot = 0; slot < n; ++slot) {
    ClientState& client = clients_[static_cast<std::size_t>(report.sampled[slot])];
    client.estimate = results[slot].estimate;
    const std::uint64_t bytes = comm_cost(results[slot].params, train_.mode);
    report.bytes_down += bytes;
    report.bytes_up += bytes;
    report.client_loss.push_back(results[slot].mean_loss);
    loss_total += results[slot].mean_loss;
    updates.push_back({std::move(results[slot].params), results[slot].num_samples});
  }
  report.train_loss_mean = loss_total / static_cast<double>(n);
  aggregate(model_, updates, train_.mode);
  if (train_.precision == Precision::kFloat32) {
    for (auto& [name, t] : named_tensors(model_.params)) t->round_to_float();
  }

  if (round % federation_.eval_interval == 0 || round == federation_.total_rounds) {
    report.evaluated = true;
    report.exit_accuracy = evaluate(model_, *data_, global_test_, {train_.modulation});
    report.mean_accuracy = std::accumulate(report.exit_accuracy.begin(), report.exit_accuracy.end(), 0.0) /
                           static_cast<double>(report.exit_accuracy.size());
  }
  return report;
}

std::vector<RoundReport> Simulator::run(const std::function<void(const RoundReport&)>& on_report) {
  std::vector<RoundReport> reports;
  for (int t = 1; t <= federation_.total_rounds; ++t) {
    reports.push_back(run_round(t));
    if (on_report) on_report(reports.back());
  }
  return reports;
}

std::string metrics_csv_header(int exits) {
  std::ostringstream os;
  os << "round";
  for (int e = 1; e <= exits; ++e) os << ",exit_" << e << "_acc";
  os << ",mean_acc,train_loss_mean,bytes_up,bytes_down,eta,lr";
  return os.str();
}

std::string metrics_csv_row(const RoundReport& r) {
  char buf[64];
  auto fixed = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  };
  auto precise = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << r.round;
  for (double a : r.exit_accuracy) os << ',' << fixed(a);
  os << ',' << fixed(r.mean_accuracy) << ',' << fixed(r.train_loss_mean) << ',' << r.bytes_up << ',' << r.bytes_down
     << ',' << precise(r.eta) << ',' << precise(r.lr);
  return os.str();
}

}  // namespace reefl
