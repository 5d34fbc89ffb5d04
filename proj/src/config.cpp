// SPDX-License-Identifier: Apache-2.0
#include "reefl/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include "reefl/error.hpp"

namespace reefl {
namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw Error(ErrorKind::kConfig, "key '" + key + "': expected " + expected + ", got '" + value + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "an integer");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  if (v.empty()) bad_value(key, v, "a number");
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::string real_str(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class Get>
Field int_field(std::string key, Get member) {
  return {key,
          [key, member](ExperimentConfig& c, const std::string& v) {
            const long long x = parse_int(key, v);
            if (x < -2147483647LL || x > 2147483647LL) bad_value(key, v, "a 32-bit integer");
            member(c) = static_cast<int>(x);
          },
          [member](const ExperimentConfig& c) { return std::to_string(member(c)); }};
}

template <class Get>
Field real_field(std::string key, Get member) {
  return {key, [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_real(key, v); },
          [member](const ExperimentConfig& c) { return real_str(member(c)); }};
}

template <class Get>
Field bool_field(std::string key, Get member) {
  return {key, [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_bool(key, v); },
          [member](const ExperimentConfig& c) {
            return std::string(member(c) ? "true" : "false");
          }};
}

template <class Get>
Field string_field(std::string key, Get member) {
  return {key, [member](ExperimentConfig& c, const std::string& v) { member(c) = v; },
          [member](const ExperimentConfig& c) { return member(c); }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(int_field("model.depth", [](auto& c) -> auto& { return c.model.depth; }));
    f.push_back(int_field("model.hidden_dim", [](auto& c) -> auto& { return c.model.hidden_dim; }));
    f.push_back(int_field("model.heads", [](auto& c) -> auto& { return c.model.heads; }));
    f.push_back(int_field("model.image_size", [](auto& c) -> auto& { return c.model.image_size; }));
    f.push_back(int_field("model.patch_size", [](auto& c) -> auto& { return c.model.patch_size; }));
    f.push_back(int_field("model.channels", [](auto& c) -> auto& { return c.model.channels; }));
    f.push_back(int_field("model.num_classes", [](auto& c) -> auto& { return c.model.num_classes; }));

    f.push_back(int_field("schedule.exits", [](auto& c) -> auto& { return c.schedule.exits; }));
    f.push_back(int_field("schedule.every_k", [](auto& c) -> auto& { return c.schedule.every_k; }));
    f.push_back({"schedule.exit_blocks",
                 [](C& c, const std::string& v) {
                   c.schedule.exit_blocks.clear();
                   if (v.empty()) return;
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) {
                     c.schedule.exit_blocks.push_back(static_cast<int>(parse_int("schedule.exit_blocks", trim(item))));
                   }
                 },
                 [](const C& c) {
                   std::string out;
                   for (std::size_t i = 0; i < c.schedule.exit_blocks.size(); ++i) {
                     if (i) out += ',';
                     out += std::to_string(c.schedule.exit_blocks[i]);
                   }
                   return out;
                 }});
    f.push_back(bool_field("schedule.ree_everywhere", [](auto& c) -> auto& { return c.schedule.ree_everywhere; }));

    f.push_back(real_field("train.lr0", [](auto& c) -> auto& { return c.train.lr0; }));
    f.push_back(real_field("train.lr_min", [](auto& c) -> auto& { return c.train.lr_min; }));
    f.push_back(int_field("train.batch_size", [](auto& c) -> auto& { return c.train.batch_size; }));
    f.push_back(int_field("train.local_epochs", [](auto& c) -> auto& { return c.train.local_epochs; }));
    f.push_back(real_field("train.clip", [](auto& c) -> auto& { return c.train.clip; }));
    f.push_back(real_field("train.tau", [](auto& c) -> auto& { return c.train.tau; }));
    f.push_back(real_field("train.zeta", [](auto& c) -> auto& { return c.train.zeta; }));
    f.push_back(real_field("train.eta_max", [](auto& c) -> auto& { return c.train.eta_max; }));
    f.push_back(int_field("train.ramp_rounds", [](auto& c) -> auto& { return c.train.ramp_rounds; }));
    f.push_back(bool_field("train.detach_teacher", [](auto& c) -> auto& { return c.train.detach_teacher; }));
    f.push_back({"train.mode",
                 [](C& c, const std::string& v) {
                   if (v == "full") c.train.mode = TrainMode::kFull;
                   else if (v == "frozen") c.train.mode = TrainMode::kFrozen;
                   else bad_value("train.mode", v, "full or frozen");
                 },
                 [](const C& c) { return std::string(c.train.mode == TrainMode::kFull ? "full" : "frozen"); }});
    f.push_back({"train.precision",
                 [](C& c, const std::string& v) {
                   if (v == "f32") c.train.precision = Precision::kFloat32;
                   else if (v == "f64") c.train.precision = Precision::kFloat64;
                   else bad_value("train.precision", v, "f32 or f64");
                 },
                 [](const C& c) { return std::string(c.train.precision == Precision::kFloat32 ? "f32" : "f64"); }});

    f.push_back(int_field("federation.num_clients", [](auto& c) -> auto& { return c.federation.num_clients; }));
    f.push_back(real_field("federation.sample_fraction", [](auto& c) -> auto& { return c.federation.sample_fraction; }));
    f.push_back(int_field("federation.total_rounds", [](auto& c) -> auto& { return c.federation.total_rounds; }));
    f.push_back(int_field("federation.eval_interval", [](auto& c) -> auto& { return c.federation.eval_interval; }));
    f.push_back(bool_field("federation.exclude_underbudget",
                           [](auto& c) -> auto& { return c.federation.exclude_underbudget; }));

    f.push_back({"data.source",
                 [](C& c, const std::string& v) {
                   if (v != "synthetic" && v != "file") bad_value("data.source", v, "synthetic or file");
                   c.data.source = v;
                 },
                 [](const C& c) { return c.data.source; }});
    f.push_back(string_field("data.path", [](auto& c) -> auto& { return c.data.path; }));
    f.push_back(int_field("data.per_class", [](auto& c) -> auto& { return c.data.per_class; }));
    f.push_back(real_field("data.noise", [](auto& c) -> auto& { return c.data.noise; }));
    f.push_back(real_field("data.alpha", [](auto& c) -> auto& { return c.data.alpha; }));
    f.push_back(real_field("data.split_ratio", [](auto& c) -> auto& { return c.data.split_ratio; }));

    f.push_back(bool_field("ablation.kd_enabled", [](auto& c) -> auto& { return c.train.kd_enabled; }));
    f.push_back(bool_field("ablation.modulation_enabled", [](auto& c) -> auto& { return c.train.modulation; }));
    // Alias of schedule.ree_everywhere.
    f.push_back(bool_field("ablation.ree_everywhere", [](auto& c) -> auto& { return c.schedule.ree_everywhere; }));

    f.push_back({"seed", [](C& c, const std::string& v) {
                   const long long x = parse_int("seed", v);
                   if (x < 0) bad_value("seed", v, "a non-negative integer");
                   c.seed = static_cast<std::uint64_t>(x);
                 },
                 [](const C& c) { return std::to_string(c.seed); }});
    f.push_back(string_field("output_dir", [](auto& c) -> auto& { return c.output_dir; }));
    f.push_back(int_field("threads", [](auto& c) -> auto& { return c.threads; }));
    return f;
  }();
  return table;
}

}  // namespace

ExitSchedule ExperimentConfig::resolved_schedule() const {
  ExitSchedule s;
  s.ree_everywhere = schedule.ree_everywhere;
  const int depth = model.depth;
  if (!schedule.exit_blocks.empty()) {
    s.exit_blocks = schedule.exit_blocks;
  } else if (schedule.every_k > 0) {
    s = ExitSchedule::every_k(depth, schedule.every_k, schedule.ree_everywhere);
  } else if (schedule.exits > 0) {
    if (depth % schedule.exits != 0) {
      throw Error(ErrorKind::kConfig, "key 'schedule.exits': " + std::to_string(schedule.exits) +
                                          " exits do not divide depth " + std::to_string(depth) +
                                          "; give schedule.exit_blocks");
    }
    s = ExitSchedule::every_k(depth, depth / schedule.exits, schedule.ree_everywhere);
  } else {
    s = ExitSchedule::every_k(depth, 1, schedule.ree_everywhere);
  }
  if (schedule.exits > 0 && s.num_exits() != schedule.exits) {
    throw Error(ErrorKind::kConfig, "key 'schedule.exits': " + std::to_string(schedule.exits) + " disagrees with " +
                                        std::to_string(s.num_exits()) + " resolved exit blocks");
  }
  return s;
}

TrainConfig ExperimentConfig::resolved_train() const {
  TrainConfig t = train;
  t.total_rounds = federation.total_rounds;
  return t;
}

void ExperimentConfig::validate() const {
  model.validate();
  try {
    resolved_schedule().validate(model.depth);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kConfig) throw;
    throw Error(ErrorKind::kConfig, std::string("key 'schedule.exit_blocks': ") + e.what());
  }
  resolved_train().validate();
  federation.validate();
  if (federation.num_clients < resolved_schedule().num_exits()) {
    throw Error(ErrorKind::kConfig, "key 'federation.num_clients': fewer clients than exits");
  }
  if (!(data.alpha > 0.0)) throw Error(ErrorKind::kConfig, "key 'data.alpha' must be > 0");
  if (!(data.split_ratio > 0.0 && data.split_ratio < 1.0)) {
    throw Error(ErrorKind::kConfig, "key 'data.split_ratio' must lie in (0,1)");
  }
  if (data.source == "file" && data.path.empty()) throw Error(ErrorKind::kConfig, "key 'data.path' required for file data");
  if (data.per_class < 1) throw Error(ErrorKind::kConfig, "key 'data.per_class' must be >= 1");
  if (!(data.noise >= 0.0)) throw Error(ErrorKind::kConfig, "key 'data.noise' must be >= 0");
  if (output_dir.empty()) throw Error(ErrorKind::kConfig, "key 'output_dir' must not be empty");
  if (threads < 0) throw Error(ErrorKind::kConfig, "key 'threads' must be >= 0");
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = fields();
  auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
  if (it == table.end()) throw Error(ErrorKind::kConfig, "unknown key '" + key + "'");
  it->set(cfg, value);
}

void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::kConfig, "line " + std::to_string(lineno) + ": expected key=value");
    }
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

ExperimentConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::kIo, "cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str());
  }
  for (std::string o : overrides) {
    if (o.rfind("--", 0) == 0) o = o.substr(2);
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::kConfig, "override '" + o + "' is not key=value");
    set_config_value(cfg, trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

std::string format_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << '=' << f.get(cfg) << '\n';
  return os.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

int resolve_threads(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* cap = std::getenv("REEFL_THREADS")) {
    const int c = std::atoi(cap);
    if (c > 0) n = std::min(n, c);
  }
  return std::max(n, 1);
}

}  // namespace reefl
