#include "eevit/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "eevit/errors.hpp"

namespace eevit {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const std::string s = trim(v);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  const std::string s = trim(v);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size()) throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a real");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return parse_number<std::size_t>(key, v);
}

int parse_int(const std::string& key, const std::string& v) { return parse_number<int>(key, v); }

bool parse_bool(const std::string& key, const std::string& v) {
  const std::string s = trim(v);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& item : split_list(v)) out.push_back(parse_int(key, item));
  return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split_list(v)) out.push_back(parse_double(key, item));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

struct Key {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<std::pair<std::string, Key>>& keys() {
  static const std::vector<std::pair<std::string, Key>> table = [] {
    std::vector<std::pair<std::string, Key>> t;
    auto size_key = [&t](std::string name, std::size_t& (*field)(RunConfig&)) {
      t.push_back({name, {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_size(k, v); },
                          [field](const RunConfig& c) {
                            return std::to_string(field(const_cast<RunConfig&>(c)));
                          }}});
    };
    auto int_key = [&t](std::string name, int& (*field)(RunConfig&)) {
      t.push_back({name, {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_int(k, v); },
                          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }}});
    };
    auto real_key = [&t](std::string name, double& (*field)(RunConfig&)) {
      t.push_back({name, {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_double(k, v); },
                          [field](const RunConfig& c) { return fmt(field(const_cast<RunConfig&>(c))); }}});
    };
    auto bool_key = [&t](std::string name, bool& (*field)(RunConfig&)) {
      t.push_back({name, {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_bool(k, v); },
                          [field](const RunConfig& c) {
                            return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false");
                          }}});
    };

    size_key("model.image_side", [](RunConfig& c) -> std::size_t& { return c.model.image_side; });
    size_key("model.channels", [](RunConfig& c) -> std::size_t& { return c.model.channels; });
    size_key("model.patch_side", [](RunConfig& c) -> std::size_t& { return c.model.patch_side; });
    int_key("model.layers", [](RunConfig& c) -> int& { return c.model.layers; });
    size_key("model.hidden", [](RunConfig& c) -> std::size_t& { return c.model.hidden; });
    size_key("model.heads", [](RunConfig& c) -> std::size_t& { return c.model.heads; });
    size_key("model.mlp_ratio", [](RunConfig& c) -> std::size_t& { return c.model.mlp_ratio; });
    size_key("model.num_classes", [](RunConfig& c) -> std::size_t& { return c.model.num_classes; });

    t.push_back({"exits.positions",
                 {[](RunConfig& c, const std::string& k, const std::string& v) { c.exits.positions = parse_int_list(k, v); },
                  [](const RunConfig& c) { return join(c.exits.positions); }}});
    int_key("exits.count", [](RunConfig& c) -> int& { return c.exits.count; });
    t.push_back({"exits.kinds",
                 {[](RunConfig& c, const std::string&, const std::string& v) {
                    c.exits.kinds.clear();
                    for (const auto& item : split_list(v)) c.exits.kinds.push_back(parse_head_kind(item));
                  },
                  [](const RunConfig& c) {
                    std::vector<std::string> names;
                    for (auto k : c.exits.kinds) names.push_back(to_string(k));
                    return join(names);
                  }}});
    bool_key("exits.mlp_baseline", [](RunConfig& c) -> bool& { return c.exits.mlp_baseline; });
    int_key("exits.k_max", [](RunConfig& c) -> int& { return c.exits.k_max; });
    int_key("exits.g_max", [](RunConfig& c) -> int& { return c.exits.g_max; });
    t.push_back({"exits.kernels",
                 {[](RunConfig& c, const std::string& k, const std::string& v) { c.exits.kernels = parse_int_list(k, v); },
                  [](const RunConfig& c) { return join(c.exits.kernels); }}});
    t.push_back({"exits.windows",
                 {[](RunConfig& c, const std::string& k, const std::string& v) { c.exits.windows = parse_int_list(k, v); },
                  [](const RunConfig& c) { return join(c.exits.windows); }}});
    size_key("exits.expansion", [](RunConfig& c) -> std::size_t& { return c.exits.expansion; });
    size_key("exits.gah_heads", [](RunConfig& c) -> std::size_t& { return c.exits.gah_heads; });

    real_key("train.alpha", [](RunConfig& c) -> double& { return c.train.alpha; });
    real_key("train.beta", [](RunConfig& c) -> double& { return c.train.beta; });
    real_key("train.gamma", [](RunConfig& c) -> double& { return c.train.gamma; });
    real_key("train.temperature", [](RunConfig& c) -> double& { return c.train.temperature; });
    real_key("train.lr_stage1", [](RunConfig& c) -> double& { return c.train.lr_stage1; });
    real_key("train.lr_stage2", [](RunConfig& c) -> double& { return c.train.lr_stage2; });
    int_key("train.epochs_stage1", [](RunConfig& c) -> int& { return c.train.epochs_stage1; });
    int_key("train.epochs_stage2", [](RunConfig& c) -> int& { return c.train.epochs_stage2; });
    size_key("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    t.push_back({"train.optimizer",
                 {[](RunConfig& c, const std::string&, const std::string& v) {
                    c.train.optimizer = parse_optimizer_kind(trim(v));
                  },
                  [](const RunConfig& c) { return to_string(c.train.optimizer); }}});
    real_key("train.momentum", [](RunConfig& c) -> double& { return c.train.momentum; });
    bool_key("train.distillation", [](RunConfig& c) -> bool& { return c.train.distillation; });

    real_key("inference.tau", [](RunConfig& c) -> double& { return c.policy.tau; });

    t.push_back({"data.source",
                 {[](RunConfig& c, const std::string&, const std::string& v) { c.data.source = trim(v); },
                  [](const RunConfig& c) { return c.data.source; }}});
    t.push_back({"data.path",
                 {[](RunConfig& c, const std::string&, const std::string& v) { c.data.path = trim(v); },
                  [](const RunConfig& c) { return c.data.path.string(); }}});
    t.push_back({"data.eval_path",
                 {[](RunConfig& c, const std::string&, const std::string& v) { c.data.eval_path = trim(v); },
                  [](const RunConfig& c) { return c.data.eval_path.string(); }}});
    size_key("data.per_class", [](RunConfig& c) -> std::size_t& { return c.data.per_class; });
    size_key("data.eval_per_class", [](RunConfig& c) -> std::size_t& { return c.data.eval_per_class; });
    real_key("data.noise", [](RunConfig& c) -> double& { return c.data.noise; });
    t.push_back({"data.mean",
                 {[](RunConfig& c, const std::string& k, const std::string& v) {
                    c.data.normalization.mean = parse_double_list(k, v);
                  },
                  [](const RunConfig& c) { return join(c.data.normalization.mean); }}});
    t.push_back({"data.std",
                 {[](RunConfig& c, const std::string& k, const std::string& v) {
                    c.data.normalization.std = parse_double_list(k, v);
                  },
                  [](const RunConfig& c) { return join(c.data.normalization.std); }}});
    bool_key("data.random_crop", [](RunConfig& c) -> bool& { return c.data.augmentation.random_crop; });
    size_key("data.crop_padding", [](RunConfig& c) -> std::size_t& { return c.data.augmentation.crop_padding; });
    bool_key("data.horizontal_flip", [](RunConfig& c) -> bool& { return c.data.augmentation.horizontal_flip; });

    t.push_back({"run.output_dir",
                 {[](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = trim(v); },
                  [](const RunConfig& c) { return c.output_dir.string(); }}});
    t.push_back({"run.seed",
                 {[](RunConfig& c, const std::string& k, const std::string& v) {
                    c.seed = parse_number<std::uint64_t>(k, v);
                    c.train.seed = c.seed;
                  },
                  [](const RunConfig& c) { return std::to_string(c.seed); }}});
    t.push_back({"run.id",
                 {[](RunConfig& c, const std::string&, const std::string& v) { c.run_id = trim(v); },
                  [](const RunConfig& c) { return c.run_id; }}});
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  policy.validate();
  if (data.source != "synthetic" && data.source != "raw") throw ConfigError("data.source must be synthetic or raw");
  if (data.source == "raw" && data.path.empty()) throw ConfigError("data.path is required for raw data");
  if (data.source == "synthetic" && (data.per_class == 0 || data.eval_per_class == 0)) {
    throw ConfigError("synthetic per-class counts must be >= 1");
  }
  if (data.noise < 0.0) throw ConfigError("data.noise must be >= 0");
  if (model.num_classes > 256) throw ConfigError("raw records carry one label byte: at most 256 classes");
  if (data.normalization.mean.size() != model.channels || data.normalization.std.size() != model.channels) {
    throw ConfigError("data.mean and data.std need one entry per channel");
  }
  for (double s : data.normalization.std) {
    if (!(s > 0.0)) throw ConfigError("data.std entries must be > 0");
  }
  if (run_id.empty()) throw ConfigError("run.id must not be empty");
  resolve_exit_layout(model, exits);  // placement, schedules and head counts
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, k] : keys()) {
    if (name == key) {
      try {
        k.set(cfg, key, value);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
      }
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'section.key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    apply_setting(base, key, line.substr(eq + 1));
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::pair<std::string, std::string> split_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  return {trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1))};
}

std::string dump_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& [name, k] : keys()) os << name << " = " << k.get(cfg) << '\n';
  return os.str();
}

std::uint64_t model_seed(const RunConfig& c) { return c.seed; }
std::uint64_t data_seed(const RunConfig& c) { return c.seed + 101; }

// Both synthetic splits come from one draw so they share class prototypes;
// records interleave classes, so a prefix split stays balanced.
RawDataset synthetic_split(const RunConfig& cfg, bool eval_split) {
  const std::size_t k = cfg.model.num_classes;
  RawDataset all = gen_synthetic(k, cfg.data.per_class + cfg.data.eval_per_class, cfg.geometry(), data_seed(cfg),
                                 cfg.data.noise);
  const std::size_t n_train = k * cfg.data.per_class, px = cfg.geometry().pixels();
  RawDataset out;
  out.geometry = all.geometry;
  out.classes = all.classes;
  const std::size_t b = eval_split ? n_train : 0, e = eval_split ? all.size() : n_train;
  out.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(b), all.labels.begin() + static_cast<std::ptrdiff_t>(e));
  out.pixels.assign(all.pixels.begin() + static_cast<std::ptrdiff_t>(b * px),
                    all.pixels.begin() + static_cast<std::ptrdiff_t>(e * px));
  return out;
}

Dataset training_data(const RunConfig& cfg) {
  if (cfg.data.source == "raw") {
    return load_raw_images(cfg.data.path, cfg.geometry(), cfg.model.num_classes, cfg.data.normalization);
  }
  return normalize(synthetic_split(cfg, false), cfg.data.normalization);
}

Dataset evaluation_data(const RunConfig& cfg, const std::filesystem::path& override_path) {
  if (!override_path.empty()) {
    return load_raw_images(override_path, cfg.geometry(), cfg.model.num_classes, cfg.data.normalization);
  }
  if (cfg.data.source == "raw") {
    const auto& p = cfg.data.eval_path.empty() ? cfg.data.path : cfg.data.eval_path;
    return load_raw_images(p, cfg.geometry(), cfg.model.num_classes, cfg.data.normalization);
  }
  return normalize(synthetic_split(cfg, true), cfg.data.normalization);
}

EarlyExitViT build_model(const RunConfig& cfg) {
  return EarlyExitViT(cfg.model, resolve_exit_layout(cfg.model, cfg.exits), model_seed(cfg));
}

}  // namespace eevit
