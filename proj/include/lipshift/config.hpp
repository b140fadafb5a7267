#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lipshift/certify.hpp"
#include "lipshift/data.hpp"
#include "lipshift/model.hpp"

namespace lipshift {

enum class LossKind { emma, trades };

/// How the EMMA clamp radius is differentiated.
enum class RadiusGrad { detached, exact };

struct TrainConfig {
  std::size_t batch_size = 128;
  real lr = 5e-4;
  std::size_t epochs = 500;
  real weight_decay = 0;
  real trades_lambda = 1;
  LossKind loss = LossKind::emma;
  RadiusGrad emma_radius = RadiusGrad::detached;
  real eps = kDefaultEps;  // target radius of the schedule
  std::size_t save_every = 0;  // 0: final checkpoint only
  int power_iters = 1;         // warm-started iterations per step for the differentiable bound
  bool detach_bound = false;   // stop margin-loss gradients from flowing into the bound
  bool paper_drop_scaling = false;
  std::optional<MixRatio> mix;
  std::size_t crop_pad = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1", "train.batch_size");
    if (!(lr > 0)) throw ConfigError("train.lr: must be > 0", "train.lr");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay: must be >= 0", "train.weight_decay");
    if (!(trades_lambda >= 0)) throw ConfigError("train.lambda: must be >= 0", "train.lambda");
    if (!(eps >= 0)) throw ConfigError("train.eps: must be >= 0", "train.eps");
    if (power_iters < 1) throw ConfigError("train.power_iters: must be >= 1", "train.power_iters");
    if (mix && mix->clean + mix->augmented == 0) throw ConfigError("train.mix: ratio must be non-zero", "train.mix");
  }
};

struct AttackConfig {
  real eps = kDefaultEps;
  int steps = 100;
  std::optional<real> step_size;  // default 2.5 * eps / steps
  int restarts = 5;
  std::uint64_t seed = 0;

  real effective_step_size() const { return step_size ? *step_size : 2.5 * eps / steps; }

  void validate() const {
    if (!(eps >= 0)) throw ConfigError("attack.eps: must be >= 0", "attack.eps");
    if (steps < 1) throw ConfigError("attack.steps: must be >= 1", "attack.steps");
    if (restarts < 1) throw ConfigError("attack.restarts: must be >= 1", "attack.restarts");
    if (step_size && !(*step_size > 0)) throw ConfigError("attack.step_size: must be > 0", "attack.step_size");
    if (step_size && eps > 0 && *step_size > eps) throw ConfigError("attack.step_size: must not exceed eps", "attack.step_size");
  }
};

enum class DatasetKind { synthetic, cifar10, cifar100, raw };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  std::string path;
  std::string test_path;
  std::size_t n_per_class = 200;
  std::size_t test_per_class = 50;
  real separation = 10;

  void validate() const {
    if (kind != DatasetKind::synthetic && path.empty()) {
      throw ConfigError("dataset.path: required for file-backed datasets", "dataset.path");
    }
    if (kind == DatasetKind::synthetic) {
      if (n_per_class < 1) throw ConfigError("dataset.n_per_class: must be >= 1", "dataset.n_per_class");
      if (!(separation > 0)) throw ConfigError("dataset.separation: must be > 0", "dataset.separation");
    }
  }
};

/// Everything a command needs, validated before any compute starts.
struct RunConfig {
  ArchConfig model;
  TrainConfig train;
  AttackConfig attack;
  DatasetConfig dataset;
  std::string out = "runs/default";
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    train.validate();
    attack.validate();
    dataset.validate();
  }
};

namespace config_detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_real(real v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto s = trim(v);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'", key);
  return out;
}

inline real parse_real(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  // a/b fractions are accepted so radii like 36/255 can be written exactly
  if (auto slash = s.find('/'); slash != std::string::npos) {
    return parse_real(key, s.substr(0, slash)) / parse_real(key, s.substr(slash + 1));
  }
  try {
    std::size_t used = 0;
    const real r = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'", key);
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'", key);
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<std::size_t>(key, item));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list", key);
  return out;
}

inline std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline std::vector<Field> fields(RunConfig& c) {
  using namespace std::string_literals;
  auto sz = [](std::string key, std::size_t& r) {
    return Field{key, [key, &r](const std::string& v) { r = parse_int<std::size_t>(key, v); },
                 [&r] { return std::to_string(r); }};
  };
  auto u64 = [](std::string key, std::uint64_t& r) {
    return Field{key, [key, &r](const std::string& v) { r = parse_int<std::uint64_t>(key, v); },
                 [&r] { return std::to_string(r); }};
  };
  auto i32 = [](std::string key, int& r) {
    return Field{key, [key, &r](const std::string& v) { r = parse_int<int>(key, v); }, [&r] { return std::to_string(r); }};
  };
  auto rl = [](std::string key, real& r) {
    return Field{key, [key, &r](const std::string& v) { r = parse_real(key, v); }, [&r] { return fmt_real(r); }};
  };
  auto bl = [](std::string key, bool& r) {
    return Field{key, [key, &r](const std::string& v) { r = parse_bool(key, v); },
                 [&r] { return std::string(r ? "true" : "false"); }};
  };
  auto str = [](std::string key, std::string& r) {
    return Field{key, [&r](const std::string& v) { r = trim(v); }, [&r] { return r; }};
  };
  auto lst = [](std::string key, std::vector<std::size_t>& r) {
    return Field{key, [key, &r](const std::string& v) { r = parse_list(key, v); }, [&r] { return fmt_list(r); }};
  };

  return {
      u64("seed", c.seed),
      str("out", c.out),
      lst("model.stage_depths", c.model.stage_depths),
      lst("model.embed_dims", c.model.embed_dims),
      sz("model.patch_size", c.model.patch_size),
      rl("model.shift_fraction", c.model.shift_fraction),
      rl("model.p_drop", c.model.p_drop),
      sz("model.num_classes", c.model.num_classes),
      lst("model.input_shape", c.model.input_shape),
      sz("train.batch_size", c.train.batch_size),
      rl("train.lr", c.train.lr),
      sz("train.epochs", c.train.epochs),
      rl("train.weight_decay", c.train.weight_decay),
      rl("train.lambda", c.train.trades_lambda),
      Field{"train.loss",
            [&c](const std::string& v) {
              const auto s = trim(v);
              if (s == "emma") c.train.loss = LossKind::emma;
              else if (s == "trades") c.train.loss = LossKind::trades;
              else throw ConfigError("train.loss: expected emma or trades, got '" + v + "'", "train.loss");
            },
            [&c] { return std::string(c.train.loss == LossKind::emma ? "emma" : "trades"); }},
      Field{"train.emma_radius",
            [&c](const std::string& v) {
              const auto s = trim(v);
              if (s == "detached") c.train.emma_radius = RadiusGrad::detached;
              else if (s == "exact") c.train.emma_radius = RadiusGrad::exact;
              else throw ConfigError("train.emma_radius: expected detached or exact, got '" + v + "'", "train.emma_radius");
            },
            [&c] { return std::string(c.train.emma_radius == RadiusGrad::detached ? "detached" : "exact"); }},
      rl("train.eps", c.train.eps),
      sz("train.save_every", c.train.save_every),
      i32("train.power_iters", c.train.power_iters),
      bl("train.detach_bound", c.train.detach_bound),
      bl("train.paper_drop_scaling", c.train.paper_drop_scaling),
      Field{"train.mix",
            [&c](const std::string& v) {
              const auto s = trim(v);
              if (s == "none" || s.empty()) {
                c.train.mix.reset();
                return;
              }
              const auto colon = s.find(':');
              if (colon == std::string::npos) throw ConfigError("train.mix: expected clean:augmented or none", "train.mix");
              c.train.mix = MixRatio{parse_int<std::size_t>("train.mix", s.substr(0, colon)),
                                     parse_int<std::size_t>("train.mix", s.substr(colon + 1))};
            },
            [&c] {
              return c.train.mix ? std::to_string(c.train.mix->clean) + ":" + std::to_string(c.train.mix->augmented)
                                 : "none"s;
            }},
      sz("train.crop_pad", c.train.crop_pad),
      rl("attack.eps", c.attack.eps),
      i32("attack.steps", c.attack.steps),
      Field{"attack.step_size",
            [&c](const std::string& v) {
              const auto s = trim(v);
              if (s == "auto" || s.empty()) c.attack.step_size.reset();
              else c.attack.step_size = parse_real("attack.step_size", s);
            },
            [&c] { return c.attack.step_size ? fmt_real(*c.attack.step_size) : "auto"s; }},
      i32("attack.restarts", c.attack.restarts),
      Field{"dataset.kind",
            [&c](const std::string& v) {
              const auto s = trim(v);
              if (s == "synthetic") c.dataset.kind = DatasetKind::synthetic;
              else if (s == "cifar10") c.dataset.kind = DatasetKind::cifar10;
              else if (s == "cifar100") c.dataset.kind = DatasetKind::cifar100;
              else if (s == "raw") c.dataset.kind = DatasetKind::raw;
              else throw ConfigError("dataset.kind: expected synthetic, cifar10, cifar100 or raw", "dataset.kind");
            },
            [&c] {
              switch (c.dataset.kind) {
                case DatasetKind::synthetic: return "synthetic"s;
                case DatasetKind::cifar10: return "cifar10"s;
                case DatasetKind::cifar100: return "cifar100"s;
                case DatasetKind::raw: return "raw"s;
              }
              return "synthetic"s;
            }},
      str("dataset.path", c.dataset.path),
      str("dataset.test_path", c.dataset.test_path),
      sz("dataset.n_per_class", c.dataset.n_per_class),
      sz("dataset.test_per_class", c.dataset.test_per_class),
      rl("dataset.separation", c.dataset.separation),
  };
}

}  // namespace config_detail

/// Sets one dotted key. Unknown keys are rejected.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  for (auto& f : config_detail::fields(c)) {
    if (f.key == key) {
      f.set(value);
      if (key == "seed") {
        c.train.seed = c.seed;
        c.attack.seed = c.seed;
      }
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'", key);
}

/// Flat `key = value` lines; `#` starts a comment.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(base, config_detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string(), "config");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string serialize_config(const RunConfig& c) {
  RunConfig copy = c;
  std::string out;
  for (auto& f : config_detail::fields(copy)) out += f.key + " = " + f.get() + "\n";
  return out;
}

/// Train and test splits described by a dataset config.
struct DataSplits {
  Dataset train;
  Dataset test;
};

inline DataSplits load_datasets(const RunConfig& c) {
  const auto& d = c.dataset;
  auto check_shape = [&](const Dataset& ds) {
    if (ds.size() && ds.sample_shape != c.model.input_shape) {
      throw ConfigError("dataset samples " + shape_str(ds.sample_shape) + " do not match model.input_shape " +
                            shape_str(c.model.input_shape),
                        "model.input_shape");
    }
    return ds;
  };
  auto load = [&](const std::string& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("dataset.path: file not found: " + path, "dataset.path");
    switch (d.kind) {
      case DatasetKind::cifar10: return load_cifar_binary(path, CifarVariant::c10);
      case DatasetKind::cifar100: return load_cifar_binary(path, CifarVariant::c100);
      default: return load_raw_tensor(path, c.model.num_classes);
    }
  };
  if (d.kind == DatasetKind::synthetic) {
    const std::size_t k = c.model.num_classes;
    Dataset all = synthetic_blobs(d.n_per_class + d.test_per_class, k, c.model.input_shape, d.separation,
                                  derive_seed(c.seed, {0xda7a}));
    return {all.slice(0, d.n_per_class * k), all.slice(d.n_per_class * k, d.test_per_class * k)};
  }
  const bool cifar = d.kind == DatasetKind::cifar10 || d.kind == DatasetKind::cifar100;
  if (cifar && std::filesystem::is_directory(d.path)) {
    // the extracted archive: training batches concatenated in name order
    const auto variant = d.kind == DatasetKind::cifar10 ? CifarVariant::c10 : CifarVariant::c100;
    std::vector<std::filesystem::path> parts;
    for (const auto& e : std::filesystem::directory_iterator(d.path)) {
      const auto name = e.path().filename().string();
      if (variant == CifarVariant::c10 ? name.starts_with("data_batch_") && name.ends_with(".bin") : name == "train.bin")
        parts.push_back(e.path());
    }
    if (parts.empty()) throw ConfigError("dataset.path: no training batches in " + d.path, "dataset.path");
    std::sort(parts.begin(), parts.end());
    Dataset train = load_cifar_binary(parts[0], variant);
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const Dataset more = load_cifar_binary(parts[i], variant);
      train.pixels.insert(train.pixels.end(), more.pixels.begin(), more.pixels.end());
      train.labels.insert(train.labels.end(), more.labels.begin(), more.labels.end());
    }
    const auto test_file = std::filesystem::path(d.path) / (variant == CifarVariant::c10 ? "test_batch.bin" : "test.bin");
    const std::string test_path = d.test_path.empty() ? test_file.string() : d.test_path;
    Dataset test = check_shape(load(test_path));
    return {check_shape(train), std::move(test)};
  }
  Dataset train = check_shape(load(d.path));
  Dataset test = d.test_path.empty() ? train : check_shape(load(d.test_path));
  return {std::move(train), std::move(test)};
}

}  // namespace lipshift
