#pragma once

// INI run configuration: [train], [encoder], [augment], [data], [probe].
// Every key has a default; unknown sections or keys are rejected.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "adept/errors.hpp"
#include "adept/pipeline.hpp"

namespace adept {

struct DataConfig {
  std::size_t num_samples = 64;
  std::size_t canvas = 64;
  std::uint64_t seed = 0;
};

struct ProbeSettings {
  ProbeConfig probe;
  std::size_t seeds = 5;
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
  ProbeSettings probe;

  /// Applies derived geometry (token grid = canvas / patch) and validates.
  void resolve() {
    const std::size_t p = train.encoder.patch;
    if (p == 0 || data.canvas == 0 || data.canvas % p != 0) {
      throw ConfigError("data.canvas " + std::to_string(data.canvas) + " is not a multiple of encoder.patch " +
                        std::to_string(p));
    }
    train.encoder.grid_h = train.encoder.grid_w = data.canvas / p;
    if (data.num_samples == 0) throw ConfigError("data.num_samples must be positive");
    if (probe.seeds == 0) throw ConfigError("probe.seeds must be positive");
    if (probe.probe.train_samples == 0 || probe.probe.eval_samples == 0 || probe.probe.steps == 0 ||
        probe.probe.batch_size == 0 || !(probe.probe.lr > 0.0)) {
      throw ConfigError("probe sample counts, steps, batch_size and lr must be positive");
    }
    train.validate();
  }

  SyntheticDatasetConfig dataset() const {
    SyntheticDatasetConfig dc;
    dc.num_samples = data.num_samples;
    dc.scene = {data.canvas, train.encoder.patch};
    dc.seed = data.seed;
    return dc;
  }
};

namespace detail {

// One table drives parsing, defaults and echoing so the three cannot drift.
struct ConfigField {
  std::string key;  // "section.name"
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + text + "'");
  } else {
    if constexpr (std::is_unsigned_v<T>) {
      if (!text.empty() && text[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
    }
    in >> v;
    if (!in || !(in >> std::ws).eof()) throw ConfigError(key + ": cannot parse '" + text + "'");
    return v;
  }
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[32];  // shortest text that parses back to the same double
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  } else {
    return std::to_string(v);
  }
}

template <class Accessor>
ConfigField make_field(std::string key, Accessor acc) {
  using T = std::remove_reference_t<decltype(acc(std::declval<RunConfig&>()))>;
  return {key,
          [acc](const RunConfig& c) { return format_value(acc(const_cast<RunConfig&>(c))); },
          [acc, key](RunConfig& c, const std::string& s) { acc(c) = parse_value<T>(key, s); }};
}

inline std::vector<ConfigField> config_fields() {
  std::vector<ConfigField> f;
#define ADEPT_FIELD(key, expr) f.push_back(make_field(key, [](RunConfig& c) -> auto& { return expr; }))
  ADEPT_FIELD("train.lambda1", c.train.lambda1);
  ADEPT_FIELD("train.lambda2", c.train.lambda2);
  ADEPT_FIELD("train.tau", c.train.tau);
  ADEPT_FIELD("train.momentum", c.train.momentum);
  ADEPT_FIELD("train.noise_scale", c.train.noise_scale);
  ADEPT_FIELD("train.simcc_k", c.train.simcc_k);
  ADEPT_FIELD("train.stage1_epochs", c.train.stage1_epochs);
  ADEPT_FIELD("train.stage2_epochs", c.train.stage2_epochs);
  ADEPT_FIELD("train.batch_size", c.train.batch_size);
  ADEPT_FIELD("train.lr", c.train.lr);
  ADEPT_FIELD("train.sgd_momentum", c.train.sgd_momentum);
  ADEPT_FIELD("train.weight_decay", c.train.weight_decay);
  ADEPT_FIELD("train.queue_capacity", c.train.queue_capacity);
  ADEPT_FIELD("train.include_positive", c.train.include_positive);
  ADEPT_FIELD("train.dct_floor_ratio", c.train.dct_floor_ratio);
  ADEPT_FIELD("train.seed", c.train.seed);
  ADEPT_FIELD("encoder.embed_dim", c.train.encoder.embed_dim);
  ADEPT_FIELD("encoder.depth", c.train.encoder.depth);
  ADEPT_FIELD("encoder.heads", c.train.encoder.heads);
  ADEPT_FIELD("encoder.patch", c.train.encoder.patch);
  ADEPT_FIELD("encoder.proj_dim", c.train.encoder.proj_dim);
  ADEPT_FIELD("encoder.keypoint_bin_px", c.train.encoder.keypoint_bin_px);
  ADEPT_FIELD("augment.crop_scale_min", c.train.augment.crop_scale_min);
  ADEPT_FIELD("augment.crop_scale_max", c.train.augment.crop_scale_max);
  ADEPT_FIELD("augment.flip_prob", c.train.augment.flip_prob);
  ADEPT_FIELD("augment.brightness", c.train.augment.brightness);
  ADEPT_FIELD("augment.contrast", c.train.augment.contrast);
  ADEPT_FIELD("augment.saturation", c.train.augment.saturation);
  ADEPT_FIELD("data.num_samples", c.data.num_samples);
  ADEPT_FIELD("data.canvas", c.data.canvas);
  ADEPT_FIELD("data.seed", c.data.seed);
  ADEPT_FIELD("probe.train_samples", c.probe.probe.train_samples);
  ADEPT_FIELD("probe.eval_samples", c.probe.probe.eval_samples);
  ADEPT_FIELD("probe.steps", c.probe.probe.steps);
  ADEPT_FIELD("probe.batch_size", c.probe.probe.batch_size);
  ADEPT_FIELD("probe.lr", c.probe.probe.lr);
  ADEPT_FIELD("probe.data_seed", c.probe.probe.data_seed);
  ADEPT_FIELD("probe.seeds", c.probe.seeds);
#undef ADEPT_FIELD
  f.push_back({"train.optimizer", [](const RunConfig& c) { return c.train.optimizer; },
               [](RunConfig& c, const std::string& s) { c.train.optimizer = s; }});
  return f;
}

}  // namespace detail

/// Parses INI text over the defaults. Unknown keys raise ConfigError.
inline RunConfig parse_run_config(const std::string& text, const std::string& origin = "config") {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig cfg;
  const auto fields = detail::config_fields();
  std::map<std::string, const detail::ConfigField*> by_key;
  for (const auto& f : fields) by_key[f.key] = &f;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError(origin + ": key '" + section + "' outside a section");
    for (const auto& [name, value] : body) {
      const std::string key = section + "." + name;
      const auto it = by_key.find(key);
      if (it == by_key.end()) throw ConfigError(origin + ": unknown key '" + key + "'");
      it->second->set(cfg, value.data());
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_run_config(text, path.string());
}

/// Fully resolved configuration as INI text (every key, sections in order).
inline std::string to_ini(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& f : detail::config_fields()) rows.emplace_back(f.key, f.get(cfg));
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.first.substr(0, a.first.find('.')) < b.first.substr(0, b.first.find('.'));
  });
  for (const auto& [key, value] : rows) {
    const std::string sec = key.substr(0, key.find('.'));
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    os << key.substr(key.find('.') + 1) << " = " << value << '\n';
  }
  return os.str();
}

}  // namespace adept
