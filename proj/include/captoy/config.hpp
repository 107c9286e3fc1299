#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/model.hpp"
#include "captoy/objective.hpp"
#include "captoy/toy_data.hpp"

namespace captoy {

// Flat "section.key" -> value map for the diff-able key=value config format:
//   [section]
//   key=value
using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const std::size_t start = s.find_first_not_of(" \t\r");
  if (start == std::string::npos) return "";
  const std::size_t end = s.find_last_not_of(" \t\r");
  return s.substr(start, end - start + 1);
}

}  // namespace detail

inline ConfigMap parse_config(std::istream& is) {
  ConfigMap out;
  std::string raw, section;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        throw ConfigError("malformed section header at line " + std::to_string(lineno));
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected key=value at line " + std::to_string(lineno));
    const std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key at line " + std::to_string(lineno));
    const std::string full = section.empty() ? key : section + "." + key;
    if (out.count(full)) throw ConfigError("duplicate key " + full);
    out[full] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline void write_config(std::ostream& os, const ConfigMap& map) {
  std::string section;
  bool first = true;
  for (const auto& [full, value] : map) {
    const std::size_t dot = full.find('.');
    const std::string sec = dot == std::string::npos ? "" : full.substr(0, dot);
    const std::string key = dot == std::string::npos ? full : full.substr(dot + 1);
    if (sec != section || first) {
      if (!first) os << "\n";
      if (!sec.empty()) os << "[" << sec << "]\n";
      section = sec;
      first = false;
    }
    os << key << " = " << value << "\n";
  }
}

namespace detail {

// Reads typed values while tracking which keys were consumed, so unknown keys
// can be rejected afterwards.
class ConfigReader {
 public:
  explicit ConfigReader(const ConfigMap& map) : map_(map) {}

  std::string str(const std::string& key, const std::string& fallback) {
    seen_.insert(key);
    const auto it = map_.find(key);
    return it == map_.end() ? fallback : it->second;
  }

  double num(const std::string& key, double fallback) {
    seen_.insert(key);
    const auto it = map_.find(key);
    if (it == map_.end()) return fallback;
    char* rest = nullptr;
    const double v = std::strtod(it->second.c_str(), &rest);
    if (rest == it->second.c_str() || *rest != '\0')
      throw ConfigError(key + ": not a number: " + it->second);
    return v;
  }

  int integer(const std::string& key, int fallback) {
    const double v = num(key, fallback);
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v) throw ConfigError(key + ": not an integer");
    return i;
  }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) {
    seen_.insert(key);
    const auto it = map_.find(key);
    if (it == map_.end()) return fallback;
    char* rest = nullptr;
    const unsigned long long v = std::strtoull(it->second.c_str(), &rest, 10);
    if (rest == it->second.c_str() || *rest != '\0')
      throw ConfigError(key + ": not an unsigned integer: " + it->second);
    return v;
  }

  bool flag(const std::string& key, bool fallback) {
    const std::string v = str(key, fallback ? "1" : "0");
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError(key + ": not a boolean: " + v);
  }

  std::vector<double> num_list(const std::string& key) {
    const std::string v = str(key, "");
    std::vector<double> out;
    std::istringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      char* rest = nullptr;
      const double x = std::strtod(item.c_str(), &rest);
      if (rest == item.c_str() || *rest != '\0')
        throw ConfigError(key + ": not a number list: " + v);
      out.push_back(x);
    }
    return out;
  }

  void reject_unknown(const std::string& ignore_prefix = "") const {
    for (const auto& [key, value] : map_) {
      (void)value;
      if (!ignore_prefix.empty() && key.rfind(ignore_prefix, 0) == 0) continue;
      if (!seen_.count(key)) throw ConfigError("unknown config key: " + key);
    }
  }

 private:
  const ConfigMap& map_;
  std::set<std::string> seen_;
};

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

// Everything a training run needs, loadable from and writable to the config
// format so a run directory's resolved config reproduces the run exactly.
struct RunConfig {
  ToySpec data;
  std::string dataset_path;       // load instead of generating when non-empty
  int n_utterances = 200;
  double holdout_fraction = 0.1;  // tail of the generated set held out for eval
  ModelConfig model;
  bool fixed_beta = false;
  double c = 2.0, c_h = 1.0, c_l = 1.0;
  TrainOptions train;

  CapacityTarget target() const {
    return model.hierarchical ? CapacityTarget::hier(c_h, c_l) : CapacityTarget::flat(c);
  }
};

inline RunConfig parse_run_config(const ConfigMap& map) {
  detail::ConfigReader r(map);
  RunConfig rc;

  rc.data.channels = r.integer("data.channels", rc.data.channels);
  rc.data.num_text_classes = r.integer("data.num_text_classes", rc.data.num_text_classes);
  rc.data.num_speakers = r.integer("data.num_speakers", rc.data.num_speakers);
  rc.data.rng_seed = r.u64("data.seed", rc.data.rng_seed);
  for (double v : r.num_list("data.base_lengths")) rc.data.base_lengths.push_back(static_cast<int>(v));
  rc.dataset_path = r.str("data.path", "");
  rc.n_utterances = r.integer("data.n_utterances", rc.n_utterances);
  rc.holdout_fraction = r.num("data.holdout_fraction", rc.holdout_fraction);
  rc.data.validate_and_default();

  rc.model.channels = rc.data.channels;
  rc.model.num_text_classes = rc.data.num_text_classes;
  rc.model.num_speakers = rc.data.num_speakers;
  rc.model.latent_dim = r.integer("model.latent_dim", rc.model.latent_dim);
  rc.model.hidden_dim = r.integer("model.hidden_dim", rc.model.hidden_dim);
  rc.model.hierarchical = r.flag("model.hierarchical", rc.model.hierarchical);
  rc.model.condition_on_text = r.flag("model.condition_on_text", rc.model.condition_on_text);
  rc.model.condition_on_speaker = r.flag("model.condition_on_speaker", rc.model.condition_on_speaker);
  const std::string bneck = r.str("model.bottleneck", "variational");
  if (bneck == "variational") {
    rc.model.bottleneck = Bottleneck::variational;
  } else if (bneck == "tanh_heuristic") {
    rc.model.bottleneck = Bottleneck::tanh_heuristic;
  } else {
    throw ConfigError("model.bottleneck: unknown value " + bneck);
  }
  rc.model.validate();

  rc.c = r.num("objective.c", rc.c);
  rc.c_h = r.num("objective.c_h", rc.c_h);
  rc.c_l = r.num("objective.c_l", rc.c_l);
  rc.fixed_beta = r.flag("objective.fixed_beta", rc.fixed_beta);
  rc.train.fixed_beta = rc.fixed_beta;
  rc.train.fixed_beta_value = r.num("objective.beta", rc.train.fixed_beta_value);
  rc.train.fixed_beta_h = r.num("objective.beta_h", rc.train.fixed_beta_h);
  rc.train.fixed_beta_l = r.num("objective.beta_l", rc.train.fixed_beta_l);

  rc.train.steps = static_cast<long>(r.num("train.steps", static_cast<double>(rc.train.steps)));
  rc.train.batch_size = r.integer("train.batch_size", rc.train.batch_size);
  rc.train.lr_base = r.num("train.lr_base", rc.train.lr_base);
  rc.train.lr_decay = r.flag("train.lr_decay", rc.train.lr_decay);
  rc.train.dual_lr = r.num("train.dual_lr", rc.train.dual_lr);
  rc.train.dual_lr_scale = r.num("train.dual_lr_scale", rc.train.dual_lr_scale);
  rc.train.dual_momentum = r.num("train.dual_momentum", rc.train.dual_momentum);
  rc.train.grad_clip = r.num("train.grad_clip", rc.train.grad_clip);
  rc.train.seed = r.u64("train.seed", rc.train.seed);
  rc.train.adam_beta1 = r.num("train.adam_beta1", rc.train.adam_beta1);
  rc.train.adam_beta2 = r.num("train.adam_beta2", rc.train.adam_beta2);
  rc.train.adam_eps = r.num("train.adam_eps", rc.train.adam_eps);

  r.reject_unknown("sweep.");
  return rc;
}

inline ConfigMap run_config_to_map(const RunConfig& rc) {
  ConfigMap m;
  m["data.channels"] = std::to_string(rc.data.channels);
  m["data.num_text_classes"] = std::to_string(rc.data.num_text_classes);
  m["data.num_speakers"] = std::to_string(rc.data.num_speakers);
  m["data.seed"] = std::to_string(rc.data.rng_seed);
  m["data.base_lengths"] = detail::join_ints(rc.data.base_lengths);
  if (!rc.dataset_path.empty()) m["data.path"] = rc.dataset_path;
  m["data.n_utterances"] = std::to_string(rc.n_utterances);
  m["data.holdout_fraction"] = format_double(rc.holdout_fraction);

  m["model.latent_dim"] = std::to_string(rc.model.latent_dim);
  m["model.hidden_dim"] = std::to_string(rc.model.hidden_dim);
  m["model.hierarchical"] = rc.model.hierarchical ? "1" : "0";
  m["model.condition_on_text"] = rc.model.condition_on_text ? "1" : "0";
  m["model.condition_on_speaker"] = rc.model.condition_on_speaker ? "1" : "0";
  m["model.bottleneck"] =
      rc.model.bottleneck == Bottleneck::variational ? "variational" : "tanh_heuristic";

  m["objective.c"] = format_double(rc.c);
  m["objective.c_h"] = format_double(rc.c_h);
  m["objective.c_l"] = format_double(rc.c_l);
  m["objective.fixed_beta"] = rc.fixed_beta ? "1" : "0";
  m["objective.beta"] = format_double(rc.train.fixed_beta_value);
  m["objective.beta_h"] = format_double(rc.train.fixed_beta_h);
  m["objective.beta_l"] = format_double(rc.train.fixed_beta_l);

  m["train.steps"] = std::to_string(rc.train.steps);
  m["train.batch_size"] = std::to_string(rc.train.batch_size);
  m["train.lr_base"] = format_double(rc.train.lr_base);
  m["train.lr_decay"] = rc.train.lr_decay ? "1" : "0";
  m["train.dual_lr"] = format_double(rc.train.dual_lr);
  m["train.dual_lr_scale"] = format_double(rc.train.dual_lr_scale);
  m["train.dual_momentum"] = format_double(rc.train.dual_momentum);
  m["train.grad_clip"] = format_double(rc.train.grad_clip);
  m["train.seed"] = std::to_string(rc.train.seed);
  m["train.adam_beta1"] = format_double(rc.train.adam_beta1);
  m["train.adam_beta2"] = format_double(rc.train.adam_beta2);
  m["train.adam_eps"] = format_double(rc.train.adam_eps);
  return m;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path);
  ConfigMap map = parse_config(is);
  return parse_run_config(map);
}

}  // namespace captoy
