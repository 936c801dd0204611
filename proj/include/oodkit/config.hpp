#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oodkit/detector.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/inject.hpp"
#include "oodkit/io.hpp"

namespace ood::config {

// Flat key=value configuration, one pair per line, '#' comments. Dotted keys
// group by stage, e.g. detector.score_threshold=0.3.
class ConfigMap {
 public:
  ConfigMap() = default;
  explicit ConfigMap(std::map<std::string, std::string> kv)
      : kv_(std::move(kv)) {}

  static ConfigMap from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    ConfigMap cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto last = line.find_last_not_of(" \t\r");
      line = line.substr(first, last - first + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ParseError(path.string() + ":" + std::to_string(lineno) +
                         ": expected key=value");
      cfg.kv_[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return cfg;
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) {
    kv_[key] = value;
  }

  std::string get_string(const std::string& key,
                         const std::string& fallback = "") const {
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw ConfigError(key + ": not a number: " + it->second);
    }
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return std::stoll(it->second);
    } catch (const std::exception&) {
      throw ConfigError(key + ": not an integer: " + it->second);
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw ConfigError(key + ": not an integer: " + it->second);
    }
  }

  std::vector<std::string> get_list(const std::string& key,
                                    const std::string& fallback) const {
    return io::detail::split(get_string(key, fallback), ',');
  }

  // Canonical serialization used for content addressing.
  std::string canonical() const {
    std::ostringstream ss;
    for (const auto& [k, v] : kv_) ss << k << '=' << v << '\n';
    return ss.str();
  }

  const std::map<std::string, std::string>& items() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

inline Fov parse_fov(const ConfigMap& cfg, const std::string& prefix) {
  Fov fov;
  fov.x_min = cfg.get_double(prefix + ".x_min", fov.x_min);
  fov.x_max = cfg.get_double(prefix + ".x_max", fov.x_max);
  fov.y_min = cfg.get_double(prefix + ".y_min", fov.y_min);
  fov.y_max = cfg.get_double(prefix + ".y_max", fov.y_max);
  fov.z_min = cfg.get_double(prefix + ".z_min", fov.z_min);
  fov.z_max = cfg.get_double(prefix + ".z_max", fov.z_max);
  if (fov.x_min >= fov.x_max || fov.y_min >= fov.y_max ||
      fov.z_min >= fov.z_max)
    throw ConfigError("degenerate FOV under " + prefix);
  return fov;
}

inline DetectorConfig parse_detector_config(const ConfigMap& cfg) {
  DetectorConfig dc;
  dc.score_threshold =
      cfg.get_double("detector.score_threshold", dc.score_threshold);
  dc.fov = parse_fov(cfg, "fov");
  dc.mc_samples =
      static_cast<int>(cfg.get_int("detector.mc_samples", dc.mc_samples));
  dc.rng_seed = cfg.get_u64("detector.rng_seed", dc.rng_seed);
  dc.cell_size = cfg.get_double("detector.cell_size", dc.cell_size);
  dc.min_points = static_cast<std::size_t>(
      cfg.get_int("detector.min_points",
                  static_cast<std::int64_t>(dc.min_points)));
  dc.temperature = cfg.get_double("detector.temperature", dc.temperature);
  if (dc.mc_samples < 1) throw ConfigError("detector.mc_samples must be >= 1");
  return dc;
}

inline inject::InjectConfig parse_inject_config(const ConfigMap& cfg) {
  inject::InjectConfig ic;
  ic.gamma_max = static_cast<int>(cfg.get_int("inject.gamma_max", ic.gamma_max));
  ic.zeta_max = static_cast<int>(cfg.get_int("inject.zeta_max", ic.zeta_max));
  ic.tau = cfg.get_double("inject.tau", ic.tau);
  ic.rng_seed = cfg.get_u64("inject.rng_seed", 0);
  ic.fov = parse_fov(cfg, "fov");
  const std::string mode = cfg.get_string("inject.intensity_mode", "by_source");
  using Mode = inject::InjectConfig::IntensityMode;
  if (mode == "none") ic.intensity_mode = Mode::none;
  else if (mode == "constant") ic.intensity_mode = Mode::constant;
  else if (mode == "log_moments") ic.intensity_mode = Mode::log_moments;
  else if (mode == "by_source") ic.intensity_mode = Mode::by_source;
  else throw ConfigError("inject.intensity_mode: unknown mode " + mode);
  if (ic.gamma_max < 1) throw ConfigError("inject.gamma_max must be >= 1");
  if (ic.zeta_max < 0) throw ConfigError("inject.zeta_max must be >= 0");
  if (ic.tau < 0 || ic.tau > 1) throw ConfigError("inject.tau must be in [0,1]");
  return ic;
}

}  // namespace ood::config
