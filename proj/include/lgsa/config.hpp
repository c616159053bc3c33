// key=value settings and the network configuration.
//
// Grammar: one `key = value` per line; `#` starts a comment; blank lines
// are ignored; whitespace around keys and values is trimmed.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lgsa/blocks.hpp"

namespace lgsa {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse_kv(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    }
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_kv(ss.str());
}

inline std::string format_kv(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline long long kv_int(const KeyValues& kv, const std::string& key) {
  const auto& v = kv.at(key);
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

inline double kv_double(const KeyValues& kv, const std::string& key) {
  const auto& v = kv.at(key);
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool kv_bool(const KeyValues& kv, const std::string& key) {
  const auto& v = kv.at(key);
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

enum class LocSource { Features, ProbMap };

/// Which network is built. Lgsa is the siamese two-stage model (with the
/// plain two-stage and LG/SA ablations as configurations of it); the others
/// are single-output structural baselines.
enum class Arch { Lgsa, Concat2Stage, Stacked3, MultiEncoder };

struct NetConfig {
  std::size_t levels = 5;
  std::size_t base_channels = 16;
  std::size_t num_classes = 1;
  std::size_t input_size = 64;
  HeadMode head_mode = HeadMode::Central;
  int sa_count = -1;  // -1: every decoder position of both stages
  std::vector<bool> lg_enabled;  // per encoder level; empty means all on
  LgGate lg_gate = LgGate::Softmax;
  LocSource loc_source = LocSource::Features;
  Arch arch = Arch::Lgsa;

  std::size_t width(std::size_t level) const { return base_channels << (level - 1); }
  std::size_t decoder_positions() const { return 2 * (levels - 1); }
  std::size_t resolved_sa_count() const {
    return sa_count < 0 ? decoder_positions() : static_cast<std::size_t>(sa_count);
  }
  bool lg_on(std::size_t level) const {
    return lg_enabled.empty() ? true : static_cast<bool>(lg_enabled.at(level - 1));
  }

  void validate() const {
    if (levels < 2) throw ConfigError("levels must be at least 2");
    if (base_channels < 1) throw ConfigError("base_channels must be positive");
    if (num_classes < 1) throw ConfigError("num_classes must be positive");
    const std::size_t factor = std::size_t{1} << (levels - 1);
    if (input_size < factor || input_size % factor != 0) {
      throw ConfigError("input_size " + std::to_string(input_size) + " must be a multiple of 2^(levels-1) = " +
                        std::to_string(factor));
    }
    if (sa_count >= 0 && static_cast<std::size_t>(sa_count) > decoder_positions()) {
      throw ConfigError("sa_count " + std::to_string(sa_count) + " exceeds the " +
                        std::to_string(decoder_positions()) + " decoder positions");
    }
    if (!lg_enabled.empty() && lg_enabled.size() != levels) {
      throw ConfigError("lg_enabled needs one entry per level");
    }
  }
};

inline std::string to_string(HeadMode m) { return m == HeadMode::Central ? "central" : "multi"; }
inline std::string to_string(LgGate g) { return g == LgGate::Softmax ? "softmax" : "sigmoid"; }
inline std::string to_string(LocSource s) { return s == LocSource::Features ? "features" : "probmap"; }
inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::Lgsa: return "lgsa";
    case Arch::Concat2Stage: return "concat2stage";
    case Arch::Stacked3: return "stacked3";
    case Arch::MultiEncoder: return "multi_encoder";
  }
  return "?";
}

inline HeadMode parse_head_mode(const std::string& s) {
  if (s == "central") return HeadMode::Central;
  if (s == "multi") return HeadMode::Multi;
  throw ConfigError("head_mode: expected central|multi, got '" + s + "'");
}
inline LgGate parse_lg_gate(const std::string& s) {
  if (s == "softmax") return LgGate::Softmax;
  if (s == "sigmoid") return LgGate::Sigmoid;
  throw ConfigError("lg_gate: expected softmax|sigmoid, got '" + s + "'");
}
inline LocSource parse_loc_source(const std::string& s) {
  if (s == "features") return LocSource::Features;
  if (s == "probmap") return LocSource::ProbMap;
  throw ConfigError("loc_source: expected features|probmap, got '" + s + "'");
}
inline Arch parse_arch(const std::string& s) {
  if (s == "lgsa") return Arch::Lgsa;
  if (s == "concat2stage") return Arch::Concat2Stage;
  if (s == "stacked3") return Arch::Stacked3;
  if (s == "multi_encoder") return Arch::MultiEncoder;
  throw ConfigError("arch: expected lgsa|concat2stage|stacked3|multi_encoder, got '" + s + "'");
}

/// "on", "off", or a comma list of 0/1 flags, one per level.
inline std::vector<bool> parse_lg_enabled(const std::string& s, std::size_t levels) {
  if (s == "on" || s == "all") return {};
  if (s == "off" || s == "none") return std::vector<bool>(levels, false);
  std::vector<bool> out;
  for (const auto& f : split(s, ',')) {
    if (f == "1") out.push_back(true);
    else if (f == "0") out.push_back(false);
    else throw ConfigError("lg_enabled: expected on|off|comma list of 0/1, got '" + s + "'");
  }
  if (out.size() != levels) throw ConfigError("lg_enabled: need " + std::to_string(levels) + " flags");
  return out;
}

inline std::string format_lg_enabled(const NetConfig& c) {
  if (c.lg_enabled.empty()) return "on";
  std::string s;
  for (std::size_t i = 0; i < c.lg_enabled.size(); ++i) s += (i ? "," : "") + std::string(c.lg_enabled[i] ? "1" : "0");
  return s;
}

/// Architecture keys as written into checkpoints and run directories.
inline KeyValues to_kv(const NetConfig& c) {
  return {{"levels", std::to_string(c.levels)},
          {"base_channels", std::to_string(c.base_channels)},
          {"num_classes", std::to_string(c.num_classes)},
          {"input_size", std::to_string(c.input_size)},
          {"head_mode", to_string(c.head_mode)},
          {"sa_count", std::to_string(c.resolved_sa_count())},
          {"lg_enabled", format_lg_enabled(c)},
          {"lg_gate", to_string(c.lg_gate)},
          {"loc_source", to_string(c.loc_source)},
          {"arch", to_string(c.arch)}};
}

/// Reads whichever architecture keys are present, leaving others at `base`.
inline NetConfig net_config_from_kv(const KeyValues& kv, NetConfig base = {}) {
  auto has = [&](const char* k) { return kv.count(k) > 0; };
  if (has("levels")) base.levels = static_cast<std::size_t>(kv_int(kv, "levels"));
  if (has("base_channels")) base.base_channels = static_cast<std::size_t>(kv_int(kv, "base_channels"));
  if (has("num_classes")) base.num_classes = static_cast<std::size_t>(kv_int(kv, "num_classes"));
  if (has("input_size")) base.input_size = static_cast<std::size_t>(kv_int(kv, "input_size"));
  if (has("head_mode")) base.head_mode = parse_head_mode(kv.at("head_mode"));
  if (has("sa_count")) base.sa_count = static_cast<int>(kv_int(kv, "sa_count"));
  if (has("lg_enabled")) base.lg_enabled = parse_lg_enabled(kv.at("lg_enabled"), base.levels);
  if (has("lg_gate")) base.lg_gate = parse_lg_gate(kv.at("lg_gate"));
  if (has("loc_source")) base.loc_source = parse_loc_source(kv.at("loc_source"));
  if (has("arch")) base.arch = parse_arch(kv.at("arch"));
  base.validate();
  return base;
}

}  // namespace lgsa
