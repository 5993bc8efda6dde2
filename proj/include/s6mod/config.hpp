// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "s6mod/branch.hpp"
#include "s6mod/datasets.hpp"
#include "s6mod/errors.hpp"
#include "s6mod/harness.hpp"

namespace s6mod {

/// Every setting of one run. Keys in config files match the member names.
struct RunConfig {
  std::string dataset = "synthetic";  // synthetic | cifar10 | cifar100
  std::string data_dir;               // CIFAR binaries
  std::size_t classes = 10;           // synthetic only; CIFAR fixes it
  std::size_t tasks = 5;
  std::size_t mem_size = 200;
  std::size_t stream_batch = 10;
  std::size_t replay_batch = 64;
  std::size_t experts = 0;  // 0: 8 for 100 classes, else 10
  double alpha = 1.0;
  double beta = 5.0;
  double lambda0 = 0.1;
  double momentum = 0.9;
  double lr = 0.05;
  double clip_norm = 5.0;  // 0 disables gradient clipping
  std::uint64_t seed = 0;
  std::size_t seeds = 1;  // suite: seeds seed .. seed + seeds - 1
  RoutingMode routing = RoutingMode::class_conditional;
  std::size_t fixed_k = 1;
  ZohMode zoh_mode = ZohMode::exact;
  bool s6mod = true;
  bool stop_q_grad = false;
  EvalHead eval_head = EvalHead::base;
  std::size_t backbone_channels = 64;
  std::size_t width = 0;  // 0: max(16, classes)
  std::size_t state_size = 8;
  std::size_t directions = 4;
  std::size_t conv_kernel = 3;
  // synthetic stream
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::size_t latent_dim = 4;
  std::size_t grid = 8;
  double radius = 6.0;
  double noise = 1.0;
  double pixel_noise = 0.5;
  // outputs
  std::string output;
  std::string dump_embeddings;
  std::string checkpoint;

  std::size_t class_count() const {
    if (dataset == "cifar10") return 10;
    if (dataset == "cifar100") return 100;
    return classes;
  }
  std::size_t resolved_experts() const { return experts ? experts : (class_count() >= 100 ? 8 : 10); }
  std::size_t resolved_width() const { return width ? width : std::max<std::size_t>(16, class_count()); }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (v.empty() || r.ec != std::errc() || r.ptr != end) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'", key);
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  if (v.empty()) throw ConfigError("expected a number, got an empty value", key);
  char* end = nullptr;
  errno = 0;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(out)) {
    throw ConfigError("expected a finite number, got '" + v + "'", key);
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected true or false, got '" + v + "'", key);
}

/// Shortest text that reads back to the same double.
inline std::string format_real(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

/// Applies one key = value setting. Unknown keys and malformed values raise
/// ConfigError naming the key.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = trim(raw);
  auto size = [&](std::size_t& field) { field = static_cast<std::size_t>(parse_uint(key, v)); };
  auto real = [&](double& field) { field = parse_real(key, v); };
  auto text = [&](std::string& field) { field = v; };

  if (key == "dataset") {
    if (v != "synthetic" && v != "cifar10" && v != "cifar100") {
      throw ConfigError("expected synthetic, cifar10 or cifar100, got '" + v + "'", key);
    }
    c.dataset = v;
  } else if (key == "data_dir") text(c.data_dir);
  else if (key == "classes") size(c.classes);
  else if (key == "tasks") size(c.tasks);
  else if (key == "mem_size") size(c.mem_size);
  else if (key == "stream_batch") size(c.stream_batch);
  else if (key == "replay_batch") size(c.replay_batch);
  else if (key == "experts") size(c.experts);
  else if (key == "alpha") real(c.alpha);
  else if (key == "beta") real(c.beta);
  else if (key == "lambda0") real(c.lambda0);
  else if (key == "momentum") real(c.momentum);
  else if (key == "lr") real(c.lr);
  else if (key == "clip_norm") real(c.clip_norm);
  else if (key == "seed") c.seed = parse_uint(key, v);
  else if (key == "seeds") size(c.seeds);
  else if (key == "routing") {
    std::istringstream in(v);
    std::string mode, k;
    in >> mode >> k;
    std::string rest;
    in >> rest;
    if (mode == "class-conditional" && k.empty()) {
      c.routing = RoutingMode::class_conditional;
    } else if (mode == "fixed-k" && !k.empty() && rest.empty()) {
      c.routing = RoutingMode::fixed;
      c.fixed_k = static_cast<std::size_t>(parse_uint(key, k));
    } else {
      throw ConfigError("expected 'class-conditional' or 'fixed-k <k>', got '" + v + "'", key);
    }
  } else if (key == "zoh_mode") {
    try {
      c.zoh_mode = zoh_mode_from_string(v);
    } catch (const ConfigError&) {
      throw ConfigError("expected exact or simplified, got '" + v + "'", key);
    }
  } else if (key == "s6mod") c.s6mod = parse_bool(key, v);
  else if (key == "stop_q_grad") c.stop_q_grad = parse_bool(key, v);
  else if (key == "eval_head") {
    if (v == "base") c.eval_head = EvalHead::base;
    else if (v == "etf") c.eval_head = EvalHead::etf;
    else throw ConfigError("expected base or etf, got '" + v + "'", key);
  } else if (key == "backbone_channels") size(c.backbone_channels);
  else if (key == "width") size(c.width);
  else if (key == "state_size") size(c.state_size);
  else if (key == "directions") size(c.directions);
  else if (key == "conv_kernel") size(c.conv_kernel);
  else if (key == "train_per_class") size(c.train_per_class);
  else if (key == "test_per_class") size(c.test_per_class);
  else if (key == "latent_dim") size(c.latent_dim);
  else if (key == "grid") size(c.grid);
  else if (key == "radius") real(c.radius);
  else if (key == "noise") real(c.noise);
  else if (key == "pixel_noise") real(c.pixel_noise);
  else if (key == "output") text(c.output);
  else if (key == "dump_embeddings") text(c.dump_embeddings);
  else if (key == "checkpoint") text(c.checkpoint);
  else throw ConfigError("unknown configuration key", key);
}

/// Range checks across the whole config.
inline void validate(const RunConfig& c) {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw ConfigError("must be positive", key);
  };
  positive(c.tasks, "tasks");
  positive(c.stream_batch, "stream_batch");
  positive(c.seeds, "seeds");
  positive(c.backbone_channels, "backbone_channels");
  positive(c.state_size, "state_size");
  positive(c.grid, "grid");
  positive(c.train_per_class, "train_per_class");
  if (c.backbone_channels < 2) throw ConfigError("must be at least 2", "backbone_channels");
  if (c.class_count() < 2) throw ConfigError("at least two classes are required", "classes");
  if (c.class_count() % c.tasks != 0) {
    throw ConfigError(std::to_string(c.class_count()) + " classes do not split into " + std::to_string(c.tasks) +
                          " equal tasks",
                      "tasks");
  }
  if (c.alpha < 0.0) throw ConfigError("must be non-negative", "alpha");
  if (c.beta < 0.0) throw ConfigError("must be non-negative", "beta");
  if (!(c.lambda0 > 0.0)) throw ConfigError("must be positive", "lambda0");
  if (!(c.momentum > 0.0 && c.momentum < 1.0)) throw ConfigError("must lie in (0, 1)", "momentum");
  if (!(c.lr > 0.0)) throw ConfigError("must be positive", "lr");
  if (!(c.clip_norm >= 0.0)) throw ConfigError("must be non-negative", "clip_norm");
  if (c.routing == RoutingMode::fixed && (c.fixed_k < 1 || c.fixed_k > c.resolved_experts())) {
    throw ConfigError("fixed-k must lie in [1, " + std::to_string(c.resolved_experts()) + "]", "routing");
  }
  if (c.directions != 1 && c.directions != 4) throw ConfigError("must be 1 or 4", "directions");
  if (c.conv_kernel % 2 == 0) throw ConfigError("must be odd", "conv_kernel");
  if (c.resolved_width() + 1 < c.class_count()) throw ConfigError("must be at least classes - 1", "width");
  if (c.dataset == "synthetic") {
    std::size_t side = c.grid;
    while (side > 4 && side % 2 == 0) side /= 2;
    if (side != 4 || c.grid > 64) throw ConfigError("must be 4, 8, 16, 32 or 64", "grid");
    if (c.latent_dim < 2) throw ConfigError("must be at least 2", "latent_dim");
    if (!(c.radius > 0.0)) throw ConfigError("must be positive", "radius");
    if (c.noise < 0.0) throw ConfigError("must be non-negative", "noise");
    if (c.pixel_noise < 0.0) throw ConfigError("must be non-negative", "pixel_noise");
  } else if (c.data_dir.empty()) {
    throw ConfigError("CIFAR datasets need data_dir", "data_dir");
  }
  if (c.eval_head == EvalHead::etf && !c.s6mod) throw ConfigError("the ETF head needs the branch", "eval_head");
}

/// Parses "key = value" lines ('#' starts a comment), then applies
/// `overrides` in order, then validates.
inline RunConfig parse_config(const std::string& text,
                              const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'",
                        detail::trim(line));
    }
    apply_setting(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  for (const auto& [key, value] : overrides) apply_setting(c, key, value);
  validate(c);
  return c;
}

/// Resolved settings as sorted key/value text; the basis of the hash.
inline std::map<std::string, std::string> config_entries(const RunConfig& c) {
  using detail::format_real;
  auto u = [](std::uint64_t v) { return std::to_string(v); };
  std::map<std::string, std::string> m{
      {"dataset", c.dataset},
      {"data_dir", c.data_dir},
      {"classes", u(c.class_count())},
      {"tasks", u(c.tasks)},
      {"mem_size", u(c.mem_size)},
      {"stream_batch", u(c.stream_batch)},
      {"replay_batch", u(c.replay_batch)},
      {"experts", u(c.resolved_experts())},
      {"alpha", format_real(c.alpha)},
      {"beta", format_real(c.beta)},
      {"lambda0", format_real(c.lambda0)},
      {"momentum", format_real(c.momentum)},
      {"lr", format_real(c.lr)},
      {"clip_norm", format_real(c.clip_norm)},
      {"seed", u(c.seed)},
      {"routing", c.routing == RoutingMode::fixed ? "fixed-k " + u(c.fixed_k) : "class-conditional"},
      {"zoh_mode", to_string(c.zoh_mode)},
      {"s6mod", c.s6mod ? "true" : "false"},
      {"stop_q_grad", c.stop_q_grad ? "true" : "false"},
      {"eval_head", c.eval_head == EvalHead::etf ? "etf" : "base"},
      {"backbone_channels", u(c.backbone_channels)},
      {"width", u(c.resolved_width())},
      {"state_size", u(c.state_size)},
      {"directions", u(c.directions)},
      {"conv_kernel", u(c.conv_kernel)},
  };
  if (c.dataset == "synthetic") {
    m["train_per_class"] = u(c.train_per_class);
    m["test_per_class"] = u(c.test_per_class);
    m["latent_dim"] = u(c.latent_dim);
    m["grid"] = u(c.grid);
    m["radius"] = format_real(c.radius);
    m["noise"] = format_real(c.noise);
    m["pixel_noise"] = format_real(c.pixel_noise);
  }
  return m;
}

/// Config file text that parses back to the same resolved settings.
inline std::string config_text(const RunConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_entries(c)) {
    if (v.empty()) continue;
    out += k + " = " + v + "\n";
  }
  return out;
}

/// FNV-1a 64 over the sorted "key=value\n" lines; output paths excluded.
inline std::uint64_t config_hash(const RunConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : config_entries(c)) {
    for (char ch : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::ordered_json config_json(const RunConfig& c) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config_entries(c)) j[k] = v;
  return j;
}

inline ModelConfig model_config(const RunConfig& c, const Shape& sample_shape) {
  ModelConfig m;
  m.backbone.in_channels = sample_shape.at(2);
  m.backbone.channels = c.backbone_channels;
  m.backbone.output_size = 4;
  m.branch.in_channels = c.backbone_channels;
  m.branch.width = c.resolved_width();
  m.branch.state_size = c.state_size;
  m.branch.experts = c.resolved_experts();
  m.branch.conv_kernel = c.conv_kernel;
  m.branch.directions = c.directions;
  m.branch.classes = c.class_count();
  m.branch.lambda0 = c.lambda0;
  m.branch.momentum = c.momentum;
  m.branch.alpha = c.alpha;
  m.branch.beta = c.beta;
  m.branch.zoh_mode = c.zoh_mode;
  m.branch.routing = c.routing;
  m.branch.fixed_k = c.fixed_k;
  m.branch.stop_q_grad = c.stop_q_grad;
  m.use_s6mod = c.s6mod;
  return m;
}

inline SyntheticSpec synthetic_spec(const RunConfig& c) {
  SyntheticSpec s;
  s.classes = c.classes;
  s.train_per_class = c.train_per_class;
  s.test_per_class = c.test_per_class;
  s.latent_dim = c.latent_dim;
  s.radius = c.radius;
  s.noise = c.noise;
  s.pixel_noise = c.pixel_noise;
  s.height = s.width = c.grid;
  s.seed = c.seed;
  return s;
}

}  // namespace s6mod
