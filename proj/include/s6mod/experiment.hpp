// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "s6mod/checkpoint.hpp"
#include "s6mod/config.hpp"
#include "s6mod/datasets.hpp"
#include "s6mod/errors.hpp"
#include "s6mod/harness.hpp"
#include "s6mod/metrics.hpp"
#include "s6mod/replay.hpp"

namespace s6mod {

inline constexpr int kMetricsFormatVersion = 1;

using Json = nlohmann::ordered_json;

/// Worker count from S6MOD_NUM_THREADS (default 1).
inline std::size_t thread_count() {
  const char* env = std::getenv("S6MOD_NUM_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("S6MOD_NUM_THREADS must be a positive integer", "S6MOD_NUM_THREADS");
  return static_cast<std::size_t>(v);
}

inline SplitDataset load_dataset(const RunConfig& c) {
  if (c.dataset == "synthetic") return generate_synthetic(synthetic_spec(c));
  const std::filesystem::path dir = c.data_dir;
  SplitDataset out;
  auto load = [](const std::vector<std::filesystem::path>& files, CifarVariant v) {
    std::vector<ImageRecord> records;
    for (const auto& f : files) {
      if (!std::filesystem::exists(f)) throw IoError("dataset file not found: " + f.string());
      auto part = read_cifar_binary(f, v);
      records.insert(records.end(), part.begin(), part.end());
    }
    return cifar_to_dataset(records);
  };
  if (c.dataset == "cifar10") {
    std::vector<std::filesystem::path> train;
    for (int i = 1; i <= 5; ++i) train.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    out.train = load(train, CifarVariant::ten);
    out.test = load({dir / "test_batch.bin"}, CifarVariant::ten);
  } else {
    out.train = load({dir / "train.bin"}, CifarVariant::hundred);
    out.test = load({dir / "test.bin"}, CifarVariant::hundred);
  }
  return out;
}

struct RunResult {
  AccuracyMatrix matrix;
  std::vector<Json> records;  // one per task boundary, then the summary
  Json summary;
  std::vector<double> task_seconds;
};

namespace detail {

inline Json loss_json(const StepLosses& l, bool branch) {
  Json j = Json::object();
  j["base"] = l.base;
  if (branch) {
    j["dr"] = l.dr;
    j["diff"] = l.diff;
    j["cont"] = l.cont;
    j["z"] = l.z;
    j["total"] = l.total;
  }
  return j;
}

inline void accumulate(StepLosses& into, const StepLosses& l, double w) {
  into.base += w * l.base;
  into.dr += w * l.dr;
  into.diff += w * l.diff;
  into.cont += w * l.cont;
  into.z += w * l.z;
  into.total += w * l.total;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<Json>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) out << r.dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

/// Runs the whole stream once. Records are written to `config.output`
/// (if set) even when the run aborts on a numeric failure; the error
/// record is the last line in that case and the NumericError propagates.
inline RunResult run_experiment(const RunConfig& config) {
  validate(config);
  const auto data = load_dataset(config);
  const auto tasks = split_tasks(data, config.class_count(), config.tasks, config.seed);
  auto model = Model::init(model_config(config, data.train.sample_shape), config.seed);
  ReplayBuffer buffer(config.mem_size, data.train.sample_size(), Rng::mix(config.seed, 0x627566ULL));
  const TrainConfig train{config.lr, config.replay_batch, config.clip_norm};
  const auto hash = hash_hex(config_hash(config));
  const std::size_t threads = thread_count();

  RunResult result;
  result.matrix = AccuracyMatrix(tasks.size());
  StepLosses overall;
  std::size_t overall_steps = 0;

  auto finish = [&] {
    if (!config.output.empty()) {
      detail::write_lines(config.output, result.records);
      std::vector<Json> timing;
      for (std::size_t t = 0; t < result.task_seconds.size(); ++t)
        timing.push_back(Json{{"task", t + 1}, {"wall_clock_s", result.task_seconds[t]}});
      detail::write_lines(config.output + ".timing.ndjson", timing);
    }
  };

  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto start = std::chrono::steady_clock::now();
    StepLosses task_losses;
    std::size_t steps = 0;
    const auto& order = tasks[t].train;
    for (std::size_t i = 0; i < order.size(); i += config.stream_batch) {
      const auto batch = std::span(order).subspan(i, std::min(config.stream_batch, order.size() - i));
      try {
        detail::accumulate(task_losses, train_step(model, data.train, batch, buffer, train), 1.0);
      } catch (const NumericError& e) {
        result.records.push_back(Json{{"type", "error"},
                                      {"format_version", kMetricsFormatVersion},
                                      {"kind", "numeric"},
                                      {"task", t + 1},
                                      {"step", steps + 1},
                                      {"message", e.what()},
                                      {"config_hash", hash},
                                      {"seed", config.seed}});
        finish();
        throw;
      }
      ++steps;
    }
    detail::accumulate(overall, task_losses, 1.0);
    overall_steps += steps;
    StepLosses mean_losses;
    detail::accumulate(mean_losses, task_losses, steps ? 1.0 / static_cast<double>(steps) : 0.0);

    const auto row = evaluate(model, data.test, std::span(tasks).first(t + 1), config.eval_head);
    for (std::size_t i = 0; i < row.size(); ++i) result.matrix.set(i + 1, t + 1, row[i]);
    result.task_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());

    Json rec;
    rec["type"] = "task";
    rec["format_version"] = kMetricsFormatVersion;
    rec["task"] = t + 1;
    rec["acc"] = metric_acc(result.matrix, t + 1);
    rec["af"] = t == 0 ? Json(nullptr) : Json(metric_af(result.matrix, t + 1));
    rec["nacc"] = metric_nacc(result.matrix, t + 1);
    rec["accuracies"] = row;
    rec["steps"] = steps;
    rec["losses"] = detail::loss_json(mean_losses, model.has_branch());
    rec["config_hash"] = hash;
    rec["seed"] = config.seed;
    result.records.push_back(std::move(rec));
  }

  const std::size_t T = tasks.size();
  StepLosses mean_overall;
  detail::accumulate(mean_overall, overall, overall_steps ? 1.0 / static_cast<double>(overall_steps) : 0.0);
  Json matrix = Json::array();
  for (std::size_t after = 1; after <= T; ++after) matrix.push_back(result.matrix.row(after));
  Json s;
  s["type"] = "summary";
  s["format_version"] = kMetricsFormatVersion;
  s["tasks"] = T;
  s["final_acc"] = metric_acc(result.matrix, T);
  s["final_af"] = T >= 2 ? Json(metric_af(result.matrix, T)) : Json(nullptr);
  s["final_nacc"] = metric_nacc(result.matrix, T);
  s["matrix"] = std::move(matrix);
  s["losses"] = detail::loss_json(mean_overall, model.has_branch());
  s["steps"] = overall_steps;
  s["config_hash"] = hash;
  s["seed"] = config.seed;
  s["threads"] = threads;
  s["config"] = config_json(config);
  result.summary = s;
  result.records.push_back(std::move(s));
  finish();

  if (!config.checkpoint.empty()) save_checkpoint(config.checkpoint, model, config, data.train.sample_shape);
  if (!config.dump_embeddings.empty()) {
    std::vector<std::size_t> all(data.test.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    export_embeddings(config.dump_embeddings, config.backbone_channels, backbone_features(model, data.test, all),
                      data.test.labels);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregateRow {
  std::string name;
  std::string method;  // "ER" or "ER+S6MOD"
  std::size_t runs = 0;
  double acc_mean = 0, acc_std = 0;
  double af_mean = 0, af_std = 0;
  double nacc_mean = 0, nacc_std = 0;
  std::vector<double> acc;  // per run, seed order
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

/// Mean and sample standard deviation of summary metrics across runs.
/// Summaries must share format version and task count.
inline AggregateRow aggregate_summaries(const std::string& name, const std::vector<Json>& summaries) {
  if (summaries.empty()) throw AggregationError(name + ": no runs to aggregate");
  AggregateRow row;
  row.name = name;
  std::vector<double> af, nacc;
  const auto& first = summaries.front();
  for (const auto& s : summaries) {
    for (const char* key : {"format_version", "tasks", "final_acc", "final_af", "final_nacc", "config"}) {
      if (!s.contains(key)) throw AggregationError(name + ": summary lacks '" + key + "'");
    }
    if (s["format_version"] != first["format_version"]) {
      throw AggregationError(name + ": mixed metrics format versions");
    }
    if (s["tasks"] != first["tasks"]) throw AggregationError(name + ": runs disagree on the task count");
    if (s["config"].value("s6mod", "") != first["config"].value("s6mod", "")) {
      throw AggregationError(name + ": runs mix ER and ER+S6MOD");
    }
    if (!s["final_acc"].is_number() || !s["final_nacc"].is_number()) {
      throw AggregationError(name + ": non-numeric metrics");
    }
    row.acc.push_back(s["final_acc"].get<double>());
    nacc.push_back(s["final_nacc"].get<double>());
    af.push_back(s["final_af"].is_number() ? s["final_af"].get<double>() : 0.0);
  }
  row.method = first["config"].value("s6mod", "true") == "true" ? "ER+S6MOD" : "ER";
  row.runs = summaries.size();
  std::tie(row.acc_mean, row.acc_std) = mean_std(row.acc);
  std::tie(row.af_mean, row.af_std) = mean_std(af);
  std::tie(row.nacc_mean, row.nacc_std) = mean_std(nacc);
  return row;
}

/// Reads the summary record (last line) of an NDJSON metrics file.
inline Json read_summary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  Json j;
  try {
    j = Json::parse(last);
  } catch (const nlohmann::json::exception& e) {
    throw AggregationError(path.string() + ": unreadable record: " + e.what());
  }
  if (j.value("type", "") != "summary") throw AggregationError(path.string() + ": last record is not a summary");
  return j;
}

/// Table with one row per config; accuracies in percent.
inline std::string format_table(const std::vector<AggregateRow>& rows) {
  std::string out = "| config | method | runs | Acc (%) | AF (%) | N-Acc (%) |\n|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %s | %zu | %.2f ± %.2f | %.2f ± %.2f | %.2f ± %.2f |\n", r.name.c_str(),
                  r.method.c_str(), r.runs, 100 * r.acc_mean, 100 * r.acc_std, 100 * r.af_mean, 100 * r.af_std,
                  100 * r.nacc_mean, 100 * r.nacc_std);
    out += buf;
  }
  return out;
}

/// Runs `config.seeds` seeds (seed, seed+1, ...), up to `threads` at once.
/// Returns summaries in seed order.
inline std::vector<Json> run_seeds(const RunConfig& config, std::size_t threads,
                                   const std::function<void(const RunConfig&, const Json&)>& on_done = {}) {
  std::vector<Json> out(config.seeds);
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < config.seeds; i = next++) {
      RunConfig c = config;
      c.seed = config.seed + i;
      c.seeds = 1;
      try {
        out[i] = run_experiment(c).summary;
        if (on_done) {
          std::lock_guard lock(mu);
          on_done(c, out[i]);
        }
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, config.seeds));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace s6mod
