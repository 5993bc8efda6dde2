// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: single runs, seed suites, and embedding export.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "s6mod/s6mod.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kIo = 3, kNumeric = 4, kAggregation = 5 };

using Overrides = std::vector<std::pair<std::string, std::string>>;

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw s6mod::IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Flags shared by `run` and `suite`; each one maps to a config key.
struct FlagSet {
  std::string config_file;
  Overrides overrides;
  std::vector<std::string> sets;
  std::vector<std::string> routing;
  bool no_s6mod = false;

  void add(CLI::App& app, bool with_outputs) {
    app.add_option("--config", config_file, "key = value configuration file");
    auto value = [&](const std::string& flag, const std::string& key, const std::string& help) {
      app.add_option_function<std::string>(
          flag, [this, key](const std::string& v) { overrides.emplace_back(key, v); }, help);
    };
    value("--dataset", "dataset", "synthetic | cifar10 | cifar100");
    value("--data-dir", "data_dir", "directory holding the CIFAR binaries");
    value("--tasks", "tasks", "number of tasks");
    value("--mem-size", "mem_size", "replay buffer capacity M");
    value("--stream-batch", "stream_batch", "stream mini-batch size");
    value("--replay-batch", "replay_batch", "replay batch size");
    value("--experts", "experts", "number of discretization experts N");
    value("--alpha", "alpha", "weight of the distillation term");
    value("--beta", "beta", "weight of the contrastive discretization term");
    value("--lambda0", "lambda0", "margin scale of the class uncertainty");
    value("--lr", "lr", "SGD learning rate");
    value("--clip-norm", "clip_norm", "global gradient norm limit (0 disables)");
    value("--seed", "seed", "run seed");
    value("--seeds", "seeds", "number of consecutive seeds (suite)");
    value("--zoh-mode", "zoh_mode", "exact | simplified");
    value("--eval-head", "eval_head", "base | etf");
    value("--backbone-channels", "backbone_channels", "backbone width C_b");
    app.add_option("--routing", routing, "class-conditional | fixed-k <k>")->expected(1, 2);
    app.add_flag("--no-s6mod", no_s6mod, "train plain ER without the branch");
    app.add_option("--set", sets, "additional key=value settings (repeatable)");
    if (with_outputs) {
      value("--output", "output", "metrics file (newline-delimited JSON)");
      value("--dump-embeddings", "dump_embeddings", "CSV of pooled backbone features for the test set");
      value("--checkpoint", "checkpoint", "write a checkpoint after the run");
    }
  }

  Overrides resolved() const {
    Overrides out = overrides;
    if (!routing.empty()) {
      std::string joined = routing[0];
      for (std::size_t i = 1; i < routing.size(); ++i) joined += " " + routing[i];
      out.emplace_back("routing", joined);
    }
    if (no_s6mod) out.emplace_back("s6mod", "false");
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw s6mod::ConfigError("--set expects key=value, got '" + s + "'", s);
      out.emplace_back(s6mod::detail::trim(s.substr(0, eq)), s.substr(eq + 1));
    }
    return out;
  }

  s6mod::RunConfig parse(const std::string& file) const {
    return s6mod::parse_config(file.empty() ? std::string() : read_text(file), resolved());
  }
};

void print_summary(const s6mod::Json& summary) {
  std::fprintf(stderr, "seed %llu: Acc %.4f  AF %s  N-Acc %.4f\n",
               static_cast<unsigned long long>(summary["seed"].get<std::uint64_t>()),
               summary["final_acc"].get<double>(),
               summary["final_af"].is_number() ? std::to_string(summary["final_af"].get<double>()).c_str() : "n/a",
               summary["final_nacc"].get<double>());
}

int run_command(const FlagSet& flags) {
  const auto config = flags.parse(flags.config_file);
  const auto result = s6mod::run_experiment(config);
  print_summary(result.summary);
  if (config.output.empty()) std::cout << result.summary.dump() << '\n';
  return kOk;
}

int suite_command(const FlagSet& flags, const std::string& configs_dir, const std::string& table_path,
                  const std::string& runs_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(configs_dir)) throw s6mod::IoError("config directory not found: " + configs_dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(configs_dir))
    if (e.is_regular_file() && e.path().extension() == ".cfg") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw s6mod::ConfigError("no .cfg files in " + configs_dir, "configs");
  if (!runs_dir.empty()) fs::create_directories(runs_dir);

  const std::size_t threads = s6mod::thread_count();
  std::vector<s6mod::AggregateRow> rows;
  for (const auto& f : files) {
    auto config = flags.parse(f.string());
    const auto name = f.stem().string();
    std::fprintf(stderr, "[%s] %zu seed(s)\n", name.c_str(), config.seeds);
    std::vector<s6mod::Json> summaries;
    if (runs_dir.empty()) {
      summaries = s6mod::run_seeds(config, threads, [](const s6mod::RunConfig&, const s6mod::Json& s) { print_summary(s); });
    } else {
      for (std::size_t i = 0; i < config.seeds; ++i) {
        auto c = config;
        c.seed = config.seed + i;
        c.seeds = 1;
        c.output = (fs::path(runs_dir) / (name + ".seed" + std::to_string(c.seed) + ".ndjson")).string();
        summaries.push_back(s6mod::run_experiment(c).summary);
        print_summary(summaries.back());
      }
    }
    rows.push_back(s6mod::aggregate_summaries(name, summaries));
  }
  const auto table = s6mod::format_table(rows);
  if (table_path.empty()) {
    std::cout << table;
  } else {
    std::ofstream out(table_path, std::ios::binary);
    if (!out) throw s6mod::IoError("cannot open " + table_path + " for writing");
    out << table;
  }
  return kOk;
}

int export_command(const std::string& checkpoint, const std::string& output, const std::string& data_dir) {
  const auto ck = s6mod::load_checkpoint(checkpoint);
  auto config = ck.config;
  if (!data_dir.empty()) config.data_dir = data_dir;
  const auto model = s6mod::restore_model(ck);
  const auto data = s6mod::load_dataset(config);
  std::vector<std::size_t> all(data.test.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  s6mod::export_embeddings(output, config.backbone_channels, s6mod::backbone_features(model, data.test, all),
                           data.test.labels);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online class-incremental learning with a routed selective-scan branch"};
  app.require_subcommand(1);

  FlagSet run_flags;
  auto* run = app.add_subcommand("run", "train once over the task stream and write metrics");
  run_flags.add(*run, true);

  FlagSet suite_flags;
  std::string configs_dir, table_path, runs_dir;
  auto* suite = app.add_subcommand("suite", "run every .cfg in a directory over seeds and tabulate");
  suite->add_option("configs", configs_dir, "directory of .cfg files")->required();
  suite->add_option("--table", table_path, "write the comparison table here (default: stdout)");
  suite->add_option("--runs-dir", runs_dir, "also keep each run's metrics file here");
  suite_flags.add(*suite, false);

  std::string ck_path, emb_path, emb_data_dir;
  auto* exp = app.add_subcommand("export", "write pooled backbone features of the test set from a checkpoint");
  exp->add_option("--checkpoint", ck_path, "checkpoint file")->required();
  exp->add_option("--output", emb_path, "CSV destination")->required();
  exp->add_option("--data-dir", emb_data_dir, "override the dataset directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*run) return run_command(run_flags);
    if (*suite) return suite_command(suite_flags, configs_dir, table_path, runs_dir);
    return export_command(ck_path, emb_path, emb_data_dir);
  } catch (const s6mod::ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  } catch (const s6mod::IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIo;
  } catch (const s6mod::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kIo;
  } catch (const s6mod::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const s6mod::AggregationError& e) {
    std::fprintf(stderr, "aggregation error: %s\n", e.what());
    return kAggregation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
