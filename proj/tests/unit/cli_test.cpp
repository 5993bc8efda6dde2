// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0
//
// Configuration parsing, aggregation, and the command-line driver run as a
// subprocess.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "s6mod/s6mod.hpp"

namespace s6mod {
namespace {

namespace fs = std::filesystem;

const char* const kSmall =
    "classes = 4\ntasks = 2\ntrain_per_class = 20\ntest_per_class = 10\nbackbone_channels = 8\n"
    "width = 4\nstate_size = 2\nexperts = 3\nmem_size = 20\nreplay_batch = 8\n";

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("s6mod_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(S6MOD_CLI_PATH) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string config_error_key(const std::string& text, std::vector<std::pair<std::string, std::string>> ov = {}) {
  try {
    parse_config(text, ov);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "";
}

TEST(Config, EmptyInputGivesDefaults) {
  const auto c = parse_config("");
  const RunConfig d;
  EXPECT_EQ(config_entries(c), config_entries(d));
  EXPECT_EQ(c.mem_size, 200u);
  EXPECT_EQ(c.alpha, 1.0);
  EXPECT_EQ(c.beta, 5.0);
  EXPECT_EQ(c.resolved_experts(), 10u);
  EXPECT_EQ(c.routing, RoutingMode::class_conditional);
}

TEST(Config, OverrideBeatsFile) {
  EXPECT_EQ(parse_config("alpha = 1\n", {{"alpha", "0.5"}}).alpha, 0.5);
  EXPECT_EQ(parse_config("alpha = 1 # comment\n").alpha, 1.0);
}

TEST(Config, ErrorsNameTheKey) {
  EXPECT_EQ(config_error_key("alpha = -1\n"), "alpha");
  EXPECT_EQ(config_error_key("colour = blue\n"), "colour");
  EXPECT_EQ(config_error_key("tasks = three\n"), "tasks");
  EXPECT_EQ(config_error_key("tasks = 3\n"), "tasks");
  EXPECT_EQ(config_error_key("", {{"routing", "fixed-k 11"}}), "routing");
  EXPECT_EQ(config_error_key("", {{"routing", "sometimes"}}), "routing");
  EXPECT_EQ(config_error_key("zoh_mode = bilinear\n"), "zoh_mode");
  EXPECT_EQ(config_error_key("grid = 12\n"), "grid");
  EXPECT_EQ(config_error_key("dataset = cifar10\n"), "data_dir");
  EXPECT_EQ(config_error_key("s6mod = maybe\n"), "s6mod");
  EXPECT_EQ(config_error_key("s6mod = false\neval_head = etf\n"), "eval_head");
}

TEST(Config, RoutingAndAutoSizes) {
  const auto c = parse_config("routing = fixed-k 4\ndataset = cifar100\ndata_dir = /x\n");
  EXPECT_EQ(c.routing, RoutingMode::fixed);
  EXPECT_EQ(c.fixed_k, 4u);
  EXPECT_EQ(c.class_count(), 100u);
  EXPECT_EQ(c.resolved_experts(), 8u);
  EXPECT_EQ(c.resolved_width(), 100u);
}

TEST(Config, TextRoundTripAndHash) {
  const auto c = parse_config(kSmall, {{"routing", "fixed-k 2"}, {"lr", "0.1"}});
  const auto back = parse_config(config_text(c));
  EXPECT_EQ(config_entries(back), config_entries(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  auto other = c;
  other.output = "elsewhere.ndjson";
  EXPECT_EQ(config_hash(other), config_hash(c));
  other.beta = 4;
  EXPECT_NE(config_hash(other), config_hash(c));
}

Json summary(double acc, double af, double nacc, const char* s6mod, int tasks = 5) {
  Json j;
  j["format_version"] = kMetricsFormatVersion;
  j["tasks"] = tasks;
  j["final_acc"] = acc;
  j["final_af"] = af;
  j["final_nacc"] = nacc;
  j["config"] = {{"s6mod", s6mod}};
  return j;
}

TEST(Aggregate, MeanAndSampleStd) {
  const auto row = aggregate_summaries("x", {summary(0.5, 0.1, 0.9, "true"), summary(0.6, 0.2, 0.8, "true"),
                                             summary(0.7, 0.3, 0.7, "true")});
  EXPECT_EQ(row.runs, 3u);
  EXPECT_EQ(row.method, "ER+S6MOD");
  EXPECT_NEAR(row.acc_mean, 0.6, 1e-15);
  EXPECT_NEAR(row.acc_std, 0.1, 1e-15);
  EXPECT_NEAR(row.nacc_mean, 0.8, 1e-15);
}

TEST(Aggregate, IdenticalInputsIdenticalRows) {
  const std::vector<Json> runs{summary(0.4, 0.1, 0.5, "false"), summary(0.45, 0.2, 0.6, "false")};
  EXPECT_EQ(format_table({aggregate_summaries("a", runs)}), format_table({aggregate_summaries("a", runs)}));
  EXPECT_EQ(aggregate_summaries("a", runs).method, "ER");
}

TEST(Aggregate, InconsistentSchemas) {
  auto missing = summary(0.5, 0.1, 0.9, "true");
  missing.erase("final_nacc");
  EXPECT_THROW(aggregate_summaries("x", {summary(0.5, 0.1, 0.9, "true"), missing}), AggregationError);
  auto version = summary(0.5, 0.1, 0.9, "true");
  version["format_version"] = 99;
  EXPECT_THROW(aggregate_summaries("x", {summary(0.5, 0.1, 0.9, "true"), version}), AggregationError);
  EXPECT_THROW(aggregate_summaries("x", {summary(0.5, 0.1, 0.9, "true"), summary(0.5, 0.1, 0.9, "true", 4)}),
               AggregationError);
  EXPECT_THROW(aggregate_summaries("x", {summary(0.5, 0.1, 0.9, "true"), summary(0.5, 0.1, 0.9, "false")}),
               AggregationError);
  EXPECT_THROW(aggregate_summaries("x", {}), AggregationError);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = temp_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    write(dir_ / "small.cfg", kSmall);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string cfg() const { return "--config '" + (dir_ / "small.cfg").string() + "'"; }
  fs::path dir_;
};

TEST_F(Cli, SameSeedByteIdenticalMetrics) {
  ASSERT_EQ(run_cli("run " + cfg() + " --seed 3 --output '" + (dir_ / "a.ndjson").string() + "'", dir_ / "log"), 0)
      << slurp(dir_ / "log");
  ASSERT_EQ(run_cli("run " + cfg() + " --seed 3 --output '" + (dir_ / "b.ndjson").string() + "'", dir_ / "log"), 0);
  const auto a = slurp(dir_ / "a.ndjson");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir_ / "b.ndjson"));
  EXPECT_TRUE(fs::exists(dir_ / "a.ndjson.timing.ndjson"));
}

TEST_F(Cli, MetricsRecordsPerTaskAndSummary) {
  ASSERT_EQ(run_cli("run " + cfg() + " --output '" + (dir_ / "m.ndjson").string() + "'", dir_ / "log"), 0);
  std::ifstream in(dir_ / "m.ndjson");
  std::string line;
  std::vector<nlohmann::json> recs;
  while (std::getline(in, line)) recs.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0]["type"], "task");
  EXPECT_TRUE(recs[0]["af"].is_null());
  EXPECT_EQ(recs[1]["accuracies"].size(), 2u);
  const auto& s = recs[2];
  EXPECT_EQ(s["type"], "summary");
  for (const char* k : {"base", "dr", "diff", "cont", "z", "total"}) EXPECT_TRUE(s["losses"].contains(k)) << k;
  const double acc = (s["matrix"][1][0].get<double>() + s["matrix"][1][1].get<double>()) / 2;
  EXPECT_NEAR(s["final_acc"].get<double>(), acc, 1e-15);
}

TEST_F(Cli, NoBranchSummaryHasOnlyBaseLoss) {
  ASSERT_EQ(run_cli("run " + cfg() + " --no-s6mod --output '" + (dir_ / "er.ndjson").string() + "'", dir_ / "log"), 0);
  const auto s = read_summary(dir_ / "er.ndjson");
  EXPECT_EQ(s["losses"].size(), 1u);
  EXPECT_TRUE(s["losses"].contains("base"));
  EXPECT_EQ(s["config"]["s6mod"], "false");
}

TEST_F(Cli, FlagOverridesFile) {
  ASSERT_EQ(run_cli("run " + cfg() + " --alpha 0.5 --set beta=2 --routing fixed-k 2 --output '" +
                        (dir_ / "o.ndjson").string() + "'",
                    dir_ / "log"),
            0);
  const auto s = read_summary(dir_ / "o.ndjson");
  EXPECT_EQ(s["config"]["alpha"], "0.5");
  EXPECT_EQ(s["config"]["beta"], "2");
  EXPECT_EQ(s["config"]["routing"], "fixed-k 2");
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run_cli("run " + cfg() + " --alpha -1", dir_ / "log"), 2);
  EXPECT_NE(slurp(dir_ / "log").find("alpha"), std::string::npos);
  EXPECT_EQ(run_cli("run --bogus-flag", dir_ / "log"), 2);
  EXPECT_EQ(run_cli("run " + cfg() + " --set nonsense=1", dir_ / "log"), 2);
  EXPECT_EQ(run_cli("run --config '" + (dir_ / "missing.cfg").string() + "'", dir_ / "log"), 3);
  EXPECT_EQ(run_cli("run --dataset cifar10 --data-dir '" + (dir_ / "nowhere").string() + "'", dir_ / "log"), 3);
  EXPECT_EQ(run_cli("", dir_ / "log"), 2);
}

TEST_F(Cli, DivergenceAbortsWithRecord) {
  const auto out = dir_ / "nan.ndjson";
  EXPECT_EQ(run_cli("run " + cfg() + " --lr 1e12 --clip-norm 0 --output '" + out.string() + "'", dir_ / "log"), 4)
      << slurp(dir_ / "log");
  std::ifstream in(out);
  std::string line, last;
  while (std::getline(in, line)) last = line;
  const auto rec = nlohmann::json::parse(last);
  EXPECT_EQ(rec["type"], "error");
  EXPECT_EQ(rec["kind"], "numeric");
  EXPECT_FALSE(rec["message"].get<std::string>().empty());
}

TEST_F(Cli, CifarDirectoryRun) {
  const auto data = dir_ / "cifar";
  fs::create_directories(data);
  std::vector<ImageRecord> recs(40);
  Rng rng(1);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].label = static_cast<std::uint8_t>(i % 10);
    for (auto& p : recs[i].pixels) p = static_cast<std::uint8_t>(rng.below(256));
  }
  for (int i = 0; i < 5; ++i) {
    write_file_bytes(data / ("data_batch_" + std::to_string(i + 1) + ".bin"),
                     serialize_cifar(std::span(recs).subspan(8 * i, 8), CifarVariant::ten));
  }
  write_file_bytes(data / "test_batch.bin", serialize_cifar(std::span(recs).first(20), CifarVariant::ten));
  EXPECT_EQ(run_cli("run --dataset cifar10 --data-dir '" + data.string() +
                        "' --backbone-channels 4 --set width=9 --set state_size=2 --experts 2 --tasks 5 --output '" +
                        (dir_ / "c.ndjson").string() + "'",
                    dir_ / "log"),
            0)
      << slurp(dir_ / "log");
  EXPECT_EQ(read_summary(dir_ / "c.ndjson")["tasks"], 5);
}

TEST_F(Cli, SuiteTabulatesSeeds) {
  const auto configs = dir_ / "configs";
  fs::create_directories(configs);
  write(configs / "a_er.cfg", std::string(kSmall) + "s6mod = false\n");
  write(configs / "b_full.cfg", kSmall);
  ASSERT_EQ(run_cli("suite '" + configs.string() + "' --seeds 2 --table '" + (dir_ / "t.md").string() +
                        "' --runs-dir '" + (dir_ / "runs").string() + "'",
                    dir_ / "log"),
            0)
      << slurp(dir_ / "log");
  const auto table = slurp(dir_ / "t.md");
  EXPECT_NE(table.find("| a_er | ER | 2 |"), std::string::npos) << table;
  EXPECT_NE(table.find("| b_full | ER+S6MOD | 2 |"), std::string::npos) << table;
  EXPECT_TRUE(fs::exists(dir_ / "runs" / "a_er.seed1.ndjson"));
  // The per-run files reproduce the tabulated row.
  const auto row = aggregate_summaries("a_er", {read_summary(dir_ / "runs" / "a_er.seed0.ndjson"),
                                                read_summary(dir_ / "runs" / "a_er.seed1.ndjson")});
  EXPECT_NE(table.find(format_table({row}).substr(format_table({}).size())), std::string::npos);
}

TEST_F(Cli, CheckpointExportMatchesDump) {
  const auto ck = dir_ / "model.ckpt";
  ASSERT_EQ(run_cli("run " + cfg() + " --checkpoint '" + ck.string() + "' --dump-embeddings '" +
                        (dir_ / "dump.csv").string() + "'",
                    dir_ / "log"),
            0)
      << slurp(dir_ / "log");
  ASSERT_EQ(run_cli("export --checkpoint '" + ck.string() + "' --output '" + (dir_ / "e1.csv").string() + "'",
                    dir_ / "log"),
            0)
      << slurp(dir_ / "log");
  ASSERT_EQ(run_cli("export --checkpoint '" + ck.string() + "' --output '" + (dir_ / "e2.csv").string() + "'",
                    dir_ / "log"),
            0);
  const auto e1 = slurp(dir_ / "e1.csv");
  EXPECT_EQ(e1, slurp(dir_ / "e2.csv"));
  EXPECT_EQ(e1, slurp(dir_ / "dump.csv"));
  EXPECT_EQ(std::count(e1.begin(), e1.end(), '\n'), 1 + 4 * 10);
  auto bytes = read_file_bytes(ck);
  bytes.resize(bytes.size() / 2);
  write_file_bytes(ck, bytes);
  EXPECT_EQ(run_cli("export --checkpoint '" + ck.string() + "' --output '" + (dir_ / "e3.csv").string() + "'",
                    dir_ / "log"),
            3);
}

}  // namespace
}  // namespace s6mod
