// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "s6mod/s6mod.hpp"

namespace s6mod {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("s6mod_datasets_" + name);
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

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.classes = 4;
  s.train_per_class = 15;
  s.test_per_class = 5;
  return s;
}

TEST(Synthetic, SameSpecSameBytes) {
  const auto a = generate_synthetic(small_spec()), b = generate_synthetic(small_spec());
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.train.labels, b.train.labels);
  EXPECT_EQ(a.test.inputs, b.test.inputs);
  auto other = small_spec();
  other.seed = 1;
  EXPECT_NE(generate_synthetic(other).train.inputs, a.train.inputs);
}

TEST(Synthetic, ShapesAndRange) {
  const auto d = generate_synthetic(small_spec());
  EXPECT_EQ(d.train.sample_shape, (Shape{8, 8, 3}));
  EXPECT_EQ(d.train.size(), 60u);
  EXPECT_EQ(d.test.size(), 20u);
  for (double v : d.train.inputs) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Synthetic, ZeroVarianceCollapsesEachClass) {
  auto s = small_spec();
  s.noise = 0;
  s.pixel_noise = 0;
  const auto d = generate_synthetic(s);
  for (std::size_t i = 1; i < d.train.size(); ++i) {
    if (d.train.labels[i] != d.train.labels[i - 1]) continue;
    const auto a = d.train.input(i), b = d.train.input(i - 1);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST(Synthetic, WellSeparatedPairIsLinearlySeparable) {
  SyntheticSpec s;
  s.classes = 2;
  s.train_per_class = 100;
  s.test_per_class = 100;
  s.radius = 10;
  s.noise = 0.3;
  s.pixel_noise = 0.1;
  const auto d = generate_synthetic(s);
  // Logistic regression on raw pixels by full-batch gradient descent.
  const std::size_t dim = d.train.sample_size();
  std::vector<double> w(dim, 0.0);
  double b = 0;
  for (int it = 0; it < 300; ++it) {
    std::vector<double> gw(dim, 0.0);
    double gb = 0;
    for (std::size_t i = 0; i < d.train.size(); ++i) {
      const auto x = d.train.input(i);
      double z = b;
      for (std::size_t j = 0; j < dim; ++j) z += w[j] * x[j];
      const double err = 1 / (1 + std::exp(-z)) - static_cast<double>(d.train.labels[i]);
      for (std::size_t j = 0; j < dim; ++j) gw[j] += err * x[j];
      gb += err;
    }
    for (std::size_t j = 0; j < dim; ++j) w[j] -= 0.5 * gw[j] / d.train.size();
    b -= 0.5 * gb / d.train.size();
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    const auto x = d.test.input(i);
    double z = b;
    for (std::size_t j = 0; j < dim; ++j) z += w[j] * x[j];
    hits += (z > 0) == (d.test.labels[i] == 1);
  }
  EXPECT_GE(static_cast<double>(hits) / d.test.size(), 0.99);
}

TEST(Synthetic, NeedsTwoClasses) {
  auto s = small_spec();
  s.classes = 1;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
}

TEST(Tasks, SplitInClassOrder) {
  const auto d = generate_synthetic(small_spec());
  const auto tasks = split_tasks(d, 4, 2, 0);
  ASSERT_EQ(tasks.size(), 2u);
  EXPECT_EQ(tasks[0].classes, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(tasks[1].classes, (std::vector<std::size_t>{2, 3}));
  std::set<std::size_t> seen;
  for (const auto& t : tasks) {
    EXPECT_EQ(t.train.size(), 30u);
    EXPECT_EQ(t.test.size(), 10u);
    for (auto i : t.train) {
      EXPECT_TRUE(std::count(t.classes.begin(), t.classes.end(), d.train.labels[i]));
      EXPECT_TRUE(seen.insert(i).second);
    }
  }
  EXPECT_THROW(split_tasks(d, 4, 3, 0), ConfigError);
}

TEST(Tasks, StreamOrderDependsOnSeed) {
  const auto d = generate_synthetic(small_spec());
  EXPECT_EQ(split_tasks(d, 4, 2, 5)[0].train, split_tasks(d, 4, 2, 5)[0].train);
  EXPECT_NE(split_tasks(d, 4, 2, 5)[0].train, split_tasks(d, 4, 2, 6)[0].train);
}

std::vector<ImageRecord> fixture_records(std::size_t n, CifarVariant v) {
  std::vector<ImageRecord> out(n);
  Rng rng(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].label = static_cast<std::uint8_t>(rng.below(cifar_classes(v)));
    if (v == CifarVariant::hundred) out[i].coarse_label = static_cast<std::uint8_t>(rng.below(20));
    for (auto& p : out[i].pixels) p = static_cast<std::uint8_t>(rng.below(256));
  }
  return out;
}

TEST(Cifar, TwoRecordsInOrder) {
  const auto recs = fixture_records(2, CifarVariant::ten);
  const auto bytes = serialize_cifar(recs, CifarVariant::ten);
  EXPECT_EQ(bytes.size(), 2u * 3073);
  const auto back = parse_cifar(bytes, CifarVariant::ten);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].label, recs[0].label);
  EXPECT_EQ(back[1].pixels, recs[1].pixels);
}

TEST(Cifar, LabelZeroIsClassZero) {
  std::vector<std::uint8_t> bytes(3073, 7);
  bytes[0] = 0;
  const auto d = cifar_to_dataset(parse_cifar(bytes, CifarVariant::ten));
  EXPECT_EQ(d.labels[0], 0u);
  EXPECT_NEAR(d.inputs[0], 7 / 255.0, 1e-15);
}

TEST(Cifar, PlanarToChannelLast) {
  std::vector<std::uint8_t> bytes(3073, 0);
  bytes[1 + 1024 * 2 + 5] = 255;  // blue plane, pixel 5
  const auto d = cifar_to_dataset(parse_cifar(bytes, CifarVariant::ten));
  EXPECT_EQ(d.inputs[5 * 3 + 2], 1.0);
  EXPECT_EQ(d.inputs[5 * 3 + 0], 0.0);
}

TEST(Cifar, TruncatedFileReportsOffsetZero) {
  std::vector<std::uint8_t> bytes(3072, 0);
  try {
    parse_cifar(bytes, CifarVariant::ten);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Cifar, BadLengthReportsLastCompleteRecord) {
  auto bytes = serialize_cifar(fixture_records(3, CifarVariant::hundred), CifarVariant::hundred);
  bytes.resize(bytes.size() - 10);
  try {
    parse_cifar(bytes, CifarVariant::hundred);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 2u * 3074);
  }
}

TEST(Cifar, LabelOutOfRange) {
  auto bytes = serialize_cifar(fixture_records(2, CifarVariant::ten), CifarVariant::ten);
  bytes[3073] = 10;
  try {
    parse_cifar(bytes, CifarVariant::ten);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 3073u);
  }
  auto hundred = serialize_cifar(fixture_records(1, CifarVariant::hundred), CifarVariant::hundred);
  hundred[1] = 100;
  EXPECT_THROW(parse_cifar(hundred, CifarVariant::hundred), FormatError);
}

TEST(Cifar, FileRoundTripAndMissingFile) {
  const auto dir = temp_dir("cifar");
  const auto recs = fixture_records(10, CifarVariant::hundred);
  const auto bytes = serialize_cifar(recs, CifarVariant::hundred);
  write_file_bytes(dir / "train.bin", bytes);
  EXPECT_EQ(serialize_cifar(read_cifar_binary(dir / "train.bin", CifarVariant::hundred), CifarVariant::hundred), bytes);
  EXPECT_THROW(read_cifar_binary(dir / "missing.bin", CifarVariant::ten), IoError);
  fs::remove_all(dir);
}

TEST(Embeddings, HeaderOnlyForEmptySet) {
  const auto dir = temp_dir("emb_empty");
  export_embeddings(dir / "e.csv", 3, {}, {});
  EXPECT_EQ(slurp(dir / "e.csv"), "label,f0,f1,f2\n");
  fs::remove_all(dir);
}

TEST(Embeddings, RowsByColumnsAndStable) {
  const auto dir = temp_dir("emb");
  const std::vector<double> feats{0.1, -2.5, 1.0 / 3.0, 4, 5, 6};
  const std::vector<std::size_t> labels{7, 2};
  export_embeddings(dir / "a.csv", 3, feats, labels);
  export_embeddings(dir / "b.csv", 3, feats, labels);
  const auto text = slurp(dir / "a.csv");
  EXPECT_EQ(text, slurp(dir / "b.csv"));
  std::istringstream in(text);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
    ++rows;
  }
  EXPECT_EQ(rows, 3u);
  EXPECT_NE(text.find("\n2,4,5,6\n"), std::string::npos);
  EXPECT_THROW(export_embeddings(dir / "c.csv", 4, feats, labels), DimensionError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace s6mod
