// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "s6mod/errors.hpp"
#include "s6mod/rng.hpp"
#include "s6mod/tensor.hpp"

namespace s6mod {

/// Labeled samples stored contiguously, each of shape [H x W x C].
struct Dataset {
  Shape sample_shape;  // {H, W, C}
  std::vector<double> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return shape_numel(sample_shape); }
  std::span<const double> input(std::size_t i) const { return {inputs.data() + i * sample_size(), sample_size()}; }

  void push(std::span<const double> x, std::size_t label) {
    if (x.size() != sample_size()) throw DimensionError("Dataset::push: sample size mismatch");
    inputs.insert(inputs.end(), x.begin(), x.end());
    labels.push_back(label);
  }
};

/// Stacks samples [i...] of a dataset into a batch tensor [B x H x W x C].
inline Tensor stack_inputs(const Dataset& data, std::span<const std::size_t> index) {
  std::vector<double> values;
  values.reserve(index.size() * data.sample_size());
  for (auto i : index) {
    const auto x = data.input(i);
    values.insert(values.end(), x.begin(), x.end());
  }
  Shape shape{index.size()};
  shape.insert(shape.end(), data.sample_shape.begin(), data.sample_shape.end());
  return Tensor::from(std::move(shape), std::move(values));
}

// ---------------------------------------------------------------------------
// Synthetic clusters

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t clusters_per_class = 1;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::size_t latent_dim = 8;
  double radius = 3.0;
  double noise = 1.0;        // isotropic standard deviation in latent space
  double jitter = 0.25;      // angle jitter, as a fraction of the even spacing
  double pixel_noise = 0.5;  // independent noise per rendered pixel
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 3;
  std::uint64_t seed = 0;            // cluster placement and sampling
  std::uint64_t embedding_seed = 7;  // latent -> pixel map, shared across runs

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic data needs at least two classes", "classes");
    if (clusters_per_class == 0) throw ConfigError("clusters_per_class must be positive", "clusters_per_class");
    if (train_per_class == 0) throw ConfigError("train_per_class must be positive", "train_per_class");
    if (latent_dim < 2) throw ConfigError("latent_dim must be at least 2", "latent_dim");
    if (!(radius > 0.0)) throw ConfigError("radius must be positive", "radius");
    if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative", "noise");
    if (!(jitter >= 0.0 && jitter < 0.5)) throw ConfigError("jitter must lie in [0, 0.5)", "jitter");
    if (!(pixel_noise >= 0.0)) throw ConfigError("pixel_noise must be non-negative", "pixel_noise");
    if (height == 0 || width == 0 || channels == 0) throw ConfigError("grid dimensions must be positive", "grid");
  }
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

namespace detail {

/// Fixed rendering of latent vectors as [H x W x C] grids in [0, 1]:
///   pixel(h, w, c) = sigmoid(E[c] . z + texture(h, w, c) + pixel noise).
/// The class signal is spatially uniform, so convolution plus spatial
/// pooling can read it; texture and per-pixel noise vary across the grid.
class PixelEmbedding {
 public:
  PixelEmbedding(std::size_t latent, std::size_t height, std::size_t width, std::size_t channels, std::uint64_t seed)
      : latent_(latent), channels_(channels), pixels_(height * width * channels), e_(latent * channels),
        texture_(pixels_) {
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(latent));
    for (auto& v : e_) v = rng.normal(0.0, scale);
    for (auto& v : texture_) v = rng.normal(0.0, 0.5);
  }

  void render(std::span<const double> z, double pixel_noise, Rng& rng, std::vector<double>& out) const {
    std::vector<double> channel(channels_, 0.0);
    for (std::size_t c = 0; c < channels_; ++c)
      for (std::size_t j = 0; j < latent_; ++j) channel[c] += e_[c * latent_ + j] * z[j];
    out.resize(pixels_);
    for (std::size_t p = 0; p < pixels_; ++p) {
      const double s = channel[p % channels_] + texture_[p] + pixel_noise * rng.normal();
      out[p] = 1.0 / (1.0 + std::exp(-s));
    }
  }

 private:
  std::size_t latent_;
  std::size_t channels_;
  std::size_t pixels_;
  std::vector<double> e_;
  std::vector<double> texture_;
};

}  // namespace detail

/// Gaussian clusters whose means sit on a circle of the given radius in the
/// first two latent axes. Cluster angles are evenly spaced after a seeded
/// rotation, then jittered by a seeded fraction of the spacing. Samples are
/// grouped by class (task splitting shuffles within tasks).
inline SplitDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng placement(Rng::mix(spec.seed, 11));
  Rng sampler(Rng::mix(spec.seed, 12));
  const std::size_t clusters = spec.classes * spec.clusters_per_class;
  const double spacing = 2.0 * std::numbers::pi / static_cast<double>(clusters);
  const double rotation = placement.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<std::size_t> slot(clusters);
  for (std::size_t i = 0; i < clusters; ++i) slot[i] = i;
  placement.shuffle(slot);
  std::vector<double> angle(clusters);
  for (std::size_t i = 0; i < clusters; ++i)
    angle[i] = rotation + spacing * (static_cast<double>(slot[i]) + placement.uniform(-spec.jitter, spec.jitter));

  const detail::PixelEmbedding embed(spec.latent_dim, spec.height, spec.width, spec.channels, spec.embedding_seed);
  SplitDataset out;
  out.train.sample_shape = out.test.sample_shape = {spec.height, spec.width, spec.channels};

  std::vector<double> z(spec.latent_dim);
  std::vector<double> pixels;
  auto draw = [&](std::size_t cls, std::size_t index, Dataset& into) {
    const std::size_t cluster = cls * spec.clusters_per_class + index % spec.clusters_per_class;
    for (std::size_t j = 0; j < spec.latent_dim; ++j) {
      double mean = 0.0;
      if (j == 0) mean = spec.radius * std::cos(angle[cluster]);
      if (j == 1) mean = spec.radius * std::sin(angle[cluster]);
      z[j] = mean + spec.noise * sampler.normal();
    }
    embed.render(z, spec.pixel_noise, sampler, pixels);
    into.push(pixels, cls);
  };
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t i = 0; i < spec.train_per_class; ++i) draw(c, i, out.train);
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t i = 0; i < spec.test_per_class; ++i) draw(c, i, out.test);
  return out;
}

// ---------------------------------------------------------------------------
// Task streams

struct Task {
  std::vector<std::size_t> classes;
  std::vector<std::size_t> train;  // indices into the train set, stream order
  std::vector<std::size_t> test;   // indices into the test set
};

/// Classes 0..K-1 split in order into `tasks` equal groups; each task's
/// training samples are shuffled with the stream seed.
inline std::vector<Task> split_tasks(const SplitDataset& data, std::size_t classes, std::size_t tasks,
                                     std::uint64_t seed) {
  if (tasks == 0 || classes % tasks != 0) {
    throw ConfigError(std::to_string(classes) + " classes cannot be split into " + std::to_string(tasks) +
                          " equal tasks",
                      "tasks");
  }
  const std::size_t per = classes / tasks;
  std::vector<Task> out(tasks);
  for (std::size_t t = 0; t < tasks; ++t)
    for (std::size_t c = 0; c < per; ++c) out[t].classes.push_back(t * per + c);
  auto task_of = [&](std::size_t label) {
    if (label >= classes) throw ContractError("label " + std::to_string(label) + " outside " + std::to_string(classes) + " classes");
    return label / per;
  };
  for (std::size_t i = 0; i < data.train.size(); ++i) out[task_of(data.train.labels[i])].train.push_back(i);
  for (std::size_t i = 0; i < data.test.size(); ++i) out[task_of(data.test.labels[i])].test.push_back(i);
  Rng rng(Rng::mix(seed, 21));
  for (auto& t : out) rng.shuffle(t.train);
  return out;
}

// ---------------------------------------------------------------------------
// CIFAR binary

enum class CifarVariant { ten, hundred };

inline constexpr std::size_t kCifarPixels = 32 * 32 * 3;

inline std::size_t cifar_record_size(CifarVariant v) { return v == CifarVariant::ten ? 3073 : 3074; }
inline std::size_t cifar_classes(CifarVariant v) { return v == CifarVariant::ten ? 10 : 100; }

struct ImageRecord {
  std::uint8_t coarse_label = 0;  // 100-class layout only
  std::uint8_t label = 0;
  std::array<std::uint8_t, kCifarPixels> pixels{};  // R plane, G plane, B plane
};

inline std::vector<ImageRecord> parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant) {
  const std::size_t rec = cifar_record_size(variant);
  if (bytes.size() % rec != 0) {
    throw FormatError("CIFAR data length " + std::to_string(bytes.size()) + " is not a multiple of the " +
                          std::to_string(rec) + "-byte record",
                      (bytes.size() / rec) * rec);
  }
  std::vector<ImageRecord> out(bytes.size() / rec);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const std::size_t offset = r * rec;
    auto& record = out[r];
    std::size_t label_at = offset;
    if (variant == CifarVariant::hundred) {
      record.coarse_label = bytes[offset];
      label_at = offset + 1;
    }
    record.label = bytes[label_at];
    if (record.label >= cifar_classes(variant)) {
      throw FormatError("label " + std::to_string(record.label) + " outside " +
                            std::to_string(cifar_classes(variant)) + " classes",
                        label_at);
    }
    const auto* src = bytes.data() + label_at + 1;
    std::copy(src, src + kCifarPixels, record.pixels.begin());
  }
  return out;
}

inline std::vector<std::uint8_t> serialize_cifar(std::span<const ImageRecord> records, CifarVariant variant) {
  std::vector<std::uint8_t> out;
  out.reserve(records.size() * cifar_record_size(variant));
  for (const auto& r : records) {
    if (variant == CifarVariant::hundred) out.push_back(r.coarse_label);
    out.push_back(r.label);
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<ImageRecord> read_cifar_binary(const std::filesystem::path& path, CifarVariant variant) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_cifar(bytes, variant);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

/// Planar 8-bit records -> [32 x 32 x 3] samples in [0, 1].
inline Dataset cifar_to_dataset(std::span<const ImageRecord> records) {
  Dataset d;
  d.sample_shape = {32, 32, 3};
  std::vector<double> x(kCifarPixels);
  for (const auto& r : records) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p) x[p * 3 + c] = r.pixels[c * 1024 + p] / 255.0;
    d.push(x, r.label);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Embedding export

/// CSV with header "label,f0,...,f{d-1}" and one row per sample.
inline void export_embeddings(const std::filesystem::path& path, std::size_t dim, std::span<const double> features,
                              std::span<const std::size_t> labels) {
  if (features.size() != labels.size() * dim) throw DimensionError("export_embeddings: feature count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "label";
  for (std::size_t j = 0; j < dim; ++j) out << ",f" << j;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out << labels[i];
    for (std::size_t j = 0; j < dim; ++j) {
      std::snprintf(buf, sizeof buf, ",%.17g", features[i * dim + j]);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace s6mod
