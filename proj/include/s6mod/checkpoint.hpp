// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "s6mod/config.hpp"
#include "s6mod/datasets.hpp"
#include "s6mod/errors.hpp"
#include "s6mod/harness.hpp"

namespace s6mod {

// Layout (little-endian):
//   "S6MODCKP" u32 version
//   u32 len, config text
//   u32 rank, u64 dims...            sample shape
//   u32 sections, then per section:
//     u32 len, name; u32 rank, u64 dims...; f64 values...
inline constexpr char kCheckpointMagic[8] = {'S', '6', 'M', 'O', 'D', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Checkpoint {
  RunConfig config;
  Shape sample_shape;
  std::map<std::string, std::pair<Shape, std::vector<double>>> sections;
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void put_shape(const Shape& s) {
    put(static_cast<std::uint32_t>(s.size()));
    for (auto d : s) put(static_cast<std::uint64_t>(d));
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  Shape get_shape() {
    const auto rank = get<std::uint32_t>();
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), pos_ - 4);
    Shape s(rank);
    for (auto& d : s) d = static_cast<std::size_t>(get<std::uint64_t>());
    return s;
  }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated", pos_);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Checkpoint make_checkpoint(const Model& model, const RunConfig& config, const Shape& sample_shape) {
  Checkpoint ck;
  ck.config = config;
  ck.sample_shape = sample_shape;
  for (const auto& p : model.parameters()) ck.sections[p.name] = {p.tensor.shape(), p.tensor.to_vector()};
  if (model.has_branch()) {
    const auto& b = model.branch();
    ck.sections["etf.weight"] = {b.etf().weight.shape(), b.etf().weight.to_vector()};
    const auto& store = b.store();
    const auto means = store.raw_means();
    ck.sections["prototypes.means"] = {{store.classes(), store.dim()}, {means.begin(), means.end()}};
    std::vector<double> seen(store.classes());
    for (std::size_t c = 0; c < seen.size(); ++c) seen[c] = store.seen(c) ? 1.0 : 0.0;
    ck.sections["prototypes.seen"] = {{store.classes()}, std::move(seen)};
  }
  return ck;
}

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes.insert(w.bytes.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  w.put(kCheckpointVersion);
  w.put_string(config_text(ck.config));
  w.put_shape(ck.sample_shape);
  w.put(static_cast<std::uint32_t>(ck.sections.size()));
  for (const auto& [name, section] : ck.sections) {
    w.put_string(name);
    w.put_shape(section.first);
    for (double v : section.second) w.put(v);
  }
  return std::move(w.bytes);
}

inline Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.need(sizeof kCheckpointMagic);
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw FormatError("not a checkpoint (bad magic)", 0);
  }
  for (std::size_t i = 0; i < sizeof kCheckpointMagic; ++i) r.get<std::uint8_t>();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), sizeof kCheckpointMagic);
  }
  Checkpoint ck;
  const auto config_at = r.position();
  try {
    ck.config = parse_config(r.get_string());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded config is invalid: ") + e.what(), config_at);
  }
  ck.sample_shape = r.get_shape();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string();
    auto shape = r.get_shape();
    const auto n = shape_numel(shape);
    r.need(n * sizeof(double));
    std::vector<double> values(n);
    for (auto& v : values) v = r.get<double>();
    ck.sections[std::move(name)] = {std::move(shape), std::move(values)};
  }
  if (!r.done()) throw FormatError("trailing bytes after the last section", r.position());
  return ck;
}

/// Rebuilds the model from the embedded config and overwrites every
/// parameter, the ETF matrix and the prototype store from the sections.
inline Model restore_model(const Checkpoint& ck) {
  auto model = Model::init(model_config(ck.config, ck.sample_shape), ck.config.seed);
  auto section = [&](const std::string& name, const Shape& shape) -> const std::vector<double>& {
    const auto it = ck.sections.find(name);
    if (it == ck.sections.end()) throw FormatError("checkpoint lacks section '" + name + "'", 0);
    if (it->second.first != shape) {
      throw FormatError("section '" + name + "' has shape " + shape_str(it->second.first) + ", expected " +
                            shape_str(shape),
                        0);
    }
    return it->second.second;
  };
  for (auto& p : model.parameters()) {
    const auto& values = section(p.name, p.tensor.shape());
    auto dst = p.tensor.mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
  if (model.has_branch()) {
    auto& b = model.branch();
    const auto& etf = section("etf.weight", b.etf().weight.shape());
    b.etf().weight = Tensor::from(b.etf().weight.shape(), etf);
    auto& store = b.store();
    const auto& means = section("prototypes.means", {store.classes(), store.dim()});
    const auto& seen = section("prototypes.seen", {store.classes()});
    std::vector<bool> flags(seen.size());
    for (std::size_t c = 0; c < seen.size(); ++c) flags[c] = seen[c] != 0.0;
    store.restore(means, std::move(flags));
  }
  return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const RunConfig& config,
                            const Shape& sample_shape) {
  write_file_bytes(path, serialize_checkpoint(make_checkpoint(model, config, sample_shape)));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace s6mod
