// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "s6mod/errors.hpp"
#include "s6mod/rng.hpp"

namespace s6mod {

/// Bounded memory filled by reservoir sampling. Insertion and retrieval
/// draw from separate generators so that how often the buffer is read
/// does not change what it keeps.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t sample_size, std::uint64_t seed)
      : capacity_(capacity), sample_size_(sample_size), insert_rng_(Rng::mix(seed, 1)),
        retrieve_rng_(Rng::mix(seed, 2)) {
    if (sample_size == 0) throw ConfigError("replay samples must be non-empty", "mem_size");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return labels_.size(); }
  std::size_t seen() const { return seen_; }
  std::size_t sample_size() const { return sample_size_; }
  std::span<const double> input(std::size_t slot) const { return {inputs_.data() + slot * sample_size_, sample_size_}; }
  std::size_t label(std::size_t slot) const { return labels_.at(slot); }
  std::span<const std::size_t> labels() const { return labels_; }

  /// The j-th item seen (1-indexed) is kept unconditionally while j <= M,
  /// otherwise with probability M/j in a uniformly chosen slot.
  void add(std::span<const double> input, std::size_t label) {
    if (input.size() != sample_size_) throw DimensionError("ReplayBuffer::add: sample size mismatch");
    ++seen_;
    if (capacity_ == 0) return;
    if (labels_.size() < capacity_) {
      inputs_.insert(inputs_.end(), input.begin(), input.end());
      labels_.push_back(label);
      return;
    }
    const auto j = static_cast<std::size_t>(insert_rng_.below(seen_));
    if (j < capacity_) {
      std::copy(input.begin(), input.end(), inputs_.begin() + static_cast<std::ptrdiff_t>(j * sample_size_));
      labels_[j] = label;
    }
  }

  /// Up to `count` distinct slots, uniformly without replacement.
  std::vector<std::size_t> draw(std::size_t count) {
    const std::size_t n = labels_.size();
    if (count >= n) {
      std::vector<std::size_t> all(n);
      for (std::size_t i = 0; i < n; ++i) all[i] = i;
      return all;
    }
    // Partial Fisher-Yates over slot indices.
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
      const auto j = i + static_cast<std::size_t>(retrieve_rng_.below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    return idx;
  }

 private:
  std::size_t capacity_;
  std::size_t sample_size_;
  std::size_t seen_ = 0;
  std::vector<double> inputs_;
  std::vector<std::size_t> labels_;
  Rng insert_rng_;
  Rng retrieve_rng_;
};

}  // namespace s6mod
