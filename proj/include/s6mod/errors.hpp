// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace s6mod {

/// Shapes of the operands are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value lies outside the mathematical domain of an operation
/// (log of a non-positive number, non-negative state matrix entry, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A caller violated a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration. `key()` names the offending setting when known.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& message, std::string key = {})
      : std::invalid_argument(key.empty() ? message : key + ": " + message),
        key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Malformed binary input. `offset()` is the byte position of the problem.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& message, std::size_t offset)
      : std::runtime_error(message + " (at byte offset " + std::to_string(offset) + ")"),
        detail_(message), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }
  /// The message without the offset suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::size_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss or parameter became NaN/Inf during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Metric records from different runs cannot be combined.
class AggregationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace s6mod
