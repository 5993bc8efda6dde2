// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "s6mod/errors.hpp"

namespace s6mod {

/// A[t][T]: accuracy on task t after training through task T (1-indexed,
/// defined for t <= T).
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks = 0) : tasks_(tasks), cells_(tasks * tasks) {}

  std::size_t tasks() const { return tasks_; }

  void set(std::size_t t, std::size_t after, double accuracy) {
    check(t, after);
    if (!(accuracy >= 0.0 && accuracy <= 1.0)) {
      throw ContractError("accuracy must lie in [0, 1], got " + std::to_string(accuracy));
    }
    cells_[(t - 1) * tasks_ + (after - 1)] = accuracy;
  }

  bool has(std::size_t t, std::size_t after) const {
    check(t, after);
    return cells_[(t - 1) * tasks_ + (after - 1)].has_value();
  }

  double at(std::size_t t, std::size_t after) const {
    check(t, after);
    const auto& v = cells_[(t - 1) * tasks_ + (after - 1)];
    if (!v) {
      throw ContractError("A[" + std::to_string(t) + "][" + std::to_string(after) + "] has not been recorded");
    }
    return *v;
  }

  /// Row T as recorded: A[1..T][T].
  std::vector<double> row(std::size_t after) const {
    std::vector<double> out;
    for (std::size_t t = 1; t <= after; ++t) out.push_back(at(t, after));
    return out;
  }

 private:
  void check(std::size_t t, std::size_t after) const {
    if (t < 1 || after < 1 || after > tasks_ || t > after) {
      throw ContractError("A[" + std::to_string(t) + "][" + std::to_string(after) + "] is outside the " +
                          std::to_string(tasks_) + "-task lower triangle");
    }
  }

  std::size_t tasks_;
  std::vector<std::optional<double>> cells_;
};

/// Acc_T = (1/T) sum_t A[t][T].
inline double metric_acc(const AccuracyMatrix& a, std::size_t after) {
  double s = 0.0;
  for (std::size_t t = 1; t <= after; ++t) s += a.at(t, after);
  return s / static_cast<double>(after);
}

/// FR_t = max_{i<t} (A[i][i] - A[i][t]); AF = mean of FR_2..FR_T. Negative
/// values (improvement) are kept as-is.
inline double metric_af(const AccuracyMatrix& a, std::size_t after) {
  if (after < 2) throw ContractError("average forgetting needs at least two tasks");
  double s = 0.0;
  for (std::size_t t = 2; t <= after; ++t) {
    double fr = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < t; ++i) fr = std::max(fr, a.at(i, i) - a.at(i, t));
    s += fr;
  }
  return s / static_cast<double>(after - 1);
}

/// N-Acc = (1/T) sum_t A[t][t].
inline double metric_nacc(const AccuracyMatrix& a, std::size_t after) {
  double s = 0.0;
  for (std::size_t t = 1; t <= after; ++t) s += a.at(t, t);
  return s / static_cast<double>(after);
}

}  // namespace s6mod
