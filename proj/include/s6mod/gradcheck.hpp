// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "s6mod/tensor.hpp"

namespace s6mod {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_coordinate = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t coordinates_checked = 0;
  bool finite = true;
  std::string failure;

  bool passed(double tolerance) const { return finite && max_relative_error < tolerance; }
};

/// Compares reverse-mode gradients of `loss()` against central differences.
///
/// Per coordinate the error is |analytic - numeric| / max(1e-8, |numeric|);
/// the report carries the maximum. `loss` must rebuild its graph from the
/// current values of `params` on every call. Parameter values are restored
/// and their gradients zeroed before returning.
template <class Real>
GradCheckReport finite_difference_check(const std::function<BasicTensor<Real>()>& loss,
                                        std::vector<BasicTensor<Real>> params, double eps = 1e-5) {
  GradCheckReport report;
  for (auto& p : params) {
    if (!p.requires_grad()) p.set_requires_grad(true);
    p.zero_grad();
  }
  const auto base = loss();
  base.backward();
  std::vector<std::vector<Real>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.numel(), Real(0));
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real saved = values[i];
      values[i] = saved + static_cast<Real>(eps);
      const double up = static_cast<double>(loss().item());
      values[i] = saved - static_cast<Real>(eps);
      const double down = static_cast<double>(loss().item());
      values[i] = saved;
      ++report.coordinates_checked;

      const double numeric = (up - down) / (2.0 * eps);
      const double exact = static_cast<double>(analytic[pi][i]);
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(exact)) {
        report.finite = false;
        report.failure = "non-finite value at parameter " + std::to_string(pi) + ", coordinate " + std::to_string(i);
        report.worst_param = pi;
        report.worst_coordinate = i;
        for (auto& p : params) p.zero_grad();
        return report;
      }
      const double err = std::abs(exact - numeric) / std::max(1e-8, std::abs(numeric));
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_param = pi;
        report.worst_coordinate = i;
        report.analytic_at_worst = exact;
        report.numeric_at_worst = numeric;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace s6mod
