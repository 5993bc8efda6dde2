// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "s6mod/errors.hpp"
#include "s6mod/ops.hpp"
#include "s6mod/rng.hpp"
#include "s6mod/tensor.hpp"

namespace s6mod {

/// N linear projections producing candidate time-scale fields, plus the
/// linear gate that scores them. Expert i occupies columns [i*D, (i+1)*D)
/// of `expert_weight`.
struct DiscretizationBank {
  std::size_t experts = 0;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Tensor expert_weight;  // [C x N*D]
  Tensor expert_bias;    // [N*D]
  Tensor gate_weight;    // [C x N]
  Tensor gate_bias;      // [N]

  static DiscretizationBank init(std::size_t in_dim, std::size_t out_dim, std::size_t experts, Rng& rng) {
    if (experts == 0) throw ConfigError("expert count must be at least 1", "experts");
    DiscretizationBank bank;
    bank.experts = experts;
    bank.in_dim = in_dim;
    bank.out_dim = out_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    std::vector<double> w(in_dim * experts * out_dim);
    for (auto& v : w) v = rng.normal(0.0, scale);
    std::vector<double> g(in_dim * experts);
    for (auto& v : g) v = rng.normal(0.0, scale);
    bank.expert_weight = Tensor::from({in_dim, experts * out_dim}, std::move(w), true);
    bank.expert_bias = Tensor::zeros({experts * out_dim}, true);
    bank.gate_weight = Tensor::from({in_dim, experts}, std::move(g), true);
    bank.gate_bias = Tensor::zeros({experts}, true);
    return bank;
  }
};

/// Raw (pre-softplus) candidates Delta_i = f_i(tokens) for every expert.
/// tokens: [T x C] -> [T x N x D]; [B x T x C] -> [B x T x N x D].
inline Tensor expert_deltas(const Tensor& tokens, const DiscretizationBank& bank) {
  if (tokens.rank() < 2 || tokens.shape().back() != bank.in_dim) {
    throw DimensionError("expert_deltas: tokens " + shape_str(tokens.shape()) + " do not match bank input dim " +
                         std::to_string(bank.in_dim));
  }
  const std::size_t rows = tokens.numel() / bank.in_dim;
  auto flat = add(matmul(reshape(tokens, {rows, bank.in_dim}), bank.expert_weight), bank.expert_bias);
  Shape shape(tokens.shape().begin(), tokens.shape().end() - 1);
  shape.push_back(bank.experts);
  shape.push_back(bank.out_dim);
  return reshape(flat, std::move(shape));
}

struct GateOutput {
  Tensor logits;   // [B x N]
  Tensor weights;  // softmax(logits), [B x N]
};

/// One gate decision per sample from its pooled feature ([C] or [B x C]).
inline GateOutput gate_weights(const Tensor& pooled, const DiscretizationBank& bank) {
  const auto rows = pooled.rank() == 1 ? reshape(pooled, {1, pooled.dim(0)}) : pooled;
  if (rows.rank() != 2 || rows.dim(1) != bank.in_dim) {
    throw DimensionError("gate_weights: pooled feature " + shape_str(pooled.shape()) + " does not match bank");
  }
  auto logits = add(matmul(rows, bank.gate_weight), bank.gate_bias);
  auto weights = softmax(logits, 1);
  return {std::move(logits), std::move(weights)};
}

/// The experts chosen for one sample.
struct RoutingDecision {
  std::vector<double> gate_logits;
  std::vector<double> weights;        // renormalized over `selected`, zero elsewhere
  std::vector<std::size_t> selected;  // Omega, by descending weight
  std::size_t count = 0;              // N_k == selected.size()
};

/// Top-k of `w_full` (ties go to the lower index), renormalized to sum 1.
inline RoutingDecision select_topk(std::span<const double> w_full, std::size_t k) {
  const std::size_t n = w_full.size();
  if (k < 1 || k > n) {
    throw ContractError("select_topk: N_k must lie in [1, " + std::to_string(n) + "], got " + std::to_string(k));
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return w_full[a] > w_full[b]; });
  RoutingDecision d;
  d.selected.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  d.count = k;
  d.weights.assign(n, 0.0);
  double total = 0.0;
  for (auto i : d.selected) total += w_full[i];
  for (auto i : d.selected) d.weights[i] = w_full[i] / total;
  return d;
}

/// Delta = softplus(sum_{i in Omega} w_i * Delta_i + bias), per token and
/// channel. `gate` holds the full softmax weights; the selection mask and
/// renormalization are applied in-graph so gradients reach both the
/// selected candidates and the gate.
/// candidates: [B x T x N x D], gate: [B x N], bias: [D] -> [B x T x D].
inline Tensor aggregate_delta(const Tensor& candidates, const Tensor& gate,
                              std::span<const RoutingDecision> decisions, const Tensor& bias) {
  if (candidates.rank() != 4) {
    throw DimensionError("aggregate_delta: candidates must be [B x T x N x D], got " + shape_str(candidates.shape()));
  }
  const std::size_t b = candidates.dim(0);
  const std::size_t n = candidates.dim(2);
  const std::size_t d = candidates.dim(3);
  if (gate.shape() != Shape{b, n} || decisions.size() != b || bias.shape() != Shape{d}) {
    throw DimensionError("aggregate_delta: gate " + shape_str(gate.shape()) + ", bias " + shape_str(bias.shape()) +
                         " or decision count inconsistent with candidates " + shape_str(candidates.shape()));
  }
  std::vector<double> mask(b * n, 0.0);
  for (std::size_t s = 0; s < b; ++s) {
    if (decisions[s].weights.size() != n) throw DimensionError("aggregate_delta: decision has wrong expert count");
    for (auto i : decisions[s].selected) mask[s * n + i] = 1.0;
  }
  const auto masked = mul(gate, Tensor::from({b, n}, std::move(mask)));
  const auto renorm = div(masked, sum(masked, 1, true));
  const auto mixed = sum(mul(candidates, reshape(renorm, {b, 1, n, 1})), 2);  // [B x T x D]
  return softplus(add(mixed, bias));
}

/// Trainable Delta bias with softplus(bias) log-uniform in [dt_min, dt_max].
inline Tensor init_delta_bias(std::size_t channels, Rng& rng, double dt_min = 0.01, double dt_max = 0.1) {
  std::vector<double> v(channels);
  for (auto& x : v) {
    const double dt = std::exp(rng.uniform(std::log(dt_min), std::log(dt_max)));
    x = std::log(std::expm1(dt));
  }
  return Tensor::from({channels}, std::move(v), true);
}

/// Per-class feature means maintained by exponential moving average.
/// Prototypes are statistics: they never receive gradients.
class PrototypeStore {
 public:
  PrototypeStore() = default;
  PrototypeStore(std::size_t classes, std::size_t dim, double momentum, double lambda0)
      : classes_(classes), dim_(dim), momentum_(momentum), lambda0_(lambda0),
        means_(classes * dim, 0.0), seen_(classes, false) {
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in (0, 1)", "momentum");
    if (!(lambda0 > 0.0)) throw ConfigError("lambda0 must be positive", "lambda0");
  }

  std::size_t classes() const { return classes_; }
  std::size_t dim() const { return dim_; }
  double momentum() const { return momentum_; }
  double lambda0() const { return lambda0_; }
  bool seen(std::size_t c) const { return seen_.at(c); }
  std::size_t seen_count() const { return static_cast<std::size_t>(std::count(seen_.begin(), seen_.end(), true)); }
  std::span<const double> prototype(std::size_t c) const { return {means_.data() + c * dim_, dim_}; }
  std::span<const double> raw_means() const { return means_; }

  /// Overwrites the state (checkpoint restore).
  void restore(std::vector<double> means, std::vector<bool> seen) {
    if (means.size() != classes_ * dim_ || seen.size() != classes_) {
      throw DimensionError("PrototypeStore::restore: size mismatch");
    }
    means_ = std::move(means);
    seen_ = std::move(seen);
  }

  /// One EMA step per class present in the batch, using that class's batch
  /// mean; a class seen for the first time is initialized to it.
  void update(std::span<const double> features, std::span<const std::size_t> labels) {
    if (features.size() != labels.size() * dim_) {
      throw DimensionError("PrototypeStore::update: expected " + std::to_string(labels.size()) + " x " +
                           std::to_string(dim_) + " features");
    }
    std::vector<double> sums(classes_ * dim_, 0.0);
    std::vector<std::size_t> counts(classes_, 0);
    for (std::size_t s = 0; s < labels.size(); ++s) {
      const std::size_t c = labels[s];
      if (c >= classes_) {
        throw ContractError("PrototypeStore::update: label " + std::to_string(c) + " outside " +
                            std::to_string(classes_) + " classes");
      }
      ++counts[c];
      for (std::size_t j = 0; j < dim_; ++j) sums[c * dim_ + j] += features[s * dim_ + j];
    }
    for (std::size_t c = 0; c < classes_; ++c) {
      if (counts[c] == 0) continue;
      const double inv = 1.0 / static_cast<double>(counts[c]);
      for (std::size_t j = 0; j < dim_; ++j) {
        const double batch_mean = sums[c * dim_ + j] * inv;
        double& m = means_[c * dim_ + j];
        m = seen_[c] ? momentum_ * m + (1.0 - momentum_) * batch_mean : batch_mean;
      }
      seen_[c] = true;
    }
  }

  /// sigma_k = mean over seen c != k of exp(-lambda0 * ||M_k - M_c||);
  /// 1 when k is the only seen class.
  double class_uncertainty(std::size_t k) const {
    if (k >= classes_ || !seen_[k]) {
      throw ContractError("class_uncertainty: class " + std::to_string(k) + " has no prototype yet");
    }
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < classes_; ++c) {
      if (c == k || !seen_[c]) continue;
      total += std::exp(-lambda0_ * distance(prototype(k), prototype(c)));
      ++n;
    }
    if (n == 0) return 1.0;
    return clamp_positive(total / static_cast<double>(n));
  }

  /// Inference-time uncertainty: the input feature takes the place of M_k
  /// and is compared with every seen prototype.
  double input_uncertainty(std::span<const double> feature) const {
    if (feature.size() != dim_) throw DimensionError("input_uncertainty: feature dimension mismatch");
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < classes_; ++c) {
      if (!seen_[c]) continue;
      total += std::exp(-lambda0_ * distance(feature, prototype(c)));
      ++n;
    }
    if (n == 0) throw ContractError("input_uncertainty: no class prototype has been observed");
    return clamp_positive(total / static_cast<double>(n));
  }

  static double distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  }

 private:
  // exp() underflows for very distant features; sigma stays in (0, 1].
  static double clamp_positive(double sigma) {
    return std::clamp(sigma, std::numeric_limits<double>::min(), 1.0);
  }

  std::size_t classes_ = 0;
  std::size_t dim_ = 0;
  double momentum_ = 0.9;
  double lambda0_ = 0.1;
  std::vector<double> means_;
  std::vector<bool> seen_;
};

/// N_k = ceil(N * sigma), kept in [1, N]. A 1e-9 slack absorbs rounding in
/// the product (0.3 * 10 must give 3, not 4).
inline std::size_t route_count(double sigma, std::size_t experts) {
  if (experts == 0) throw ContractError("route_count: expert count must be positive");
  const double scaled = std::ceil(static_cast<double>(experts) * sigma - 1e-9);
  if (!(scaled >= 1.0)) return 1;
  return std::min(experts, static_cast<std::size_t>(scaled));
}

/// Router z-loss: mean over samples of logsumexp(logits)^2.
inline Tensor z_loss(const Tensor& gate_logits) {
  const auto rows = gate_logits.rank() == 1 ? reshape(gate_logits, {1, gate_logits.dim(0)}) : gate_logits;
  return mean(square(logsumexp(rows, 1)));
}

}  // namespace s6mod
