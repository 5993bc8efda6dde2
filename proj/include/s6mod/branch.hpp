// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s6mod/errors.hpp"
#include "s6mod/nn.hpp"
#include "s6mod/ops.hpp"
#include "s6mod/rng.hpp"
#include "s6mod/routing.hpp"
#include "s6mod/ssm_scan.hpp"
#include "s6mod/tensor.hpp"

namespace s6mod {

inline constexpr double kNormEpsilon = 1e-8;

enum class RoutingMode { class_conditional, fixed };

struct BranchConfig {
  std::size_t in_channels = 64;  // C_b
  std::size_t width = 16;        // D
  std::size_t state_size = 8;
  std::size_t experts = 10;
  std::size_t conv_kernel = 3;
  std::size_t directions = 4;
  std::size_t classes = 10;
  double lambda0 = 0.1;
  double momentum = 0.9;
  double alpha = 1.0;
  double beta = 5.0;
  ZohMode zoh_mode = ZohMode::exact;
  RoutingMode routing = RoutingMode::class_conditional;
  std::size_t fixed_k = 1;  // used when routing == fixed
  bool stop_q_grad = false;

  void validate() const {
    if (in_channels == 0) throw ConfigError("backbone channels must be positive", "backbone_channels");
    if (width == 0) throw ConfigError("branch width must be positive", "width");
    if (state_size == 0) throw ConfigError("state size must be positive", "state_size");
    if (experts == 0) throw ConfigError("expert count must be at least 1", "experts");
    if (conv_kernel % 2 == 0) throw ConfigError("conv kernel must be odd", "conv_kernel");
    if (directions != 1 && directions != 4) throw ConfigError("direction count must be 1 or 4", "directions");
    if (classes < 2) throw ConfigError("at least two classes are required", "classes");
    if (width + 1 < classes) {
      throw ConfigError("branch width " + std::to_string(width) + " is below classes - 1 = " +
                            std::to_string(classes - 1) + " required by the ETF head",
                        "width");
    }
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative", "alpha");
    if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative", "beta");
    if (!(lambda0 > 0.0)) throw ConfigError("lambda0 must be positive", "lambda0");
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in (0, 1)", "momentum");
    if (routing == RoutingMode::fixed && fixed_k == 0) throw ConfigError("fixed-k needs k >= 1", "routing");
  }
};

/// Fixed simplex classifier: K unit rows in R^d with pairwise dot -1/(K-1).
struct ETFClassifier {
  std::size_t classes = 0;
  std::size_t dim = 0;
  Tensor weight;  // [K x d], constant

  Tensor logits(const Tensor& features) const { return matmul(features, transpose(weight)); }
};

namespace detail {

/// Orthonormalizes the columns of a row-major rows x cols matrix in place
/// (modified Gram-Schmidt, two passes).
inline void orthonormalize_columns(std::vector<double>& m, std::size_t rows, std::size_t cols) {
  for (std::size_t j = 0; j < cols; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t r = 0; r < rows; ++r) dot += m[r * cols + j] * m[r * cols + k];
        for (std::size_t r = 0; r < rows; ++r) m[r * cols + j] -= dot * m[r * cols + k];
      }
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < rows; ++r) norm += m[r * cols + j] * m[r * cols + j];
    norm = std::sqrt(norm);
    if (!(norm > 1e-12)) throw NumericError("orthonormalize_columns: rank-deficient input");
    for (std::size_t r = 0; r < rows; ++r) m[r * cols + j] /= norm;
  }
}

}  // namespace detail

/// W = sqrt(K/(K-1)) * V * U^T, where the columns of V (K x K-1) are an
/// orthonormal basis of the centering projector I - 11^T/K and U (d x K-1)
/// is a seeded random orthonormal frame.
inline ETFClassifier build_etf(std::size_t classes, std::size_t dim, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("ETF needs at least two classes", "classes");
  if (dim + 1 < classes) {
    throw ConfigError("ETF feature dim " + std::to_string(dim) + " must be at least classes - 1 = " +
                          std::to_string(classes - 1),
                      "width");
  }
  const std::size_t k = classes;
  const std::size_t r = k - 1;
  const double kd = static_cast<double>(k);

  std::vector<double> v(k * r);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < r; ++j) v[i * r + j] = (i == j ? 1.0 : 0.0) - 1.0 / kd;
  detail::orthonormalize_columns(v, k, r);

  Rng rng(seed);
  std::vector<double> u(dim * r);
  for (auto& x : u) x = rng.normal();
  detail::orthonormalize_columns(u, dim, r);

  const double scale = std::sqrt(kd / (kd - 1.0));
  std::vector<double> w(k * dim, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t c = 0; c < dim; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < r; ++j) s += v[i * r + j] * u[c * r + j];
      w[i * dim + c] = scale * s;
    }
  return {k, dim, Tensor::from({k, dim}, std::move(w))};
}

struct BranchOutput {
  Tensor mu;           // [B x D]
  Tensor q;            // [B x K], softmax of ETF logits
  Tensor delta;        // [B x T x D], aggregated time scales
  Tensor gate_logits;  // [B x N]
  Tensor pooled_input; // [B x D], spatial mean of x-hat (prototype feature)
  std::vector<RoutingDecision> decisions;
  std::vector<double> sigma;
};

/// Side branch: two projections of the backbone map, a depthwise conv on
/// one path, the 2D selective scan with routed discretization, and a SiLU
/// gate from the other path.
class S6ModBranch {
 public:
  S6ModBranch() = default;

  static S6ModBranch init(const BranchConfig& config, std::uint64_t seed) {
    config.validate();
    S6ModBranch b;
    b.config_ = config;
    Rng rng(Rng::mix(seed, 0x6272616e6368ULL));
    b.f_x_ = Linear::init(config.in_channels, config.width, rng);
    b.f_z_ = Linear::init(config.in_channels, config.width, rng);
    const std::size_t kk = config.conv_kernel * config.conv_kernel;
    std::vector<double> kernel(kk * config.width);
    const double bound = 1.0 / std::sqrt(static_cast<double>(kk));
    for (auto& x : kernel) x = rng.uniform(-bound, bound);
    b.conv_weight_ = Tensor::from({config.conv_kernel, config.conv_kernel, config.width}, std::move(kernel), true);
    b.conv_bias_ = Tensor::zeros({config.width}, true);
    for (std::size_t i = 0; i < config.directions; ++i)
      b.dirs_.push_back(DirectionParams::init(config.width, config.state_size, rng));
    b.bank_ = DiscretizationBank::init(config.width, config.width, config.experts, rng);
    b.delta_bias_ = init_delta_bias(config.width, rng);
    b.etf_ = build_etf(config.classes, config.width, Rng::mix(seed, 0x657466ULL));
    b.store_ = PrototypeStore(config.classes, config.width, config.momentum, config.lambda0);
    return b;
  }

  const BranchConfig& config() const { return config_; }
  const ETFClassifier& etf() const { return etf_; }
  ETFClassifier& etf() { return etf_; }
  const PrototypeStore& store() const { return store_; }
  PrototypeStore& store() { return store_; }
  const DiscretizationBank& bank() const { return bank_; }
  const std::vector<DirectionParams>& directions() const { return dirs_; }
  const Linear& f_x() const { return f_x_; }
  const Linear& f_z() const { return f_z_; }
  const Tensor& conv_weight() const { return conv_weight_; }
  const Tensor& conv_bias() const { return conv_bias_; }
  const Tensor& delta_bias() const { return delta_bias_; }

  void collect(const std::string& prefix, ParamList& out) const {
    f_x_.collect(prefix + ".f_x", out);
    f_z_.collect(prefix + ".f_z", out);
    out.push_back({prefix + ".conv.weight", conv_weight_});
    out.push_back({prefix + ".conv.bias", conv_bias_});
    for (std::size_t i = 0; i < dirs_.size(); ++i) {
      const auto p = prefix + ".dir" + std::to_string(i + 1);
      out.push_back({p + ".a_log", dirs_[i].a_log});
      out.push_back({p + ".w_b", dirs_[i].w_b});
      out.push_back({p + ".w_c", dirs_[i].w_c});
    }
    out.push_back({prefix + ".experts.weight", bank_.expert_weight});
    out.push_back({prefix + ".experts.bias", bank_.expert_bias});
    out.push_back({prefix + ".gate.weight", bank_.gate_weight});
    out.push_back({prefix + ".gate.bias", bank_.gate_bias});
    out.push_back({prefix + ".delta_bias", delta_bias_});
  }

  /// Uncertainty used to size the route of one sample. With a label the
  /// class prototype is used; without one, the pooled input feature.
  double routing_sigma(std::span<const double> pooled, std::optional<std::size_t> label) const {
    if (label) return store_.seen(*label) ? store_.class_uncertainty(*label) : 1.0;
    return store_.seen_count() == 0 ? 1.0 : store_.input_uncertainty(pooled);
  }

  std::size_t routing_count(double sigma) const {
    if (config_.routing == RoutingMode::fixed) return std::min(config_.fixed_k, config_.experts);
    return route_count(sigma, config_.experts);
  }

  /// fmap: [B x H x W x C_b]. Labels select training-time routing; pass an
  /// empty span at inference.
  BranchOutput forward(const Tensor& fmap, std::span<const std::size_t> labels = {}) const {
    if (fmap.rank() != 4 || fmap.dim(3) != config_.in_channels) {
      throw DimensionError("branch: expected [B x H x W x " + std::to_string(config_.in_channels) + "], got " +
                           shape_str(fmap.shape()));
    }
    const std::size_t batch = fmap.dim(0);
    const std::size_t tokens = fmap.dim(1) * fmap.dim(2);
    const std::size_t width = config_.width;
    if (!labels.empty() && labels.size() != batch) {
      throw DimensionError("branch: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
    }

    const auto x = f_x_(fmap);
    const auto z = f_z_(fmap);
    const auto x_hat = silu(add(depthwise_conv2d(x, conv_weight_), conv_bias_));
    const auto token_seq = reshape(x_hat, {batch, tokens, width});

    BranchOutput out;
    out.pooled_input = mean(token_seq, 1);
    const auto gate = gate_weights(out.pooled_input, bank_);
    out.gate_logits = gate.logits;

    const auto pooled = out.pooled_input.data();
    const auto w_full = gate.weights.data();
    for (std::size_t s = 0; s < batch; ++s) {
      std::optional<std::size_t> label;
      if (!labels.empty()) label = labels[s];
      const double sigma = routing_sigma(pooled.subspan(s * width, width), label);
      out.sigma.push_back(sigma);
      out.decisions.push_back(
          select_topk(w_full.subspan(s * config_.experts, config_.experts), routing_count(sigma)));
    }
    out.delta = aggregate_delta(expert_deltas(token_seq, bank_), gate.weights, out.decisions, delta_bias_);

    const auto scanned = ss2d(x_hat, std::span<const DirectionParams>(dirs_), out.delta, config_.zoh_mode);
    out.mu = spatial_mean(mul(silu(z), scanned));
    out.q = softmax(etf_.logits(out.mu), 1);
    return out;
  }

  /// EMA update from the pooled branch inputs of a finished step.
  void update_prototypes(const Tensor& pooled_input, std::span<const std::size_t> labels) {
    store_.update(pooled_input.data(), labels);
  }

 private:
  BranchConfig config_;
  Linear f_x_;
  Linear f_z_;
  Tensor conv_weight_;
  Tensor conv_bias_;
  std::vector<DirectionParams> dirs_;
  DiscretizationBank bank_;
  Tensor delta_bias_;
  ETFClassifier etf_;
  PrototypeStore store_;
};

/// Mean over the batch of 1/2 (w_y . mu_hat - 1)^2, mu_hat = mu / max(|mu|, eps).
inline Tensor dr_loss(const Tensor& mu, std::span<const std::size_t> labels, const ETFClassifier& etf) {
  if (mu.rank() != 2 || mu.dim(1) != etf.dim || labels.size() != mu.dim(0)) {
    throw DimensionError("dr_loss: features " + shape_str(mu.shape()) + " do not match labels/ETF");
  }
  for (auto y : labels)
    if (y >= etf.classes) throw ContractError("dr_loss: label " + std::to_string(y) + " outside the ETF classes");
  const auto norm = sqrt(clamp_min(sum(square(mu), 1, true), kNormEpsilon * kNormEpsilon));
  const auto cos = sum(mul(div(mu, norm), take(etf.weight, 0, std::vector<std::size_t>(labels.begin(), labels.end()))), 1);
  return mean(0.5 * square(cos + (-1.0)));
}

/// Mean over the batch of KL(P || Q); both sides are eps-smoothed and
/// renormalized. `stop_q_grad` treats Q as a constant target.
inline Tensor diff_loss(const Tensor& p, const Tensor& q, bool stop_q_grad = false) {
  if (p.rank() != 2 || p.shape() != q.shape()) {
    throw DimensionError("diff_loss: P " + shape_str(p.shape()) + " and Q " + shape_str(q.shape()) + " differ");
  }
  auto smooth = [](const Tensor& t) {
    const auto s = t + kNormEpsilon;
    return div(s, sum(s, 1, true));
  };
  const auto ps = smooth(p);
  const auto qs = smooth(stop_q_grad ? q.detach() : q);
  return mean(sum(mul(ps, sub(log(ps), log(qs))), 1));
}

/// -(1/B^2) sum_{m,n} s_mn cos(delta_m, delta_n) with s = +1 for equal labels
/// and -1 otherwise; the diagonal is included. delta: [B x ...].
inline Tensor cont_loss(const Tensor& delta, std::span<const std::size_t> labels) {
  const std::size_t b = delta.dim(0);
  if (labels.size() != b) throw DimensionError("cont_loss: label count does not match batch");
  const auto rows = reshape(delta, {b, delta.numel() / b});
  const auto unit = div(rows, sqrt(clamp_min(sum(square(rows), 1, true), kNormEpsilon * kNormEpsilon)));
  const auto gram = matmul(unit, transpose(unit));
  std::vector<double> sign(b * b);
  for (std::size_t m = 0; m < b; ++m)
    for (std::size_t n = 0; n < b; ++n) sign[m * b + n] = labels[m] == labels[n] ? 1.0 : -1.0;
  const double scale = -1.0 / static_cast<double>(b * b);
  return scale * sum(mul(gram, Tensor::from({b, b}, std::move(sign))));
}

struct LossTerms {
  Tensor dr;
  Tensor diff;
  Tensor cont;
  Tensor z;
  Tensor total;  // dr + alpha * diff + beta * cont + z
};

/// dr + alpha * diff + beta * cont + z.
inline Tensor combine_branch_losses(const Tensor& dr, const Tensor& diff, const Tensor& cont, const Tensor& z,
                                    double alpha, double beta) {
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative", "alpha");
  if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative", "beta");
  return add(add(add(dr, alpha * diff), beta * cont), z);
}

/// All branch terms for one step. `p_base` is the base head's softmax.
inline LossTerms s6mod_loss(const BranchOutput& out, const Tensor& p_base, std::span<const std::size_t> labels,
                            const ETFClassifier& etf, double alpha, double beta, bool stop_q_grad = false) {
  LossTerms t;
  t.dr = dr_loss(out.mu, labels, etf);
  t.diff = diff_loss(p_base, out.q, stop_q_grad);
  t.cont = cont_loss(out.delta, labels);
  t.z = z_loss(out.gate_logits);
  t.total = combine_branch_losses(t.dr, t.diff, t.cont, t.z, alpha, beta);
  return t;
}

}  // namespace s6mod
