// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "s6mod/errors.hpp"
#include "s6mod/ops.hpp"
#include "s6mod/rng.hpp"
#include "s6mod/tensor.hpp"

namespace s6mod {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

/// y = x W + b applied to the rows of x.
struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    std::vector<double> b(out);
    for (auto& v : b) v = rng.uniform(-bound, bound);
    return {Tensor::from({in, out}, std::move(w), true), Tensor::from({out}, std::move(b), true)};
  }

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  /// Accepts any rank; the last axis is the feature axis.
  Tensor operator()(const Tensor& x) const {
    if (x.shape().back() != in_dim()) {
      throw DimensionError("Linear: input " + shape_str(x.shape()) + " does not end in " + std::to_string(in_dim()));
    }
    const std::size_t rows = x.numel() / in_dim();
    auto y = add(matmul(reshape(x, {rows, in_dim()}), weight), bias);
    Shape shape = x.shape();
    shape.back() = out_dim();
    return reshape(y, std::move(shape));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Euclidean norm of all gradients together.
inline double grad_norm(const ParamList& params) {
  double s = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) s += g * g;
  return std::sqrt(s);
}

/// Plain SGD; gradients are consumed and reset. With clip_norm > 0 the
/// update is rescaled so the global gradient norm is at most clip_norm.
inline void sgd_step(ParamList& params, double lr, double clip_norm = 0.0) {
  double scale = 1.0;
  if (clip_norm > 0.0) {
    const double norm = grad_norm(params);
    if (norm > clip_norm) scale = clip_norm / norm;
  }
  for (auto& p : params) {
    auto values = p.tensor.mutable_data();
    const auto grad = p.tensor.grad();
    if (grad.empty()) continue;
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * scale * grad[i];
    p.tensor.zero_grad();
  }
}

inline void zero_grad(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

/// Mean over the spatial axes of [B x H x W x C] -> [B x C].
inline Tensor spatial_mean(const Tensor& fmap) {
  if (fmap.rank() != 4) throw DimensionError("spatial_mean: expected [B x H x W x C], got " + shape_str(fmap.shape()));
  return mean(reshape(fmap, {fmap.dim(0), fmap.dim(1) * fmap.dim(2), fmap.dim(3)}), 1);
}

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t channels = 64;     // C_b, width of the emitted map
  std::size_t output_size = 4;   // spatial side of the emitted map
  double input_mean = 0.5;       // inputs are standardized as (x - mean) / scale
  double input_scale = 0.25;
};

/// Four conv3x3 + ReLU blocks; 2x2 average pooling follows a block while
/// the map is still larger than the output size. Widths: C/2, C/2, C, C.
class Backbone {
 public:
  Backbone() = default;

  static Backbone init(const BackboneConfig& config, Rng& rng) {
    if (config.channels < 2) throw ConfigError("backbone channels must be at least 2", "backbone_channels");
    Backbone net;
    net.config_ = config;
    const std::size_t half = config.channels / 2;
    const std::size_t widths[4] = {half, half, config.channels, config.channels};
    std::size_t cin = config.in_channels;
    for (auto cout : widths) {
      const double scale = std::sqrt(2.0 / (9.0 * static_cast<double>(cin)));
      std::vector<double> w(9 * cin * cout);
      for (auto& v : w) v = rng.normal(0.0, scale);
      net.weights_.push_back(Tensor::from({3, 3, cin, cout}, std::move(w), true));
      net.biases_.push_back(Tensor::zeros({cout}, true));
      cin = cout;
    }
    return net;
  }

  const BackboneConfig& config() const { return config_; }

  /// x: [B x H x W x C_in] -> [B x S x S x C_b].
  Tensor operator()(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(3) != config_.in_channels) {
      throw DimensionError("Backbone: expected [B x H x W x " + std::to_string(config_.in_channels) + "], got " +
                           shape_str(x.shape()));
    }
    Tensor h = (x + (-config_.input_mean)) * (1.0 / config_.input_scale);
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      h = relu(add(conv2d(h, weights_[i]), biases_[i]));
      if (h.dim(1) > config_.output_size) h = avg_pool2x2(h);
    }
    if (h.dim(1) != config_.output_size || h.dim(2) != config_.output_size) {
      throw DimensionError("Backbone: input " + shape_str(x.shape()) + " does not reduce to " +
                           std::to_string(config_.output_size) + "x" + std::to_string(config_.output_size));
    }
    return h;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      out.push_back({prefix + ".conv" + std::to_string(i) + ".weight", weights_[i]});
      out.push_back({prefix + ".conv" + std::to_string(i) + ".bias", biases_[i]});
    }
  }

 private:
  BackboneConfig config_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

}  // namespace s6mod
