// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "s6mod/errors.hpp"
#include "s6mod/ops.hpp"
#include "s6mod/rng.hpp"
#include "s6mod/tensor.hpp"

namespace s6mod {

/// exact:      A_bar = exp(dt*A), B_bar = (exp(dt*A) - 1) / A * B
/// simplified: A_bar = exp(dt*A), B_bar = dt * B
enum class ZohMode { exact, simplified };

inline const char* to_string(ZohMode mode) { return mode == ZohMode::exact ? "exact" : "simplified"; }

inline ZohMode zoh_mode_from_string(const std::string& s) {
  if (s == "exact") return ZohMode::exact;
  if (s == "simplified") return ZohMode::simplified;
  throw ConfigError("expected 'exact' or 'simplified', got '" + s + "'", "zoh_mode");
}

/// Parameters of one selective scan. Shapes, with an optional leading batch
/// dimension on the per-token fields:
///   A [D x N] (all < 0), delta [L x D] (all > 0), B [L x N], C [L x N].
template <class Real>
struct BasicScanParams {
  BasicTensor<Real> A;
  BasicTensor<Real> delta;
  BasicTensor<Real> B;
  BasicTensor<Real> C;
};

using ScanParams = BasicScanParams<double>;

namespace detail {

template <class Real>
void check_scan_domain(const BasicTensor<Real>& A, const BasicTensor<Real>& delta) {
  for (auto a : A.data()) {
    if (!(a < Real(0))) throw DomainError("state matrix entries must be strictly negative, got " + std::to_string(a));
  }
  for (auto d : delta.data()) {
    if (!(d > Real(0))) throw DomainError("time steps must be strictly positive, got " + std::to_string(d));
  }
}

inline Shape with_trailing(Shape s, std::size_t extra) {
  s.push_back(extra);
  return s;
}

inline Shape insert_before_last(Shape s, std::size_t extra) {
  s.insert(s.end() - 1, extra);
  return s;
}

}  // namespace detail

/// Zero-order-hold discretization of a diagonal continuous system.
/// Returns (A_bar, B_bar), each [..., L x D x N].
template <class Real>
std::pair<BasicTensor<Real>, BasicTensor<Real>> zoh_discretize(const BasicTensor<Real>& A,
                                                               const BasicTensor<Real>& delta,
                                                               const BasicTensor<Real>& B, ZohMode mode) {
  if (A.rank() != 2) throw DimensionError("zoh_discretize: A must be [D x N], got " + shape_str(A.shape()));
  if (delta.rank() < 2 || delta.shape().back() != A.dim(0)) {
    throw DimensionError("zoh_discretize: delta " + shape_str(delta.shape()) + " does not match A " +
                         shape_str(A.shape()));
  }
  if (B.rank() != delta.rank() || B.shape().back() != A.dim(1) ||
      !std::equal(B.shape().begin(), B.shape().end() - 1, delta.shape().begin())) {
    throw DimensionError("zoh_discretize: B " + shape_str(B.shape()) + " does not match delta " +
                         shape_str(delta.shape()) + " and A " + shape_str(A.shape()));
  }
  detail::check_scan_domain(A, delta);

  const auto dt = reshape(delta, detail::with_trailing(delta.shape(), 1));  // [..., L, D, 1]
  const auto b = reshape(B, detail::insert_before_last(B.shape(), 1));       // [..., L, 1, N]
  const auto dt_a = mul(dt, A);                                              // [..., L, D, N]
  auto a_bar = exp(dt_a);
  auto b_bar = mode == ZohMode::exact ? mul(div(expm1(dt_a), A), b) : mul(dt, b);
  return {std::move(a_bar), std::move(b_bar)};
}

/// Diagonal linear recurrence per channel d, starting from h = 0:
///   h_t = A_bar_t * h_{t-1} + B_bar_t * x_{t,d},   y_{t,d} = <C_t, h_t>.
/// a_bar, b_bar: [..., L, D, N]; x: [..., L, D]; c: [..., L, N].
template <class Real>
BasicTensor<Real> linear_recurrence(const BasicTensor<Real>& a_bar, const BasicTensor<Real>& b_bar,
                                    const BasicTensor<Real>& x, const BasicTensor<Real>& c) {
  if (a_bar.shape() != b_bar.shape() || a_bar.rank() < 3 || x.rank() + 1 != a_bar.rank() ||
      c.rank() + 1 != a_bar.rank()) {
    throw DimensionError("linear_recurrence: inconsistent ranks");
  }
  const std::size_t r = a_bar.rank();
  const std::size_t len = a_bar.dim(r - 3);
  const std::size_t chans = a_bar.dim(r - 2);
  const std::size_t nstate = a_bar.dim(r - 1);
  if (!std::equal(x.shape().begin(), x.shape().end(), a_bar.shape().begin()) ||
      c.shape().back() != nstate || c.dim(r - 3) != len ||
      !std::equal(c.shape().begin(), c.shape().end() - 1, a_bar.shape().begin())) {
    throw DimensionError("linear_recurrence: x " + shape_str(x.shape()) + " / C " + shape_str(c.shape()) +
                         " do not match discretized parameters " + shape_str(a_bar.shape()));
  }
  const std::size_t batch = a_bar.numel() / (len * chans * nstate);
  const auto av = a_bar.data();
  const auto bv = b_bar.data();
  const auto xv = x.data();
  const auto cv = c.data();

  // States are kept for the backward sweep: hs[((b*L + t)*D + d)*N + n].
  std::vector<Real> hs(a_bar.numel());
  std::vector<Real> y(batch * len * chans, Real(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t d = 0; d < chans; ++d) {
        const std::size_t base = ((b * len + t) * chans + d) * nstate;
        const std::size_t prev = base - chans * nstate;
        const Real xin = xv[(b * len + t) * chans + d];
        const Real* ct = cv.data() + (b * len + t) * nstate;
        Real acc{};
        for (std::size_t n = 0; n < nstate; ++n) {
          const Real hprev = t == 0 ? Real(0) : hs[prev + n];
          const Real h = av[base + n] * hprev + bv[base + n] * xin;
          hs[base + n] = h;
          acc += ct[n] * h;
        }
        y[(b * len + t) * chans + d] = acc;
      }

  return detail::make_result<Real>(
      "linear_recurrence", x.shape(), std::move(y), {a_bar, b_bar, x, c},
      [batch, len, chans, nstate, hs = std::move(hs)](detail::Node<Real>& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        const auto& xv = self.inputs[2]->value;
        const auto& cv = self.inputs[3]->value;
        auto grad_of = [&](std::size_t i) {
          return self.inputs[i]->requires_grad ? &self.inputs[i]->ensure_grad() : nullptr;
        };
        auto* ga = grad_of(0);
        auto* gb = grad_of(1);
        auto* gx = grad_of(2);
        auto* gc = grad_of(3);
        const auto& gy = self.grad;
        std::vector<Real> carry(chans * nstate);
        for (std::size_t b = 0; b < batch; ++b) {
          std::fill(carry.begin(), carry.end(), Real(0));
          for (std::size_t t = len; t-- > 0;) {
            for (std::size_t d = 0; d < chans; ++d) {
              const std::size_t base = ((b * len + t) * chans + d) * nstate;
              const std::size_t yi = (b * len + t) * chans + d;
              const Real g = gy[yi];
              const Real xin = xv[yi];
              const Real* ct = cv.data() + (b * len + t) * nstate;
              Real* dh_carry = carry.data() + d * nstate;
              Real dx{};
              for (std::size_t n = 0; n < nstate; ++n) {
                const Real dh = g * ct[n] + dh_carry[n];
                const Real hprev = t == 0 ? Real(0) : hs[base - chans * nstate + n];
                if (gc) (*gc)[(b * len + t) * nstate + n] += g * hs[base + n];
                if (ga) (*ga)[base + n] += dh * hprev;
                if (gb) (*gb)[base + n] += dh * xin;
                dx += dh * bv[base + n];
                dh_carry[n] = dh * av[base + n];
              }
              if (gx) (*gx)[yi] += dx;
            }
          }
        }
      });
}

/// Selective scan y = S6(x) with ZOH-discretized per-token parameters.
/// x: [..., L x D]; see BasicScanParams for parameter shapes.
template <class Real>
BasicTensor<Real> selective_scan(const BasicTensor<Real>& x, const BasicScanParams<Real>& params,
                                 ZohMode mode = ZohMode::exact) {
  if (x.shape() != params.delta.shape()) {
    throw DimensionError("selective_scan: x " + shape_str(x.shape()) + " and delta " +
                         shape_str(params.delta.shape()) + " differ");
  }
  if (params.C.shape() != params.B.shape()) {
    throw DimensionError("selective_scan: B " + shape_str(params.B.shape()) + " and C " +
                         shape_str(params.C.shape()) + " differ");
  }
  auto [a_bar, b_bar] = zoh_discretize(params.A, params.delta, params.B, mode);
  return linear_recurrence(a_bar, b_bar, x, params.C);
}

// ---------------------------------------------------------------------------
// Four-direction spatial serialization

enum class ScanDirection { row_forward = 1, row_backward = 2, column_forward = 3, column_backward = 4 };

inline ScanDirection direction_from_index(int index) {
  if (index < 1 || index > 4) {
    throw ConfigError("scan direction must be in 1..4, got " + std::to_string(index), "direction");
  }
  return static_cast<ScanDirection>(index);
}

/// Row-major token indices (y*W + x) in the order a direction visits them.
inline std::vector<std::size_t> scan_order(std::size_t height, std::size_t width, ScanDirection dir) {
  std::vector<std::size_t> order;
  order.reserve(height * width);
  const bool by_column = dir == ScanDirection::column_forward || dir == ScanDirection::column_backward;
  if (by_column) {
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t y = 0; y < height; ++y) order.push_back(y * width + x);
  } else {
    for (std::size_t i = 0; i < height * width; ++i) order.push_back(i);
  }
  if (dir == ScanDirection::row_backward || dir == ScanDirection::column_backward) {
    std::reverse(order.begin(), order.end());
  }
  return order;
}

inline std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> order) {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inv[order[i]] = i;
  return inv;
}

/// A feature map flattened into a token sequence along one direction.
/// `values` is [L x C] (or [B x L x C] for batched maps).
template <class Real>
struct BasicDirectionalSequence {
  ScanDirection direction = ScanDirection::row_forward;
  std::size_t height = 0;
  std::size_t width = 0;
  bool batched = false;
  std::vector<std::size_t> order;
  BasicTensor<Real> values;
};

using DirectionalSequence = BasicDirectionalSequence<double>;

template <class Real>
BasicDirectionalSequence<Real> scan_serialize(const BasicTensor<Real>& fmap, ScanDirection dir) {
  const auto dims = detail::map_dims(fmap, "scan_serialize");
  const int index = static_cast<int>(dir);
  if (index < 1 || index > 4) throw ConfigError("invalid scan direction", "direction");
  BasicDirectionalSequence<Real> seq;
  seq.direction = dir;
  seq.height = dims.height;
  seq.width = dims.width;
  seq.batched = fmap.rank() == 4;
  seq.order = scan_order(dims.height, dims.width, dir);
  const std::size_t tokens = dims.height * dims.width;
  if (seq.batched) {
    seq.values = take(reshape(fmap, {dims.batch, tokens, dims.channels}), 1, seq.order);
  } else {
    seq.values = take(reshape(fmap, {tokens, dims.channels}), 0, seq.order);
  }
  return seq;
}

/// Inverse of scan_serialize for (possibly transformed) sequence values.
template <class Real>
BasicTensor<Real> scan_deserialize(const BasicDirectionalSequence<Real>& seq, const BasicTensor<Real>& values) {
  const std::size_t tokens = seq.height * seq.width;
  const auto inv = inverse_permutation(seq.order);
  if (seq.batched) {
    if (values.rank() != 3 || values.dim(1) != tokens) {
      throw DimensionError("scan_deserialize: expected [B x " + std::to_string(tokens) + " x C], got " +
                           shape_str(values.shape()));
    }
    return reshape(take(values, 1, inv), {values.dim(0), seq.height, seq.width, values.dim(2)});
  }
  if (values.rank() != 2 || values.dim(0) != tokens) {
    throw DimensionError("scan_deserialize: expected [" + std::to_string(tokens) + " x C], got " +
                         shape_str(values.shape()));
  }
  return reshape(take(values, 0, inv), {seq.height, seq.width, values.dim(1)});
}

template <class Real>
BasicTensor<Real> scan_deserialize(const BasicDirectionalSequence<Real>& seq) {
  return scan_deserialize(seq, seq.values);
}

/// Trainable parameters of one scan direction. A = -exp(a_log) stays
/// strictly negative; w_b and w_c project a D-channel token to B and C.
template <class Real>
struct BasicDirectionParams {
  BasicTensor<Real> a_log;  // [D x N]
  BasicTensor<Real> w_b;    // [D x N]
  BasicTensor<Real> w_c;    // [D x N]

  BasicTensor<Real> state_matrix() const { return neg(exp(a_log)); }

  /// -A[d][n] = n + 1; projections ~ N(0, 1/D).
  static BasicDirectionParams init(std::size_t channels, std::size_t state_size, Rng& rng) {
    std::vector<Real> a(channels * state_size);
    for (std::size_t d = 0; d < channels; ++d)
      for (std::size_t n = 0; n < state_size; ++n) a[d * state_size + n] = std::log(static_cast<Real>(n + 1));
    auto gaussian = [&] {
      std::vector<Real> w(channels * state_size);
      const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
      for (auto& v : w) v = static_cast<Real>(rng.normal(0.0, scale));
      return w;
    };
    BasicDirectionParams p;
    p.a_log = BasicTensor<Real>::from({channels, state_size}, std::move(a), true);
    p.w_b = BasicTensor<Real>::from({channels, state_size}, gaussian(), true);
    p.w_c = BasicTensor<Real>::from({channels, state_size}, gaussian(), true);
    return p;
  }
};

using DirectionParams = BasicDirectionParams<double>;

namespace detail {

template <class Real>
BasicTensor<Real> project_tokens(const BasicTensor<Real>& seq, const BasicTensor<Real>& weight) {
  // seq [B, L, D] -> [B, L, N]
  const std::size_t b = seq.dim(0);
  const std::size_t l = seq.dim(1);
  return reshape(matmul(reshape(seq, {b * l, seq.dim(2)}), weight), {b, l, weight.dim(1)});
}

}  // namespace detail

/// Sums selective scans over the first `dirs.size()` directions (1..4):
///   out = sum_i deserialize_i(S6(serialize_i(fmap))).
/// fmap: [H x W x D] or [B x H x W x D]; delta: row-major tokens,
/// [(H*W) x D] or [B x (H*W) x D], permuted into each direction's order.
template <class Real>
BasicTensor<Real> ss2d(const BasicTensor<Real>& fmap, std::span<const BasicDirectionParams<Real>> dirs,
                       const BasicTensor<Real>& delta, ZohMode mode = ZohMode::exact) {
  if (dirs.empty() || dirs.size() > 4) {
    throw ConfigError("ss2d needs between 1 and 4 directions, got " + std::to_string(dirs.size()), "directions");
  }
  const bool batched = fmap.rank() == 4;
  const auto dims = detail::map_dims(fmap, "ss2d");
  const std::size_t tokens = dims.height * dims.width;
  const Shape delta_shape = batched ? Shape{dims.batch, tokens, dims.channels} : Shape{tokens, dims.channels};
  if (delta.shape() != delta_shape) {
    throw DimensionError("ss2d: delta must be " + shape_str(delta_shape) + ", got " + shape_str(delta.shape()));
  }
  const auto map4 = batched ? fmap : reshape(fmap, {1, dims.height, dims.width, dims.channels});
  const auto delta3 = batched ? delta : reshape(delta, {1, tokens, dims.channels});

  BasicTensor<Real> total;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const auto seq = scan_serialize(map4, direction_from_index(static_cast<int>(i + 1)));
    BasicScanParams<Real> params{dirs[i].state_matrix(), take(delta3, 1, seq.order),
                                 detail::project_tokens(seq.values, dirs[i].w_b),
                                 detail::project_tokens(seq.values, dirs[i].w_c)};
    const auto out = scan_deserialize(seq, selective_scan(seq.values, params, mode));
    total = total.defined() ? add(total, out) : out;
  }
  return batched ? total : reshape(total, fmap.shape());
}

}  // namespace s6mod
