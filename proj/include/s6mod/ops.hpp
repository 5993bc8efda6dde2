// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "s6mod/errors.hpp"
#include "s6mod/tensor.hpp"

namespace s6mod {

namespace detail {

template <class Real>
inline void accumulate_into(Node<Real>& self, std::size_t input, auto&& fn) {
  auto& in = *self.inputs[input];
  if (!in.requires_grad) return;
  fn(in.ensure_grad());
}

/// Output shape and per-operand strides for numpy-style broadcasting.
/// Stride 0 marks a broadcast dimension.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
  bool a_is_out = false;
  bool b_scalar = false;
};

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i > 1; --i) s[i - 2] = s[i - 1] * shape[i - 1];
  return s;
}

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  bc.same = a == b;
  bc.b_scalar = shape_numel(b) == 1;
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank - a.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  Shape pb(rank - b.size(), 1);
  pb.insert(pb.end(), b.begin(), b.end());
  const auto sa = row_major_strides(pa);
  const auto sb = row_major_strides(pb);
  bc.out.resize(rank);
  bc.stride_a.resize(rank);
  bc.stride_b.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[d] = std::max(pa[d], pb[d]);
    bc.stride_a[d] = pa[d] == 1 ? 0 : sa[d];
    bc.stride_b[d] = pb[d] == 1 ? 0 : sb[d];
  }
  bc.a_is_out = pa == bc.out;
  if (bc.same) bc.out = a;
  return bc;
}

/// Calls f(i, ia, ib) for every flat output index i.
template <class F>
void broadcast_for_each(const Broadcast& bc, F&& f) {
  const std::size_t n = shape_numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  if (bc.b_scalar && bc.a_is_out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

template <class Real, class Fwd, class Bwd>
BasicTensor<Real> binary_op(const char* name, const BasicTensor<Real>& a, const BasicTensor<Real>& b, Fwd fwd,
                            Bwd bwd) {
  auto bc = broadcast_shapes(a.shape(), b.shape(), name);
  std::vector<Real> out(shape_numel(bc.out));
  const auto av = a.data();
  const auto bv = b.data();
  broadcast_for_each(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  Shape shape = bc.out;
  return make_result<Real>(name, std::move(shape), std::move(out), {a, b}, [bc, bwd](Node<Real>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const bool need_a = self.inputs[0]->requires_grad;
    const bool need_b = self.inputs[1]->requires_grad;
    std::vector<Real>* ga = need_a ? &self.inputs[0]->ensure_grad() : nullptr;
    std::vector<Real>* gb = need_b ? &self.inputs[1]->ensure_grad() : nullptr;
    const auto& g = self.grad;
    broadcast_for_each(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      Real da{};
      Real db{};
      bwd(av[ia], bv[ib], g[i], da, db);
      if (ga) (*ga)[ia] += da;
      if (gb) (*gb)[ib] += db;
    });
  });
}

template <class Real, class Fwd, class Bwd>
BasicTensor<Real> unary_op(const char* name, const BasicTensor<Real>& a, Fwd fwd, Bwd bwd) {
  const auto av = a.data();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result<Real>(name, a.shape(), std::move(out), {a}, [bwd](Node<Real>& self) {
    accumulate_into(self, 0, [&](std::vector<Real>& ga) {
      const auto& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += bwd(x[i], self.value[i], self.grad[i]);
    });
  });
}

inline std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

/// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.n = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out.push_back(1);
  }
  return out;
}

template <class Real>
Real sigmoid_value(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (broadcasting)

template <class Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return detail::binary_op(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real, Real g, Real& da, Real& db) {
        da = g;
        db = g;
      });
}

template <class Real>
BasicTensor<Real> sub(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return detail::binary_op(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real, Real g, Real& da, Real& db) {
        da = g;
        db = -g;
      });
}

template <class Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return detail::binary_op(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      [](Real x, Real y, Real g, Real& da, Real& db) {
        da = g * y;
        db = g * x;
      });
}

template <class Real>
BasicTensor<Real> div(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return detail::binary_op(
      "div", a, b, [](Real x, Real y) { return x / y; },
      [](Real x, Real y, Real g, Real& da, Real& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

template <class Real>
BasicTensor<Real> operator+(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return add(a, b);
}
template <class Real>
BasicTensor<Real> operator-(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return sub(a, b);
}
template <class Real>
BasicTensor<Real> operator*(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return mul(a, b);
}
template <class Real>
BasicTensor<Real> operator/(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return div(a, b);
}
template <class Real>
BasicTensor<Real> operator*(const BasicTensor<Real>& a, std::type_identity_t<Real> s) {
  return mul(a, BasicTensor<Real>::scalar(s));
}
template <class Real>
BasicTensor<Real> operator*(std::type_identity_t<Real> s, const BasicTensor<Real>& a) {
  return mul(a, BasicTensor<Real>::scalar(s));
}
template <class Real>
BasicTensor<Real> operator+(const BasicTensor<Real>& a, std::type_identity_t<Real> s) {
  return add(a, BasicTensor<Real>::scalar(s));
}

// ---------------------------------------------------------------------------
// Elementwise unary functions

template <class Real>
BasicTensor<Real> neg(const BasicTensor<Real>& a) {
  return detail::unary_op(
      "neg", a, [](Real x) { return -x; }, [](Real, Real, Real g) { return -g; });
}

template <class Real>
BasicTensor<Real> operator-(const BasicTensor<Real>& a) {
  return neg(a);
}

template <class Real>
BasicTensor<Real> exp(const BasicTensor<Real>& a) {
  return detail::unary_op(
      "exp", a, [](Real x) { return std::exp(x); }, [](Real, Real y, Real g) { return g * y; });
}

/// exp(x) - 1 without cancellation near zero.
template <class Real>
BasicTensor<Real> expm1(const BasicTensor<Real>& a) {
  return detail::unary_op(
      "expm1", a, [](Real x) { return std::expm1(x); }, [](Real, Real y, Real g) { return g * (y + Real(1)); });
}

template <class Real>
BasicTensor<Real> log(const BasicTensor<Real>& a) {
  for (auto v : a.data()) {
    if (!(v > Real(0))) throw DomainError("log: input must be strictly positive, got " + std::to_string(v));
  }
  return detail::unary_op(
      "log", a, [](Real x) { return std::log(x); }, [](Real x, Real, Real g) { return g / x; });
}

template <class Real>
BasicTensor<Real> sqrt(const BasicTensor<Real>& a) {
  for (auto v : a.data()) {
    if (!(v > Real(0))) throw DomainError("sqrt: input must be strictly positive, got " + std::to_string(v));
  }
  return detail::unary_op(
      "sqrt", a, [](Real x) { return std::sqrt(x); }, [](Real, Real y, Real g) { return g / (Real(2) * y); });
}

template <class Real>
BasicTensor<Real> square(const BasicTensor<Real>& a) {
  return detail::unary_op(
      "square", a, [](Real x) { return x * x; }, [](Real x, Real, Real g) { return Real(2) * x * g; });
}

template <class Real>
BasicTensor<Real> sigmoid(const BasicTensor<Real>& a) {
  return detail::unary_op(
      "sigmoid", a, [](Real x) { return detail::sigmoid_value(x); },
      [](Real, Real y, Real g) { return g * y * (Real(1) - y); });
}

/// x * sigmoid(x)
template <class Real>
BasicTensor<Real> silu(const BasicTensor<Real>& a) {
  return detail::unary_op(
      "silu", a, [](Real x) { return x * detail::sigmoid_value(x); },
      [](Real x, Real, Real g) {
        const Real s = detail::sigmoid_value(x);
        return g * s * (Real(1) + x * (Real(1) - s));
      });
}

/// log(1 + exp(x)), evaluated without overflow.
template <class Real>
BasicTensor<Real> softplus(const BasicTensor<Real>& a) {
  return detail::unary_op(
      "softplus", a, [](Real x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, Real(0)); },
      [](Real x, Real, Real g) { return g * detail::sigmoid_value(x); });
}

template <class Real>
BasicTensor<Real> relu(const BasicTensor<Real>& a) {
  return detail::unary_op(
      "relu", a, [](Real x) { return x > Real(0) ? x : Real(0); },
      [](Real x, Real, Real g) { return x > Real(0) ? g : Real(0); });
}

/// max(x, lo); no gradient where the floor is active.
template <class Real>
BasicTensor<Real> clamp_min(const BasicTensor<Real>& a, Real lo) {
  return detail::unary_op(
      "clamp_min", a, [lo](Real x) { return x > lo ? x : lo; },
      [lo](Real x, Real, Real g) { return x > lo ? g : Real(0); });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return detail::make_result<Real>("reshape", std::move(shape), a.to_vector(), {a}, [](detail::Node<Real>& self) {
    detail::accumulate_into(self, 0, [&](std::vector<Real>& ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
  });
}

/// 2-D transpose.
template <class Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  const auto av = a.data();
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return detail::make_result<Real>("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node<Real>& self) {
    detail::accumulate_into(self, 0, [&](std::vector<Real>& ga) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
    });
  });
}

/// Selects `indices` along `axis` (a gather). Backward scatter-adds.
template <class Real>
BasicTensor<Real> take(const BasicTensor<Real>& a, int axis, std::vector<std::size_t> indices) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "take");
  const auto sp = detail::split_axis(a.shape(), ax);
  for (auto i : indices) {
    if (i >= sp.n) throw DimensionError("take: index " + std::to_string(i) + " out of range " + std::to_string(sp.n));
  }
  if (indices.empty()) throw DimensionError("take: empty index list");
  Shape shape = a.shape();
  shape[ax] = indices.size();
  const std::size_t m = indices.size();
  const auto av = a.data();
  std::vector<Real> out(sp.outer * m * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < m; ++j) {
      const Real* src = av.data() + (o * sp.n + indices[j]) * sp.inner;
      std::copy(src, src + sp.inner, out.begin() + static_cast<std::ptrdiff_t>((o * m + j) * sp.inner));
    }
  return detail::make_result<Real>(
      "take", std::move(shape), std::move(out), {a}, [sp, m, idx = std::move(indices)](detail::Node<Real>& self) {
        detail::accumulate_into(self, 0, [&](std::vector<Real>& ga) {
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t j = 0; j < m; ++j) {
              const Real* g = self.grad.data() + (o * m + j) * sp.inner;
              Real* dst = ga.data() + (o * sp.n + idx[j]) * sp.inner;
              for (std::size_t k = 0; k < sp.inner; ++k) dst[k] += g[k];
            }
        });
      });
}

/// out[b] = a[b, index[b]] for a matrix a.
template <class Real>
BasicTensor<Real> gather_rows(const BasicTensor<Real>& a, std::span<const std::size_t> index) {
  if (a.rank() != 2 || index.size() != a.dim(0)) {
    throw DimensionError("gather_rows: expected [B x K] input with B indices, got " + shape_str(a.shape()));
  }
  const std::size_t k = a.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<Real> out(idx.size());
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= k) throw DimensionError("gather_rows: index out of range");
    out[b] = a.data()[b * k + idx[b]];
  }
  return detail::make_result<Real>("gather_rows", {idx.size()}, std::move(out), {a},
                                   [k, idx](detail::Node<Real>& self) {
                                     detail::accumulate_into(self, 0, [&](std::vector<Real>& ga) {
                                       for (std::size_t b = 0; b < idx.size(); ++b) ga[b * k + idx[b]] += self.grad[b];
                                     });
                                   });
}

// ---------------------------------------------------------------------------
// Reductions

template <class Real>
BasicTensor<Real> sum(const BasicTensor<Real>& a) {
  Real s{};
  for (auto v : a.data()) s += v;
  return detail::make_result<Real>("sum", {1}, {s}, {a}, [](detail::Node<Real>& self) {
    detail::accumulate_into(self, 0, [&](std::vector<Real>& ga) {
      for (auto& v : ga) v += self.grad[0];
    });
  });
}

template <class Real>
BasicTensor<Real> mean(const BasicTensor<Real>& a) {
  return sum(a) * (Real(1) / static_cast<Real>(a.numel()));
}

template <class Real>
BasicTensor<Real> sum(const BasicTensor<Real>& a, int axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "sum");
  const auto sp = detail::split_axis(a.shape(), ax);
  const auto av = a.data();
  std::vector<Real> out(sp.outer * sp.inner, Real(0));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j) {
      const Real* src = av.data() + (o * sp.n + j) * sp.inner;
      Real* dst = out.data() + o * sp.inner;
      for (std::size_t k = 0; k < sp.inner; ++k) dst[k] += src[k];
    }
  return detail::make_result<Real>("sum_axis", detail::drop_axis(a.shape(), ax, keepdim), std::move(out), {a},
                                   [sp](detail::Node<Real>& self) {
                                     detail::accumulate_into(self, 0, [&](std::vector<Real>& ga) {
                                       for (std::size_t o = 0; o < sp.outer; ++o)
                                         for (std::size_t j = 0; j < sp.n; ++j) {
                                           const Real* g = self.grad.data() + o * sp.inner;
                                           Real* dst = ga.data() + (o * sp.n + j) * sp.inner;
                                           for (std::size_t k = 0; k < sp.inner; ++k) dst[k] += g[k];
                                         }
                                     });
                                   });
}

template <class Real>
BasicTensor<Real> mean(const BasicTensor<Real>& a, int axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "mean");
  return sum(a, axis, keepdim) * (Real(1) / static_cast<Real>(a.dim(ax)));
}

/// Numerically stable softmax along `axis` (max-subtraction).
template <class Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& a, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "softmax");
  const auto sp = detail::split_axis(a.shape(), ax);
  const auto av = a.data();
  std::vector<Real> out(av.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.inner; ++k) {
      const std::size_t base = o * sp.n * sp.inner + k;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, av[base + j * sp.inner]);
      Real total{};
      for (std::size_t j = 0; j < sp.n; ++j) {
        const Real e = std::exp(av[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= total;
    }
  return detail::make_result<Real>("softmax", a.shape(), std::move(out), {a}, [sp](detail::Node<Real>& self) {
    detail::accumulate_into(self, 0, [&](std::vector<Real>& ga) {
      const auto& y = self.value;
      const auto& g = self.grad;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.inner; ++k) {
          const std::size_t base = o * sp.n * sp.inner + k;
          Real dot{};
          for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
          for (std::size_t j = 0; j < sp.n; ++j) {
            const std::size_t i = base + j * sp.inner;
            ga[i] += y[i] * (g[i] - dot);
          }
        }
    });
  });
}

/// log(sum(exp(a))) along `axis`, axis removed (or kept as size 1).
template <class Real>
BasicTensor<Real> logsumexp(const BasicTensor<Real>& a, int axis = -1, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "logsumexp");
  const auto sp = detail::split_axis(a.shape(), ax);
  const auto av = a.data();
  std::vector<Real> out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.inner; ++k) {
      const std::size_t base = o * sp.n * sp.inner + k;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, av[base + j * sp.inner]);
      Real total{};
      for (std::size_t j = 0; j < sp.n; ++j) total += std::exp(av[base + j * sp.inner] - mx);
      out[o * sp.inner + k] = mx + std::log(total);
    }
  return detail::make_result<Real>(
      "logsumexp", detail::drop_axis(a.shape(), ax, keepdim), std::move(out), {a}, [sp](detail::Node<Real>& self) {
        detail::accumulate_into(self, 0, [&](std::vector<Real>& ga) {
          const auto& x = self.inputs[0]->value;
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t k = 0; k < sp.inner; ++k) {
              const Real lse = self.value[o * sp.inner + k];
              const Real g = self.grad[o * sp.inner + k];
              const std::size_t base = o * sp.n * sp.inner + k;
              for (std::size_t j = 0; j < sp.n; ++j) {
                const std::size_t i = base + j * sp.inner;
                ga[i] += g * std::exp(x[i] - lse);
              }
            }
        });
      });
}

template <class Real>
BasicTensor<Real> log_softmax(const BasicTensor<Real>& a, int axis = -1) {
  return sub(a, logsumexp(a, axis, true));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] . [k x n] -> [m x n]
template <class Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(1);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<Real> out(m * n, Real(0));
  for (std::size_t i = 0; i < m; ++i) {
    Real* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = av[i * k + p];
      const Real* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return detail::make_result<Real>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<Real>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const auto& g = self.grad;
    detail::accumulate_into(self, 0, [&](std::vector<Real>& ga) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Real* grow = g.data() + i * n;
          const Real* brow = bv.data() + p * n;
          Real acc{};
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
    });
    detail::accumulate_into(self, 1, [&](std::vector<Real>& gb) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Real aip = av[i * k + p];
          const Real* grow = g.data() + i * n;
          Real* dst = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += aip * grow[j];
        }
    });
  });
}

// ---------------------------------------------------------------------------
// Spatial operators on channel-last maps ([H x W x C] or [B x H x W x C])

namespace detail {

struct MapDims {
  std::size_t batch, height, width, channels;
};

template <class Real>
MapDims map_dims(const BasicTensor<Real>& x, const char* op) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw DimensionError(std::string(op) + ": expected [H x W x C] or [B x H x W x C], got " + shape_str(x.shape()));
}

}  // namespace detail

/// Per-channel 2-D convolution (cross-correlation), odd kernel, zero "same"
/// padding. kernel: [k x k x C].
template <class Real>
BasicTensor<Real> depthwise_conv2d(const BasicTensor<Real>& x, const BasicTensor<Real>& kernel) {
  const auto dims = detail::map_dims(x, "depthwise_conv2d");
  if (kernel.rank() != 3 || kernel.dim(0) != kernel.dim(1) || kernel.dim(2) != dims.channels) {
    throw DimensionError("depthwise_conv2d: kernel must be [k x k x C], got " + shape_str(kernel.shape()));
  }
  const std::size_t k = kernel.dim(0);
  if (k % 2 == 0) throw ConfigError("depthwise convolution needs an odd kernel size, got " + std::to_string(k), "kernel");
  const std::size_t nb = dims.batch, h = dims.height, w = dims.width, c = dims.channels;
  const long half = static_cast<long>(k / 2);
  const auto xv = x.data();
  const auto kv = kernel.data();
  std::vector<Real> out(xv.size(), Real(0));
  auto visit = [=](auto&& fn) {
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t oy = 0; oy < h; ++oy)
        for (std::size_t ox = 0; ox < w; ++ox)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy) + static_cast<long>(ky) - half;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = static_cast<long>(ox) + static_cast<long>(kx) - half;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              const std::size_t o = ((b * h + oy) * w + ox) * c;
              const std::size_t i = ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * c;
              const std::size_t kk = (ky * k + kx) * c;
              fn(o, i, kk);
            }
          }
  };
  visit([&](std::size_t o, std::size_t i, std::size_t kk) {
    for (std::size_t ch = 0; ch < c; ++ch) out[o + ch] += xv[i + ch] * kv[kk + ch];
  });
  return detail::make_result<Real>("depthwise_conv2d", x.shape(), std::move(out), {x, kernel},
                                   [visit, c](detail::Node<Real>& self) {
                                     const auto& xv = self.inputs[0]->value;
                                     const auto& kv = self.inputs[1]->value;
                                     const auto& g = self.grad;
                                     auto* gx = self.inputs[0]->requires_grad ? &self.inputs[0]->ensure_grad() : nullptr;
                                     auto* gk = self.inputs[1]->requires_grad ? &self.inputs[1]->ensure_grad() : nullptr;
                                     visit([&](std::size_t o, std::size_t i, std::size_t kk) {
                                       for (std::size_t ch = 0; ch < c; ++ch) {
                                         if (gx) (*gx)[i + ch] += g[o + ch] * kv[kk + ch];
                                         if (gk) (*gk)[kk + ch] += g[o + ch] * xv[i + ch];
                                       }
                                     });
                                   });
}

/// Dense 2-D convolution, odd kernel, zero "same" padding, stride 1.
/// x: [B x H x W x Cin], weight: [k x k x Cin x Cout].
template <class Real>
BasicTensor<Real> conv2d(const BasicTensor<Real>& x, const BasicTensor<Real>& weight) {
  const auto dims = detail::map_dims(x, "conv2d");
  if (weight.rank() != 4 || weight.dim(0) != weight.dim(1) || weight.dim(2) != dims.channels) {
    throw DimensionError("conv2d: weight must be [k x k x Cin x Cout], got " + shape_str(weight.shape()));
  }
  const std::size_t k = weight.dim(0);
  if (k % 2 == 0) throw ConfigError("convolution needs an odd kernel size, got " + std::to_string(k), "kernel");
  const std::size_t cin = dims.channels;
  const std::size_t cout = weight.dim(3);
  const std::size_t nb = dims.batch, h = dims.height, w = dims.width;
  const long half = static_cast<long>(k / 2);
  auto visit = [=](auto&& fn) {
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t oy = 0; oy < h; ++oy)
        for (std::size_t ox = 0; ox < w; ++ox)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy) + static_cast<long>(ky) - half;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = static_cast<long>(ox) + static_cast<long>(kx) - half;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              fn(((b * h + oy) * w + ox) * cout,
                 ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * cin,
                 (ky * k + kx) * cin * cout);
            }
          }
  };
  const auto xv = x.data();
  const auto wv = weight.data();
  std::vector<Real> out(nb * h * w * cout, Real(0));
  visit([&](std::size_t o, std::size_t i, std::size_t kk) {
    Real* dst = out.data() + o;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const Real xval = xv[i + ci];
      const Real* wrow = wv.data() + kk + ci * cout;
      for (std::size_t co = 0; co < cout; ++co) dst[co] += xval * wrow[co];
    }
  });
  Shape shape = x.rank() == 3 ? Shape{h, w, cout} : Shape{nb, h, w, cout};
  return detail::make_result<Real>(
      "conv2d", std::move(shape), std::move(out), {x, weight}, [visit, cin, cout](detail::Node<Real>& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        const auto& g = self.grad;
        auto* gx = self.inputs[0]->requires_grad ? &self.inputs[0]->ensure_grad() : nullptr;
        auto* gw = self.inputs[1]->requires_grad ? &self.inputs[1]->ensure_grad() : nullptr;
        visit([&](std::size_t o, std::size_t i, std::size_t kk) {
          const Real* grow = g.data() + o;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const std::size_t wrow = kk + ci * cout;
            if (gx) {
              Real acc{};
              for (std::size_t co = 0; co < cout; ++co) acc += grow[co] * wv[wrow + co];
              (*gx)[i + ci] += acc;
            }
            if (gw) {
              const Real xval = xv[i + ci];
              Real* dst = gw->data() + wrow;
              for (std::size_t co = 0; co < cout; ++co) dst[co] += xval * grow[co];
            }
          }
        });
      });
}

/// 2x2 average pooling with stride 2 on [B x H x W x C] (H, W even).
template <class Real>
BasicTensor<Real> avg_pool2x2(const BasicTensor<Real>& x) {
  const auto dims = detail::map_dims(x, "avg_pool2x2");
  const std::size_t nb = dims.batch, h = dims.height, w = dims.width, c = dims.channels;
  if (h % 2 != 0 || w % 2 != 0) throw DimensionError("avg_pool2x2: spatial dims must be even, got " + shape_str(x.shape()));
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  const auto xv = x.data();
  std::vector<Real> out(nb * oh * ow * c, Real(0));
  auto in_index = [=](std::size_t b, std::size_t y, std::size_t xx) { return ((b * h + y) * w + xx) * c; };
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        Real* dst = out.data() + ((b * oh + y) * ow + xx) * c;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const Real* src = xv.data() + in_index(b, 2 * y + dy, 2 * xx + dx);
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += Real(0.25) * src[ch];
          }
      }
  Shape shape = x.rank() == 3 ? Shape{oh, ow, c} : Shape{nb, oh, ow, c};
  return detail::make_result<Real>("avg_pool2x2", std::move(shape), std::move(out), {x},
                                   [=](detail::Node<Real>& self) {
                                     detail::accumulate_into(self, 0, [&](std::vector<Real>& gx) {
                                       for (std::size_t b = 0; b < nb; ++b)
                                         for (std::size_t y = 0; y < oh; ++y)
                                           for (std::size_t xx = 0; xx < ow; ++xx) {
                                             const Real* g = self.grad.data() + ((b * oh + y) * ow + xx) * c;
                                             for (std::size_t dy = 0; dy < 2; ++dy)
                                               for (std::size_t dx = 0; dx < 2; ++dx) {
                                                 Real* dst = gx.data() + in_index(b, 2 * y + dy, 2 * xx + dx);
                                                 for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += Real(0.25) * g[ch];
                                               }
                                           }
                                     });
                                   });
}

}  // namespace s6mod
