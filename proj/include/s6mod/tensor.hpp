// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "s6mod/errors.hpp"

namespace s6mod {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// While alive, operations on this thread record no graph (evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// One vertex of the dynamic autograd graph. A node owns its forward value;
/// non-leaf nodes also own the rule that pushes their gradient to inputs.
template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<Real>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor participating in reverse-mode differentiation.
///
/// Copies share the underlying node (handle semantics, like a shared array);
/// use `clone()` for an independent leaf. Backward accumulates into `grad()`;
/// `zero_grad()` resets.
template <class Real>
class BasicTensor {
 public:
  using value_type = Real;
  using NodeType = detail::Node<Real>;

  BasicTensor() = default;

  static BasicTensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<NodeType>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return BasicTensor(std::move(node));
  }

  static BasicTensor full(Shape shape, Real v, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), Real(0), requires_grad);
  }

  static BasicTensor scalar(Real v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t numel() const { return node().value.size(); }

  std::span<const Real> data() const { return node().value; }

  /// Writable view of a leaf's values (optimizer updates, finite differences).
  std::span<Real> mutable_data() {
    if (!node().is_leaf()) throw ContractError("mutable_data() is only valid on leaf tensors");
    return node().value;
  }

  std::vector<Real> to_vector() const { return node().value; }

  Real item() const {
    if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
    return node().value[0];
  }

  Real operator[](std::size_t flat_index) const { return node().value.at(flat_index); }

  bool requires_grad() const { return node().requires_grad; }

  void set_requires_grad(bool on) {
    if (!node().is_leaf()) throw ContractError("requires_grad can only be toggled on leaves");
    node().requires_grad = on;
    if (on) node().ensure_grad();
  }

  /// Gradient buffer; empty span when no gradient has been allocated.
  std::span<const Real> grad() const { return node().grad; }

  void zero_grad() {
    if (!node().grad.empty()) std::fill(node().grad.begin(), node().grad.end(), Real(0));
  }

  const char* op_name() const { return node().op; }

  /// Same values, no history.
  BasicTensor detach() const { return from(shape(), node().value, false); }

  BasicTensor clone(bool requires_grad) const { return from(shape(), node().value, requires_grad); }

  /// Reverse sweep from this scalar. Leaf gradients accumulate (+=);
  /// intermediate gradients are recomputed from zero on every call.
  void backward() const {
    if (numel() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!node().requires_grad) return;

    std::vector<NodeType*> order;
    std::unordered_set<NodeType*> visited;
    std::vector<std::pair<NodeType*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size()) {
        NodeType* child = n->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (auto* n : order) {
      if (!n->is_leaf()) n->grad.assign(n->value.size(), Real(0));
    }
    node_->ensure_grad()[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (!(*it)->is_leaf()) (*it)->backward(**it);
    }
  }

  NodeType& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

  explicit BasicTensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<NodeType> node_;
};

using Tensor = BasicTensor<double>;
using FloatTensor = BasicTensor<float>;

namespace detail {

/// Creates the output of an operation. The backward rule is only attached
/// when some input needs a gradient; otherwise the result is a constant.
template <class Real>
BasicTensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value,
                              std::initializer_list<BasicTensor<Real>> inputs,
                              std::function<void(Node<Real>&)> backward) {
  auto node = std::make_shared<Node<Real>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_mode_flag())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return BasicTensor<Real>(std::move(node));
}

}  // namespace detail

}  // namespace s6mod
