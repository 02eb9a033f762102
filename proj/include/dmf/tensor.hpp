// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor with a dynamically recorded reverse-mode graph.
//
// Every op output keeps shared references to its inputs and a closure that
// scatters the output gradient back into them. backward() orders the reachable
// nodes topologically (the computation tape), replays the closures in reverse
// and then releases the tape. Leaf gradients accumulate until zero_grad().
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dmf/error.hpp"

namespace dmf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Global switches
// ---------------------------------------------------------------------------

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Counts multiply-accumulates executed by the dense kernels (GEMM, kernel
/// aggregation) on this thread while alive.
class MacCounter {
 public:
  MacCounter() : start_(detail::mac_counter()) {}
  std::uint64_t count() const { return detail::mac_counter() - start_; }

 private:
  std::uint64_t start_;
};

inline void count_macs(std::uint64_t n) { detail::mac_counter() += n; }

// ---------------------------------------------------------------------------
// Node / Tensor
// ---------------------------------------------------------------------------

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const std::vector<T>&)> backward_fn;

  void accumulate_grad(std::span<const T> g) {
    if (grad.empty()) grad.assign(data.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel_of(shape) != data.size())
      throw ConfigError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor scalar(T v) { return from({}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  /// Extent of axis i; negative i counts from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int a = i < 0 ? i + r : i;
    if (a < 0 || a >= r) throw ConfigError("axis " + std::to_string(i) + " out of range");
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access. Only meant for leaves (parameters, buffers, inputs).
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }
  T item() const {
    if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    if (!node_->is_leaf) throw GraphError("requires_grad can only be set on leaves");
    node_->requires_grad = v;
    return *this;
  }
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }
  const std::string& op() const { return node_->op; }

  /// Leaf copy sharing no graph history.
  Tensor detach() const { return from(shape(), node_->data, false); }
  Tensor clone_leaf(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// ---------------------------------------------------------------------------
// Op construction
// ---------------------------------------------------------------------------

template <class T>
void check_finite(std::span<const T> v, const std::string& op) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]))
      throw NumericError("non-finite value produced by " + op + " at flat index " +
                         std::to_string(i));
  }
}

/// Wraps freshly computed output data into a tensor and, when any input needs
/// gradients, records `backward` (called with the output gradient).
template <class T>
Tensor<T> make_op(std::string op, Shape shape, std::vector<T> data,
                  std::vector<Tensor<T>> inputs,
                  std::function<void(const std::vector<T>&)> backward) {
  check_finite<T>(data, op);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = std::move(op);
  n->is_leaf = false;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    n->requires_grad = true;
    for (auto& in : inputs)
      if (in.defined() && in.requires_grad()) n->inputs.push_back(in.node());
    n->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

/// Adds g into t's gradient if t participates in differentiation.
template <class T>
inline void accumulate(const Tensor<T>& t, std::span<const T> g) {
  if (t.defined() && t.requires_grad()) t.node()->accumulate_grad(g);
}

/// Reverse-mode sweep from a scalar loss.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  if (loss.numel() != 1)
    throw GraphError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  auto root = loss.node();
  if (root->consumed) throw GraphError("backward called twice on the same graph");
  if (!root->requires_grad) throw GraphError("backward on a detached graph (no tensor requires grad)");

  // Iterative post-order DFS -> topological order (inputs before outputs).
  std::vector<Node<T>*> tape;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (!child->is_leaf && child->consumed)
        throw GraphError("graph segment from op '" + child->op + "' was already consumed");
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, T(1));
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf) continue;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(n->grad);
  }
  for (Node<T>* n : tape) {
    if (n->is_leaf) continue;
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
}

}  // namespace dmf
