#pragma once

// Dense row-major tensor with define-by-run reverse-mode differentiation.
//
// Every differentiable primitive records a node holding its inputs and a
// backward closure. `backward(loss)` walks the recorded graph once in reverse
// topological order. Scalar type is a template parameter: training runs in
// float, gradient checks instantiate the same code with double.

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

#include "sdist/errors.hpp"

namespace sdist {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
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

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward_fn;
};

}  // namespace detail

/// Disables graph recording for its lifetime (evaluation, frozen teacher).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : Tensor(shape, std::vector<T>(shape_numel(shape), T{0}), requires_grad) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  static Tensor full(Shape shape, T value) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Writable view of the values. Intended for leaves (parameters updated by
  /// an optimizer or a mask); editing a recorded intermediate invalidates its
  /// backward rule.
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::size_t flat) const { return node_->data.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return !node_->backward_fn; }
  const char* op() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }
  void clear_grad() { node_->grad.clear(); }

  /// Gradient buffer to accumulate into from a backward rule; empty when this
  /// tensor does not take gradients.
  std::span<T> grad_sink() const {
    if (!node_->requires_grad) return {};
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T{0});
    return node_->grad;
  }

  /// New leaf holding a copy of the values, disconnected from the graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <typename T>
using BackwardFn = std::function<void(const detail::Node<T>& out)>;

/// Records a differentiable operation. `backward` receives the output node
/// (with its gradient populated) and pushes contributions into the inputs'
/// `grad_sink()`. Nothing is recorded when no input requires a gradient or
/// recording is disabled.
template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> data,
                  const std::vector<Tensor<T>>& inputs, BackwardFn<T> backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto& node = *out.node();
  node.op = name;
  if (needs) {
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (in.requires_grad()) node.parents.push_back(in.node());
    }
    node.backward_fn = std::move(backward);
  }
  return out;
}

/// Topologically ordered view of the graph that produced a tensor, inputs
/// first. Only nodes that take part in differentiation are listed.
template <typename T>
class ComputeGraph {
 public:
  explicit ComputeGraph(const Tensor<T>& root) {
    std::unordered_set<const detail::Node<T>*> seen;
    // Iterative post-order DFS; deep residual graphs would overflow recursion.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    if (root.requires_grad()) {
      stack.emplace_back(root.node().get(), 0);
      seen.insert(root.node().get());
    }
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto* parent = node->parents[next++].get();
        if (seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<detail::Node<T>*>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<detail::Node<T>*> order_;
};

/// Populates `grad` of every requires-grad leaf reachable from `loss` with
/// dLoss/dLeaf. Gradients accumulate across calls until cleared.
template <typename T>
void backward(const Tensor<T>& loss, bool retain_graph = false) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a tensor that was not produced by a recorded graph");
  }
  ComputeGraph<T> graph(loss);
  const auto& order = graph.nodes();
  auto& root = *loss.node();
  if (root.grad.empty()) root.grad.assign(1, T{0});
  root.grad[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward_fn) {
      if (node->grad.empty()) node->grad.assign(node->data.size(), T{0});
      node->backward_fn(*node);
    } else if (node->grad.empty()) {
      node->grad.assign(node->data.size(), T{0});
    }
  }
  if (!retain_graph) {
    for (auto* node : order) {
      if (node->backward_fn) {
        node->backward_fn = nullptr;
        node->parents.clear();
        node->grad.clear();
      }
    }
  }
}

}  // namespace sdist
