// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace badclip::nx {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

/// Dense row-major tensor with an optional reverse-mode graph attached.
///
/// Copies share storage, so a Tensor behaves like a handle; use clone() for
/// an independent value. Leaves marked with set_requires_grad(true) receive
/// gradients from backward().
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() : node_(std::make_shared<detail::Node<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : node_(std::make_shared<detail::Node<T>>()) {
    node_->value.assign(numel_of(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (values.size() != numel_of(shape)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + to_string(shape));
    }
    node_->value = std::move(values);
    node_->shape = std::move(shape);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Mutation is only meaningful on leaves; interior values feed saved
  // backward closures.
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape()));
    }
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
    return *this;
  }
  bool is_leaf() const { return !node_->backward_fn; }

  /// Gradient buffer; zeros when no gradient has been recorded.
  std::vector<T> grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return std::vector<T>(numel(), T(0));
  }
  void zero_grad() { node_->grad.assign(numel(), T(0)); }

  Tensor detach() const { return Tensor(shape(), node_->value); }
  Tensor clone() const {
    Tensor t(shape(), node_->value);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds a graph node. The node requires grad iff any parent does; the
/// backward closure is only attached in that case.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> parents,
                      std::function<void(detail::Node<T>&)> backward_fn) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Gradients overwrite: every node in
/// the graph, leaves included, starts from zero. Leaves listed in `leaves`
/// that are not reachable from the loss end with a zero gradient.
template <typename T>
void backward(const Tensor<T>& loss, std::span<Tensor<T>> leaves = {}) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     to_string(loss.shape()));
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  if (!loss.requires_grad()) return;

  using Node = detail::Node<T>;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad.assign(n->value.size(), T(0));
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      for (auto& p : n->parents) {
        if (p->requires_grad) p->ensure_grad();
      }
      n->backward_fn(*n);
    }
  }
}

template <typename T>
void backward(const Tensor<T>& loss, std::vector<Tensor<T>>& leaves) {
  backward(loss, std::span<Tensor<T>>(leaves));
}

}  // namespace badclip::nx
