#pragma once

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

#include "sttr/error.hpp"

namespace sttr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grad buffers.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
  }
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor handle. Copies share storage; use detach() for a
/// value copy. Operations on tensors that require gradients record themselves
/// on the result so backward() can replay them in reverse.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using node_type = detail::Node<T>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : node_(std::make_shared<node_type>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  BasicTensor(Shape shape, std::vector<T> data) : node_(std::make_shared<node_type>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, std::vector<T>{value}); }

  static BasicTensor from_node(std::shared_ptr<node_type> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<T> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const { return node_->grad; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  void zero_grad() { node_->grad.assign(node_->data.size(), T{0}); }
  void drop_grad() { node_->grad.clear(); }

  /// Fresh leaf holding a copy of the values.
  BasicTensor detach() const { return BasicTensor(node_->shape, node_->data); }

  const char* op_name() const { return node_->op; }
  node_type* node() const { return node_.get(); }
  const std::shared_ptr<node_type>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<node_type> node_;
};

using Tensor = BasicTensor<float>;

/// Builds an op result. The graph edge is recorded only when grad mode is on
/// and at least one parent requires a gradient.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> parents, const char* op,
                           std::function<void(detail::Node<T>&)> backward) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  if (!detail::grad_mode_enabled) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || (p.defined() && p.requires_grad());
  if (!needs) return out;
  auto* node = out.node();
  node->requires_grad = true;
  node->op = op;
  for (const auto& p : parents) node->parents.push_back(p.node_ptr());
  node->backward = std::move(backward);
  return out;
}

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data,
                           const std::vector<BasicTensor<T>>& parents, const char* op,
                           std::function<void(detail::Node<T>&)> backward) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  if (!detail::grad_mode_enabled) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  auto* node = out.node();
  node->requires_grad = true;
  node->op = op;
  for (const auto& p : parents) node->parents.push_back(p.node_ptr());
  node->backward = std::move(backward);
  return out;
}

/// Topologically ordered view of the recorded operations reachable from a root.
template <typename T>
struct ComputeGraph {
  std::vector<detail::Node<T>*> nodes;  // inputs precede their consumers

  static ComputeGraph trace(const BasicTensor<T>& root) {
    ComputeGraph graph;
    std::unordered_set<const detail::Node<T>*> seen;
    // Iterative post-order DFS; deep transformer stacks overflow a recursive one.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    if (root.defined() && root.requires_grad()) {
      stack.emplace_back(root.node(), 0);
      seen.insert(root.node());
    }
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node<T>* parent = node->parents[next++].get();
        if (parent && parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        graph.nodes.push_back(node);
        stack.pop_back();
      }
    }
    return graph;
  }
};

/// Reverse-mode sweep. Leaf gradients accumulate across calls; interior
/// gradients are reset on every call.
template <typename T>
void backward(const ComputeGraph<T>& graph, const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  for (auto* node : graph.nodes) {
    if (node->backward) node->grad.assign(node->data.size(), T{0});
    else node->ensure_grad();
  }
  loss.node()->grad[0] += T{1};
  for (auto it = graph.nodes.rbegin(); it != graph.nodes.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  backward(ComputeGraph<T>::trace(loss), loss);
}

}  // namespace sttr
