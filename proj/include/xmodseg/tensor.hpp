#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "xmodseg/error.hpp"

// Tape-based reverse-mode automatic differentiation at tensor granularity.
// Every op builds a node holding its values plus a closure that scatters the
// node's gradient into its parents. backward() resets gradients over the
// reachable graph and then accumulates in reverse topological order
// (reset-then-write: a second backward call recomputes, never doubles).
//
// Scalar type is a template parameter: float for training, double for
// gradient checks.

namespace xmodseg::nn {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    require(d > 0, "shape with non-positive dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

template <typename T>
struct Node {
  std::vector<T> v;  // values
  std::vector<T> g;  // gradient; allocated lazily by backward()
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  /// Trainable or constant leaf with given values.
  static Tensor leaf(Shape shape, std::vector<T> values, bool requires_grad) {
    require(shape_numel(shape) == values.size(),
            "tensor values do not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->v = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return leaf({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->v.size(); }
  std::vector<T>& values() { return node_->v; }
  const std::vector<T>& values() const { return node_->v; }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient from the most recent backward(); zeros if never reached.
  std::vector<T> grad() const {
    if (node_->g.size() == node_->v.size()) return node_->g;
    return std::vector<T>(node_->v.size(), T(0));
  }

  T item() const {
    require(numel() == 1, "item() on non-scalar tensor");
    return node_->v[0];
  }

  /// Constant copy sharing no graph history.
  Tensor detach() const {
    return leaf(node_->shape, node_->v, false);
  }

  std::shared_ptr<Node<T>>& node() { return node_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
void topo_collect(Node<T>* n, std::unordered_set<Node<T>*>& seen,
                  std::vector<Node<T>*>& order) {
  // Iterative DFS; graphs can be deep (chained generators).
  struct Frame {
    Node<T>* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack{{n, 0}};
  seen.insert(n);
  while (!stack.empty()) {
    auto& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node<T>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients of every grad-requiring
/// node reachable from the loss are reset to zero, then accumulated.
template <typename T>
void backward(const Tensor<T>& loss) {
  require(loss.defined() && loss.numel() == 1, "backward: loss must be scalar");
  require(loss.requires_grad(),
          "backward: loss is detached from all trainable parameters");
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> order;  // parents before children
  detail::topo_collect(loss.node().get(), seen, order);
  for (Node<T>* n : order) {
    n->g.assign(n->v.size(), T(0));
  }
  loss.node()->g[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace xmodseg::nn
