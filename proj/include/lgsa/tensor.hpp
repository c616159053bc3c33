// Dense tensors with a dynamic reverse-mode differentiation graph.
//
// A Tensor is a cheap handle onto a shared graph node. Leaves (parameters,
// inputs) own their values; every op result records its parents and a
// backward closure that accumulates into the parents' gradients.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace lgsa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

inline thread_local bool grad_enabled = true;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool released = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_mode_enabled() { return detail::grad_enabled; }

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<NodeT>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<NodeT>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  /// Builds an op result. `backward` receives the result node and must
  /// accumulate into the parents that require gradients. When grad mode is
  /// off, or no parent requires a gradient, the result is a detached leaf.
  static Tensor make_result(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                            std::function<void(NodeT&)> backward, std::string_view op) {
    Tensor out = from(std::move(shape), std::move(values));
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any || !detail::grad_enabled) return out;
    auto& n = *out.node_;
    n.requires_grad = true;
    n.op = op;
    n.parents.reserve(inputs.size());
    for (auto& in : inputs) n.parents.push_back(in.node_);
    n.backward = std::move(backward);
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  std::string_view op() const { return node_->op; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
    const auto& s = node_->shape;
    return node_->value[((b * s[1] + c) * s[2] + y) * s[3] + x];
  }
  T at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    const auto& s = node_->shape;
    return node_->value[((b * s[1] + c) * s[2] + y) * s[3] + x];
  }

  /// Copy of the values with no graph attachment.
  Tensor detach() const { return from(shape(), values()); }

  /// Same node, distinct identity check.
  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  /// Reverse sweep from a scalar. Every reachable tensor that requires a
  /// gradient accumulates dL/dx. Intermediate nodes are released afterwards,
  /// so a second call on the same loss fails.
  void backward() {
    if (numel() != 1) {
      throw GraphError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    }
    if (node_->released) throw GraphError("backward() already ran on this graph");
    if (!node_->requires_grad) throw GraphError("backward() on a tensor that does not require grad");

    std::vector<NodeT*> order;
    {
      std::vector<std::pair<NodeT*, std::size_t>> stack;
      std::unordered_set<NodeT*> visited;
      stack.emplace_back(node_.get(), 0);
      visited.insert(node_.get());
      while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
          NodeT* p = n->parents[idx++].get();
          if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
          order.push_back(n);
          stack.pop_back();
        }
      }
    }

    node_->grad.assign(1, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    for (NodeT* n : order) {
      if (!n->backward) continue;
      n->backward = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->released = true;
    }
    node_->released = true;
  }

  std::shared_ptr<NodeT> node_;

 private:
  explicit Tensor(std::shared_ptr<NodeT> n) : node_(std::move(n)) {}
};

}  // namespace lgsa
