#pragma once

// Minimal tensor-level reverse-mode differentiation.
//
// A Var is a shared handle to a value and (optionally) its gradient buffer.
// Operations append a backward closure to the Tape when recording; the tape
// order is the forward order, which is a topological order of the graph, so
// running the closures in reverse visits each node exactly once after all of
// its consumers.

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "m4fuse/tensor.hpp"

namespace m4fuse::ad {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::string name;
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false, std::string name = {})
      : node_(std::make_shared<Node<T>>(Node<T>{std::move(value), {}, requires_grad, std::move(name)})) {}

  /// Trainable leaf.
  static Var parameter(Tensor<T> value, std::string name) { return Var(std::move(value), true, std::move(name)); }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad; }
  const std::string& name() const { return node_->name; }

  void zero_grad() const { node_->grad = Tensor<T>(); }

  /// Gradient buffer to accumulate into, allocated on first use; nullptr for
  /// values that do not require gradients.
  Tensor<T>* grad_sink() const {
    if (!requires_grad()) return nullptr;
    if (node_->grad.empty()) node_->grad = Tensor<T>(node_->value.shape());
    return &node_->grad;
  }

  void accumulate(const Tensor<T>& g) const {
    Tensor<T>* sink = grad_sink();
    if (!sink) return;
    if (sink->shape() != g.shape())
      throw ShapeError("gradient shape " + shape_str(g.shape()) + " != value shape " + shape_str(sink->shape()));
    for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
  }

  bool same_node(const Var& o) const { return node_ == o.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
class Tape {
 public:
  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

  std::size_t size() const { return entries_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure once, newest
  /// first. The tape is consumed.
  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (Tensor<T>* g = loss.grad_sink()) (*g)[0] += T{1};
    propagate();
  }

  /// Runs the closures with output gradients already seeded by the caller.
  void propagate() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

  void clear() { entries_.clear(); }

 private:
  std::vector<std::function<void()>> entries_;
};

/// True when an op on these inputs must be recorded.
template <class T>
bool should_record(const Tape<T>* tape, std::initializer_list<const Var<T>*> inputs) {
  if (!tape) return false;
  for (const Var<T>* v : inputs)
    if (v && v->requires_grad()) return true;
  return false;
}

template <class T>
bool should_record(const Tape<T>* tape, const std::vector<Var<T>>& inputs) {
  if (!tape) return false;
  for (const auto& v : inputs)
    if (v.requires_grad()) return true;
  return false;
}

}  // namespace m4fuse::ad

namespace m4fuse {
using ad::Tape;
using ad::Var;
}  // namespace m4fuse
