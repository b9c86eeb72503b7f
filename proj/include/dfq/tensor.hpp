// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense 64-bit tensor with reverse-mode automatic differentiation.
 *
 * A Tensor is a cheap handle onto a shared graph node. Operations on tensors
 * that require gradients record their inputs and a gradient rule on the node;
 * backward() orders the reachable nodes topologically and replays the rules
 * in reverse.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfq {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape &shape);
std::string to_string(const Shape &shape);

/// Shape mismatch raised by a tensor operation; names the op and both shapes.
class DimensionError : public std::invalid_argument {
public:
  DimensionError(const std::string &op, const Shape &a, const Shape &b);
  DimensionError(const std::string &op, const std::string &detail);
};

/// Misuse of the gradient tape (non-scalar loss, detached graph, double
/// backward).
class TapeError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Gradient rule: reads node.grad and accumulates into the inputs' grads.
using BackwardFn = std::function<void(Node &)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad; // empty until first accumulation
  bool requires_grad = false;
  bool backward_consumed = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward;
  std::string op = "leaf";

  std::vector<double> &grad_buffer();
  bool is_leaf() const { return inputs.empty(); }
};

class Tensor {
public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape &shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no tape participation.
  Tensor detach() const;
  /// Deep copy of the values (and requires_grad flag) into a fresh leaf.
  Tensor clone() const;

  Node &node() const { return *node_; }
  const NodePtr &ptr() const { return node_; }

private:
  NodePtr node_;
};

/// Creates an op node. When any input requires grad the node joins the tape
/// with the given gradient rule; otherwise the rule is dropped.
Tensor make_result(std::string op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, BackwardFn backward);

/// Reverse-topological replay order of every node reachable from `root`
/// that participates in the tape. Each node appears after all its inputs.
class Tape {
public:
  static Tape collect(const Tensor &root);
  const std::vector<Node *> &order() const { return order_; }
  std::size_t size() const { return order_.size(); }

private:
  std::vector<Node *> order_;
};

/// Populates grads of every tape node reachable from the scalar `loss`.
/// Leaf grads accumulate across calls; calling twice on the same loss
/// without reset_backward() throws.
void backward(const Tensor &loss);
/// Clears interior grads of the graph under `loss` and re-arms backward().
void reset_backward(const Tensor &loss);

// Elementwise binary ops. `b` may match `a` exactly, be a rank-0 scalar, or
// match a trailing suffix of `a`'s shape (bias over leading dimensions).
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor operator+(const Tensor &a, const Tensor &b);
Tensor operator-(const Tensor &a, const Tensor &b);
Tensor operator*(const Tensor &a, const Tensor &b);

Tensor scale(const Tensor &a, double c);
Tensor add_scalar(const Tensor &a, double c);

/// [.., m, k] x [k, n] (shared right operand) or [.., m, k] x [.., k, n]
/// with identical leading dimensions.
Tensor matmul(const Tensor &a, const Tensor &b);
/// Swaps the last two axes.
Tensor transpose(const Tensor &a);
Tensor permute(const Tensor &a, const std::vector<std::size_t> &axes);
Tensor reshape(const Tensor &a, Shape shape);
Tensor concat(const std::vector<Tensor> &parts, std::size_t axis);
Tensor slice(const Tensor &a, std::size_t axis, std::size_t start,
             std::size_t length);
Tensor index_select(const Tensor &a, std::size_t axis,
                    const std::vector<std::size_t> &indices);

Tensor softmax(const Tensor &a);     // along last axis
Tensor log_softmax(const Tensor &a); // along last axis
Tensor layer_norm(const Tensor &x, const Tensor &gamma, const Tensor &beta,
                  double eps = 1e-6);
Tensor gelu(const Tensor &a); // exact erf form
Tensor exp(const Tensor &a);
Tensor log(const Tensor &a);
Tensor abs(const Tensor &a);
Tensor square(const Tensor &a);

Tensor sum(const Tensor &a);  // -> scalar
Tensor mean(const Tensor &a); // -> scalar
Tensor sum(const Tensor &a, std::size_t axis);  // removes axis
Tensor mean(const Tensor &a, std::size_t axis); // removes axis

/// Gradient 1 strictly inside [lo, hi] (inclusive), 0 outside.
Tensor clamp(const Tensor &a, double lo, double hi);
/// Round half away from zero with identity (straight-through) gradient.
Tensor round_ste(const Tensor &a);
/// Identity forward; backward multiplies the incoming gradient by `factor`.
Tensor grad_scale(const Tensor &a, double factor);

} // namespace dfq
