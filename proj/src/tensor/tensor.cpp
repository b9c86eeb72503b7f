// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.cpp
 * @brief  Tensor handles, node bookkeeping and the backward pass.
 */

#include <dfq/tensor.hpp>

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dfq {

std::size_t numel(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

DimensionError::DimensionError(const std::string &op, const Shape &a,
                               const Shape &b)
    : std::invalid_argument(op + ": incompatible shapes " + to_string(a) +
                            " and " + to_string(b)) {}

DimensionError::DimensionError(const std::string &op, const std::string &detail)
    : std::invalid_argument(op + ": " + detail) {}

std::vector<double> &Node::grad_buffer() {
  if (grad.empty())
    grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(numel(shape), v);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw DimensionError("from", "shape " + to_string(shape) + " holds " +
                                     std::to_string(numel(shape)) +
                                     " values, got " +
                                     std::to_string(data.size()));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({}, {v}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1)
    throw DimensionError("item", "tensor of shape " + to_string(shape()) +
                                     " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank())
    throw DimensionError("at", "index rank " + std::to_string(index.size()) +
                                   " for shape " + to_string(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape()[axis])
      throw std::out_of_range("at: index out of range for " +
                              to_string(shape()));
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

Tensor Tensor::detach() const {
  if (!node_)
    return Tensor();
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  if (t.defined())
    t.set_requires_grad(requires_grad());
  return t;
}

Tensor make_result(std::string op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor &t) {
                                     return t.defined() && t.requires_grad();
                                   });
  if (tracked) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (auto &t : inputs)
      node->inputs.push_back(t.ptr());
  }
  return Tensor(std::move(node));
}

Tape Tape::collect(const Tensor &root) {
  Tape tape;
  if (!root.defined() || !root.requires_grad())
    return tape;
  // Iterative post-order DFS; a node is emitted after all its inputs.
  std::unordered_set<const Node *> seen;
  std::vector<std::pair<Node *, std::size_t>> stack;
  stack.emplace_back(&root.node(), 0);
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node *child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second)
        stack.emplace_back(child, 0);
      continue;
    }
    tape.order_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

void backward(const Tensor &loss) {
  if (!loss.defined() || loss.size() != 1)
    throw TapeError("backward: loss must be a scalar, got shape " +
                    (loss.defined() ? to_string(loss.shape()) : "<undefined>"));
  if (!loss.requires_grad())
    throw TapeError("backward: loss is detached from every tensor requiring "
                    "a gradient");
  Node &root = loss.node();
  if (root.backward_consumed)
    throw TapeError("backward: called twice on the same loss without "
                    "reset_backward()");
  Tape tape = Tape::collect(loss);
  for (Node *n : tape.order())
    n->grad_buffer();
  root.grad[0] += 1.0;
  const auto &order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node *n = *it;
    if (n->backward)
      n->backward(*n);
  }
  root.backward_consumed = true;
}

void reset_backward(const Tensor &loss) {
  Tape tape = Tape::collect(loss);
  for (Node *n : tape.order())
    if (!n->is_leaf())
      n->grad.clear();
  if (loss.defined())
    loss.node().backward_consumed = false;
}

} // namespace dfq
