// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with tape-free reverse-mode differentiation. A Tensor is a
// cheap handle onto a shared node; ops create new nodes that remember their
// parents and a backward rule, and backward() walks that DAG once in reverse
// topological order.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tristream {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool consumed = false;  // set once backward() has run through this node
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads node.grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backward;

  bool is_leaf() const { return parents.empty() && !backward; }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;
  using BackwardFn = std::function<void(Node&)>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<T> values,
                       bool requires_grad = false);
  static Tensor vector(std::initializer_list<T> values,
                       bool requires_grad = false);

  // Builds the result of an op. The backward rule and parents are kept only
  // when grad mode is on and some parent requires a gradient.
  static Tensor from_op(Shape shape, std::vector<T> data, const char* op,
                        std::vector<Tensor> parents, BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const T> data() const { return node_->data; }
  // Writable storage. Only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const;
  T at(std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const {
    return node_->data[r * cols() + c];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Populates gradients of every reachable tensor that requires them. The
  // loss must be a single element; the graph is consumed afterwards.
  void backward();

  // Same data, no history, requires_grad off.
  Tensor detach() const;
  // Deep copy of data into a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  const char* op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor64 = Tensor<double>;
using Tensor32 = Tensor<float>;

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace tristream
