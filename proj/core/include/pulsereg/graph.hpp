#pragma once

// Reverse-mode differentiation over a recorded tape of tensor operations.
//
// A Tensor is a shared handle: copies alias the same storage. Leaf tensors
// that require gradients are parameters; every differentiable op appends one
// entry to the Graph's tape. Graph::backward replays the tape in reverse, so
// each op is visited exactly once per call.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "pulsereg/array.hpp"

namespace pulsereg {

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Array<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node>(Node{std::move(value), {}, requires_grad})) {}

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Shape& shape() const { return node_->value.shape; }
  [[nodiscard]] std::int64_t numel() const { return node_->value.size(); }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }

  [[nodiscard]] const Array<T>& value() const { return node_->value; }
  Array<T>& mutable_value() { return node_->value; }
  [[nodiscard]] T item() const;

  /// Gradient accumulator; empty until backward touches this tensor.
  [[nodiscard]] const std::vector<T>& grad() const { return node_->grad; }
  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  /// Lazily sized, zero-initialized accumulator for backward implementations.
  std::vector<T>& grad_buffer() const;
  void zero_grad() const { node_->grad.assign(node_->grad.size(), T{}); }
  void clear_grad() const { node_->grad.clear(); }

  [[nodiscard]] bool same_as(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Array<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Node> node_;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void()>;

  /// Registers a leaf tensor as a trainable parameter. Registering the same
  /// tensor twice is rejected.
  void register_parameter(Tensor<T> param);
  [[nodiscard]] std::span<const Tensor<T>> parameters() const { return params_; }

  /// Appends an executed op. `backward` reads output.grad() and accumulates
  /// into the gradients of those inputs that require them.
  template <typename Fn>
  void record(Tensor<T> output, Fn&& backward) {
    tape_.push_back(Entry{std::move(output), BackwardFn(std::forward<Fn>(backward))});
  }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Intermediate
  /// gradients are reset on each call; parameter gradients accumulate.
  void backward(const Tensor<T>& loss);

  void zero_parameter_grads();
  void clear_tape() { tape_.clear(); }
  [[nodiscard]] std::size_t tape_size() const { return tape_.size(); }

 private:
  struct Entry {
    Tensor<T> output;
    BackwardFn backward;
  };
  std::vector<Entry> tape_;
  std::vector<Tensor<T>> params_;
};

/// True when any of the tensors participates in differentiation.
template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> tensors) {
  for (const auto* t : tensors)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace pulsereg
