#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "flexio/tensor.h"

namespace flexio {

// Reverse-mode differentiation over coarse tensor ops. Every op produces a
// Node holding its value; when gradients are enabled and an input requires
// them, the node also keeps its parents and a closure that pushes the output
// gradient into the parents' gradient buffers.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  // Lazily allocated, zero-initialised gradient of the same shape as value.
  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return !grad.empty() && grad.size() == value.size(); }
};

class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

// Disables graph recording for its lifetime (inference, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Gradient accumulated by Backward(); zero tensor if nothing flowed here.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(T(0));
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op result. The closure is stored only if recording is enabled and
// some input requires a gradient.
template <typename T, typename Inputs>
Var<T> MakeResultFrom(Tensor<T> value, const Inputs& inputs,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (GradMode::enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> MakeResult(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                  std::function<void(Node<T>&)> backward) {
  return MakeResultFrom<T>(std::move(value), inputs, std::move(backward));
}

// Seeds d(root)/d(root) = 1 (root must be a scalar) and propagates.
template <typename T>
void Backward(const Var<T>& root);

}  // namespace flexio
