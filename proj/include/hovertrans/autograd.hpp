#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "hovertrans/tensor.hpp"

namespace hovertrans {

class Var;

// One vertex of the reverse-mode tape. Children own their parents, never the
// reverse, so a graph is released as soon as its output handle goes away.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool retain_grad = false;  // keep the gradient of a non-leaf after backward()
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Zero-initialized gradient buffer of value's shape.
  Tensor& grad_buffer();
};

// Shared handle to a tape node. Copying a Var aliases the same node.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  bool defined() const { return static_cast<bool>(node_); }
  explicit operator bool() const { return defined(); }

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor::Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  // Gradient accumulated by backward(); zeros if none arrived.
  const Tensor& grad() const;
  void zero_grad();
  // Keeps this intermediate's gradient after backward() (leaves always keep theirs).
  void retain_grad() { node_->retain_grad = true; }

  const std::shared_ptr<Node>& node() const { return node_; }

  // Creates an op result. When grad mode is off or no parent requires a
  // gradient, the result is a constant and the closure is dropped.
  static Var from_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

 private:
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

// Seeds d(root)/d(root) = 1 (root must hold a single element) and propagates.
void backward(const Var& root);

// Like backward() but seeds an arbitrary upstream gradient of root's shape.
void backward(const Var& root, const Tensor& seed);

bool grad_enabled();

// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace hovertrans
