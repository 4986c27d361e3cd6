#include "hovertrans/autograd.hpp"

#include <unordered_set>

#include "hovertrans/error.hpp"

namespace hovertrans {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::grad_buffer() {
  if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

const Tensor& Var::grad() const { return node_->grad_buffer(); }

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var Var::from_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!g_grad_enabled) return Var(std::move(node));
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return Var(std::move(node));
  node->requires_grad = true;
  node->parents.reserve(parents.size());
  for (auto& p : parents) node->parents.push_back(p.node_);
  node->backward = std::move(backward);
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward() without a seed needs a scalar root, got " + shape_string(root.shape()));
  }
  backward(root, Tensor(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed) {
  if (!root.requires_grad()) return;
  if (seed.shape() != root.shape()) throw ShapeError("backward seed shape mismatch");

  // Iterative post-order DFS gives a topological order without recursion depth limits.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor& g = root.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward) {
      node->grad_buffer();
      node->backward(*node);
    }
  }
  // Intermediate gradients are not needed once they have been propagated.
  for (Node* node : order) {
    if (node->backward && !node->retain_grad) node->grad = Tensor();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace hovertrans
