#include "flexio/autograd.h"

#include <unordered_set>
#include <utility>

namespace flexio {
namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

std::string ShapeString(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
void Backward(const Var<T>& root) {
  if (!root.defined() || root.value().size() != 1) {
    throw InvalidInput("Backward: root must be a scalar");
  }
  if (!root.requires_grad()) return;

  // Post-order DFS gives a topological order (inputs before consumers).
  // Owning pointers: clearing a consumer's parents must not free nodes that
  // are still waiting for their own backward pass.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      std::shared_ptr<Node<T>> parent = node->parents[next++];
      if (parent != nullptr && parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
      continue;
    }
    order.push_back(std::move(node));
    stack.pop_back();
  }

  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = it->get();
    if (node->backward && node->has_grad()) node->backward(*node);
    if (node->backward) {
      // Interior node: release the closure and its saved tensors.
      node->backward = nullptr;
      node->parents.clear();
    }
  }
}

template void Backward(const Var<float>&);
template void Backward(const Var<double>&);

}  // namespace flexio
