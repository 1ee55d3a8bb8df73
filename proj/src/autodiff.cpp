#include "cstalk/autodiff.hpp"

#include <string>
#include <unordered_set>

#include "cstalk/error.hpp"

namespace cstalk::ad {

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Var::grad() const {
  if (node_->grad.size() != 0) return node_->grad;
  return Matrix::Zero(rows(), cols());
}

double Var::item() const {
  if (rows() != 1 || cols() != 1)
    throw ShapeError("item() needs a 1x1 value, got " + std::to_string(rows()) + "x" + std::to_string(cols()));
  return node_->value(0, 0);
}

Var make_op(const char* op, Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  if (!value.allFinite()) throw NumericError(std::string("non-finite value produced by ") + op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  for (auto& p : parents) {
    node->requires_grad = node->requires_grad || p.requires_grad();
    node->parents.push_back(p.shared());
  }
  if (node->requires_grad) node->backward_fn = std::move(backward_fn);
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward() needs a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order without recursion limits.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
  // Interior gradients are only needed during the pass.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.resize(0, 0);
  }
}

}  // namespace cstalk::ad
