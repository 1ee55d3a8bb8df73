#pragma once

#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Dense>

namespace cstalk::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// One value in the computation graph. Leaves hold parameters or inputs;
/// interior nodes remember their parents and how to push gradients to them.
struct Node {
  Matrix value;
  Matrix grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) grad = g;
    else grad += g;
  }
};

/// Shared handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  /// Zero matrix of the right shape when no gradient has been accumulated.
  Matrix grad() const;
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix value) { return Var(std::move(value), false); }
inline Var parameter(Matrix value) { return Var(std::move(value), true); }

/// Builds an interior node. Throws NumericError when `value` is not finite.
Var make_op(const char* op, Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Reverse pass from a 1x1 root. Each reachable node is visited exactly once,
/// in reverse topological order; leaf gradients accumulate across calls.
void backward(const Var& root);

}  // namespace cstalk::ad
