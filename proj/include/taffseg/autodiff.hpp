#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "taffseg/tensor.hpp"

// Minimal reverse-mode automatic differentiation over Tensor values.
//
// Every op returns a Var whose node keeps shared ownership of its inputs, so
// a graph lives exactly as long as the outputs that reference it. Leaves that
// require gradients (parameters) accumulate into Node::grad across backward
// calls until zero_grad() is called.
namespace taff::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->ensure_grad(); }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad();
  const std::shared_ptr<Node>& node() const { return node_; }

  // Scalar convenience for 1-element results.
  double item() const;

 private:
  std::shared_ptr<Node> node_;
};

// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
void backward(const Var& root);

// While alive, ops record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

Var constant(Tensor value);

// Elementwise, same shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var log(const Var& a);
Var leaky_relu(const Var& a, double slope);
// x log x with the 0 log 0 := 0 convention.
Var xlogx(const Var& a);

// Reductions to a 1-element tensor of shape (1).
Var sum(const Var& a);
Var mean(const Var& a);

// Shape manipulation.
Var reshape(const Var& a, Shape shape);
// (N, a, b) -> (N, b, a).
Var transpose_last2(const Var& a);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& a, int axis, int begin, int end);
// Numpy-style expansion: same rank, each source dim equals target or is 1.
Var expand(const Var& a, const Shape& target);

// Dense algebra.
// x (N, in) * w(out, in)^T + b(out); b may be undefined.
Var linear(const Var& x, const Var& w, const Var& b);
// (B, n, k) x (B, k, m) -> (B, n, m)
Var bmm(const Var& a, const Var& b);
Var softmax(const Var& a, int axis);
Var log_softmax(const Var& a, int axis);

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
};
// x (B, Ci, H, W), w (Co, Ci, kh, kw), b (Co) optional.
Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dOptions opt);
// Kernel 2, stride 2 transposed convolution. w (Ci, Co, 2, 2), b (Co) optional.
Var conv_transpose2x2(const Var& x, const Var& w, const Var& b);
// Per-sample, per-channel normalization over H, W with affine (C) params.
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
// (B, C, H, W) -> (B, C)
Var global_avg_pool(const Var& x);
// (B, C, ...) -> (C): sums over every axis except 1.
Var sum_except_channel(const Var& x);

}  // namespace taff::ad
