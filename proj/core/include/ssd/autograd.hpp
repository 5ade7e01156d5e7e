#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ssd/tensor.hpp"

namespace ssd::ag {

/// One vertex of the define-by-run graph. Ops create nodes eagerly; backward
/// walks the DAG in reverse topological order. Value and grad are float32
/// tensors of identical shape (the grad buffer is allocated lazily).
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  Tensor& grad_buf() {
    if (grad.empty()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

/// Cheap handle to a Node. Copying shares the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() { node_->grad = Tensor(); }
  double item() const;
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var param(Tensor value);

/// Reverse-mode sweep from a scalar root. Accumulates into each reachable
/// node's grad buffer; leaf params keep their grads until zero_grad().
void backward(const Var& root);

// ---- convolution ----
Var conv2d(const Var& x, const Var& kernel, const Var& bias, int stride = 1, int pad = 0);
Var depthwise_conv2d(const Var& x, const Var& kernel, const Var& bias, int stride = 1,
                     int pad = 0);

// ---- elementwise ----
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);  // requires strictly positive input
Var sqrt(const Var& x);
Var abs(const Var& x);
Var neg(const Var& x);
Var clamp(const Var& x, float lo, float hi);
Var pow_scalar(const Var& x, float p);  // requires non-negative input
Var add_scalar(const Var& x, float c);
Var mul_scalar(const Var& x, float c);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var emax(const Var& a, const Var& b);
Var emin(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

// ---- broadcast-style helpers (the only broadcasting in the library) ----
Var scale_by(const Var& x, const Var& s);           // s: scalar {1}
Var scale_per_channel(const Var& x, const Var& s);  // s: (N,C,1,1)
Var mul_spatial(const Var& x, const Var& m);        // m: (N,1,H,W)
Var add_channel_bias(const Var& x, const Var& b);   // b: (C)

// ---- pooling / resampling ----
Var global_avg_pool(const Var& x);
Var global_max_pool(const Var& x);
Var avg_pool2(const Var& x);
Var upsample_nearest2x(const Var& x);
Var channel_mean(const Var& x);
Var channel_max(const Var& x);

// ---- structure ----
Var reshape(const Var& x, std::vector<int> shape);
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& x, int c_begin, int c_end);
Var permute_channels(const Var& x, const std::vector<int>& perm);
Var gather(const Var& x, std::vector<int64_t> flat_indices);
Var concat_flat(const std::vector<Var>& parts);

// ---- reductions ----
Var sum(const Var& x);
Var mean(const Var& x);

/// Max relative error between the analytic gradient of f at x and central
/// finite differences: max_i |analytic_i - fd_i| / max(1, |analytic_i|).
/// eps must lie in [1e-4, 1e-2]. Throws on non-finite values.
double grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double eps);

}  // namespace ssd::ag
