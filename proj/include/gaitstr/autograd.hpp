#pragma once

#include "gaitstr/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

// Minimal reverse-mode differentiation over dense tensors. Every operator
// records its inputs and a closure that pushes the output gradient back to
// them; `backward()` walks the recorded graph in reverse topological order.
namespace gaitstr::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> inputs;
  std::function<void(Node&)> backward_fn;

  // Gradient buffer, zero-allocated on first use.
  Tensor& grad_ref();
  const Shape& shape() const { return value.shape(); }
};

// Graph recording is on by default; a NoGradGuard turns it off for the
// current thread (inference).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Tensor value);
// Builds an operator node; `backward_fn` reads self.grad and accumulates into
// the inputs' grad_ref(). Used by operators defined outside this file.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);
Var leaf(Tensor value, bool requires_grad = true);

// Seeds d(root)/d(root) with `seed` (root must hold a single element unless
// an explicit seed tensor is given) and accumulates gradients into every
// reachable node that requires them.
void backward(const Var& root, double seed = 1.0);
void backward(const Var& root, const Tensor& seed);

// --- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
// sum_i w_i * x_i over tensors of identical shape.
Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& weights);
// Scalar sum(x .* r); used to reduce tensors in gradient checks.
Var dot_with(const Var& x, const Tensor& r);

// --- shape -----------------------------------------------------------------
Var reshape(const Var& x, Shape shape);
// Concatenate along the last axis; all leading shapes must agree.
Var concat_last(const std::vector<Var>& xs);
// Concatenate along the first axis; all trailing shapes must agree.
Var concat_first(const std::vector<Var>& xs);
// Flatten `x` and repeat it for every index of `leading`; result has shape
// leading + [numel(x)].
Var tile(const Var& x, const Shape& leading);

// [t, K_J, 2] -> [t, K_B, 2]: x[child(e)] - x[parent(e)] per edge.
Var edge_difference(const Var& x, const std::vector<std::pair<int, int>>& edges);

// --- dense -----------------------------------------------------------------
// y = x W (+ b) over the last axis. w: [Cin, Cout], b: [Cout] or null.
Var linear(const Var& x, const Var& w, const Var& b);
// Separate projection per row: x [R, Cin], w [R, Cin, Cout] -> [R, Cout].
Var rowwise_linear(const Var& x, const Var& w);

// --- skeleton graph --------------------------------------------------------
// Per-frame node mixing y_f = A x_f. x: [t, K, C], adjacency: [K, K].
Var graph_mix(const Var& x, std::shared_ptr<const Tensor> adjacency);
// "Same" zero-padded convolution along the frame axis.
// x: [t, K, Cin], w: [k, Cin, Cout] with odd k, b: [Cout] or null.
Var temporal_conv(const Var& x, const Var& w, const Var& b);
// [t, K, C] -> [t, C] mean over nodes, and its broadcasting adjoint.
Var mean_nodes(const Var& x);
Var broadcast_nodes(const Var& x, int nodes);
// Mean over every axis but the last: [..., C] -> [1, C].
Var mean_rows(const Var& x);

// --- image -----------------------------------------------------------------
// 3x3 "same" convolution over frames of NHWC maps. x: [F, H, W, Cin],
// w: [9*Cin, Cout] with row index (ky*3+kx)*Cin + ci, b: [Cout] or null.
// With fuse_relu the rectifier is applied to the output.
Var conv2d_3x3(const Var& x, const Var& w, const Var& b, bool fuse_relu);
// 2x2 max pooling with stride 2; H and W must be even.
Var max_pool2(const Var& x);
// Max over the first axis: [F, ...] -> [...]. Ties resolve to the first frame.
Var max_over_first(const Var& x);
// [H, W, C] -> [strips, C]: each horizontal strip reduced by max + mean.
Var strip_pool(const Var& x, int strips);

}  // namespace gaitstr::ad
