#include "gaitstr/autograd.hpp"

#include "gaitstr/errors.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <unordered_set>

namespace gaitstr::ad {

namespace {

thread_local bool g_grad_enabled = true;

bool any_requires_grad(const std::vector<Var>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v && v->requires_grad; });
}

// Wraps an operator result. The closure is only kept when recording is on and
// at least one input needs a gradient.
Var make_node(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled && any_requires_grad(inputs)) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return node;
}

bool wants(const Var& v) { return v && v->requires_grad; }

void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidInput(what);
}

}  // namespace

Tensor& Node::grad_ref() {
  if (grad.size() != value.size()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  return make_node(std::move(value), std::move(inputs), std::move(backward_fn));
}

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

void backward(const Var& root, double seed) {
  require(root->value.size() == 1, "backward(seed) requires a scalar root, got " + shape_string(root->shape()));
  backward(root, Tensor(root->shape(), seed));
}

void backward(const Var& root, const Tensor& seed) {
  if (!root->requires_grad) return;
  require(seed.size() == root->value.size(), "backward seed size mismatch");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_ref() += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
  }
}

// --- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value),
          "add: shape mismatch " + shape_string(a->shape()) + " vs " + shape_string(b->shape()));
  Tensor out = a->value;
  out += b->value;
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs)
      if (wants(in)) in->grad_ref() += self.grad;
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.values()) v *= s;
  return make_node(std::move(out), {a}, [s](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var relu(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {a}, [](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    const Tensor& y = self.value;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] > 0.0) g[i] += self.grad[i];
  });
}

Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& weights) {
  require(!xs.empty() && xs.size() == weights.size(), "weighted_sum: need one weight per input");
  Tensor out(xs[0]->shape(), 0.0);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    require(xs[k]->value.same_shape(out), "weighted_sum: shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[k] * xs[k]->value[i];
  }
  return make_node(std::move(out), xs, [weights](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (!wants(self.inputs[k])) continue;
      Tensor& g = self.inputs[k]->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += weights[k] * self.grad[i];
    }
  });
}

Var dot_with(const Var& x, const Tensor& r) {
  require(x->value.size() == r.size(), "dot_with: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) s += x->value[i] * r[i];
  return make_node(Tensor::scalar(s), {x}, [r](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * r[i];
  });
}

// --- shape -----------------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
  Tensor out = x->value.reshaped(std::move(shape));
  return make_node(std::move(out), {x}, [](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var concat_last(const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_last: no inputs");
  Shape shape = xs[0]->shape();
  Shape lead0 = shape;
  lead0.pop_back();
  int total = 0;
  for (const auto& x : xs) {
    Shape lead = x->shape();
    lead.pop_back();
    require(lead == lead0, "concat_last: leading shapes differ: " + shape_string(x->shape()) + " vs " +
                               shape_string(xs[0]->shape()));
    total += x->value.cols();
  }
  shape.back() = total;
  Tensor out(shape);
  auto om = out.matrix();
  int offset = 0;
  std::vector<int> offsets;
  for (const auto& x : xs) {
    offsets.push_back(offset);
    om.middleCols(offset, x->value.cols()) = x->value.matrix();
    offset += x->value.cols();
  }
  return make_node(std::move(out), xs, [offsets](Node& self) {
    auto gm = std::as_const(self.grad).matrix();
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (!wants(self.inputs[k])) continue;
      auto& in = self.inputs[k];
      in->grad_ref().matrix() += gm.middleCols(offsets[k], in->value.cols());
    }
  });
}

Var concat_first(const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_first: no inputs");
  Shape trail0(xs[0]->shape().begin() + 1, xs[0]->shape().end());
  int total = 0;
  for (const auto& x : xs) {
    Shape trail(x->shape().begin() + 1, x->shape().end());
    require(trail == trail0, "concat_first: trailing shapes differ: " + shape_string(x->shape()) + " vs " +
                                 shape_string(xs[0]->shape()));
    total += x->shape()[0];
  }
  Shape shape = xs[0]->shape();
  shape[0] = total;
  Tensor out(shape);
  std::size_t pos = 0;
  for (const auto& x : xs) {
    std::copy(x->value.data(), x->value.data() + x->value.size(), out.data() + pos);
    pos += x->value.size();
  }
  return make_node(std::move(out), xs, [](Node& self) {
    std::size_t p = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.size();
      if (wants(in)) {
        Tensor& g = in->grad_ref();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[p + i];
      }
      p += n;
    }
  });
}

Var tile(const Var& x, const Shape& leading) {
  const std::size_t reps = shape_numel(leading);
  const std::size_t n = x->value.size();
  Shape shape = leading;
  shape.push_back(static_cast<int>(n));
  Tensor out(shape);
  for (std::size_t r = 0; r < reps; ++r) std::copy(x->value.data(), x->value.data() + n, out.data() + r * n);
  return make_node(std::move(out), {x}, [reps, n](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    for (std::size_t r = 0; r < reps; ++r)
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[r * n + i];
  });
}

// --- dense -----------------------------------------------------------------

Var edge_difference(const Var& x, const std::vector<std::pair<int, int>>& edges) {
  require(x->value.rank() == 3, "edge_difference: expected [t, K, C], got " + shape_string(x->shape()));
  const int t = x->value.dim(0), k = x->value.dim(1), c = x->value.dim(2);
  for (const auto& [p, ch] : edges)
    require(p >= 0 && p < k && ch >= 0 && ch < k, "edge_difference: edge index out of range");
  const int e = static_cast<int>(edges.size());
  Tensor out({t, e, c});
  const double* xv = x->value.data();
  for (int f = 0; f < t; ++f)
    for (int i = 0; i < e; ++i)
      for (int d = 0; d < c; ++d)
        out[(static_cast<std::size_t>(f) * e + i) * c + d] =
            xv[(static_cast<std::size_t>(f) * k + edges[static_cast<std::size_t>(i)].second) * c + d] -
            xv[(static_cast<std::size_t>(f) * k + edges[static_cast<std::size_t>(i)].first) * c + d];
  return make_node(std::move(out), {x}, [edges, t, k, c](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    const int e = static_cast<int>(edges.size());
    for (int f = 0; f < t; ++f)
      for (int i = 0; i < e; ++i)
        for (int d = 0; d < c; ++d) {
          const double up = self.grad[(static_cast<std::size_t>(f) * e + i) * c + d];
          g[(static_cast<std::size_t>(f) * k + edges[static_cast<std::size_t>(i)].second) * c + d] += up;
          g[(static_cast<std::size_t>(f) * k + edges[static_cast<std::size_t>(i)].first) * c + d] -= up;
        }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require(w->value.rank() == 2 && x->value.cols() == w->value.dim(0),
          "linear: input " + shape_string(x->shape()) + " incompatible with weight " + shape_string(w->shape()));
  const int cout = w->value.dim(1);
  if (b) require(static_cast<int>(b->value.size()) == cout, "linear: bias width mismatch");
  Shape shape = x->shape();
  shape.back() = cout;
  Tensor out(shape);
  auto om = out.matrix();
  om.noalias() = x->value.matrix() * w->value.matrix();
  if (b) om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), cout);
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(b);
  return make_node(std::move(out), std::move(inputs), [](Node& self) {
    auto& x = self.inputs[0];
    auto& w = self.inputs[1];
    auto gm = std::as_const(self.grad).matrix();
    if (wants(x)) x->grad_ref().matrix().noalias() += gm * w->value.matrix().transpose();
    if (wants(w)) w->grad_ref().matrix().noalias() += x->value.matrix().transpose() * gm;
    if (self.inputs.size() > 2 && wants(self.inputs[2])) {
      Tensor& gb = self.inputs[2]->grad_ref();
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), gm.cols()) += gm.colwise().sum();
    }
  });
}

Var rowwise_linear(const Var& x, const Var& w) {
  require(x->value.rank() == 2 && w->value.rank() == 3 && w->value.dim(0) == x->value.dim(0) &&
              w->value.dim(1) == x->value.dim(1),
          "rowwise_linear: input " + shape_string(x->shape()) + " incompatible with weight " +
              shape_string(w->shape()));
  const int rows = x->value.dim(0), cin = x->value.dim(1), cout = w->value.dim(2);
  Tensor out({rows, cout});
  for (int r = 0; r < rows; ++r) {
    ConstMatrixMap wr(w->value.data() + static_cast<std::size_t>(r) * cin * cout, cin, cout);
    out.matrix().row(r).noalias() = x->value.matrix().row(r) * wr;
  }
  return make_node(std::move(out), {x, w}, [rows, cin, cout](Node& self) {
    auto& x = self.inputs[0];
    auto& w = self.inputs[1];
    auto gm = std::as_const(self.grad).matrix();
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * cin * cout;
      ConstMatrixMap wr(w->value.data() + off, cin, cout);
      if (wants(x)) x->grad_ref().matrix().row(r).noalias() += gm.row(r) * wr.transpose();
      if (wants(w)) {
        MatrixMap gw(w->grad_ref().data() + off, cin, cout);
        gw.noalias() += x->value.matrix().row(r).transpose() * gm.row(r);
      }
    }
  });
}

// --- skeleton graph --------------------------------------------------------

Var graph_mix(const Var& x, std::shared_ptr<const Tensor> adjacency) {
  require(x->value.rank() == 3, "graph_mix: expected [t, K, C], got " + shape_string(x->shape()));
  const int t = x->value.dim(0), k = x->value.dim(1), c = x->value.dim(2);
  require(adjacency->rank() == 2 && adjacency->dim(0) == k && adjacency->dim(1) == k,
          "graph_mix: adjacency " + shape_string(adjacency->shape()) + " does not match " +
              std::to_string(k) + " nodes");
  Tensor out(x->shape());
  const auto a = adjacency->matrix();
  const std::size_t stride = static_cast<std::size_t>(k) * c;
  for (int f = 0; f < t; ++f) {
    MatrixMap(out.data() + f * stride, k, c).noalias() = a * ConstMatrixMap(x->value.data() + f * stride, k, c);
  }
  return make_node(std::move(out), {x}, [adjacency, t, k, c](Node& self) {
    const auto a = adjacency->matrix();
    const std::size_t stride = static_cast<std::size_t>(k) * c;
    Tensor& g = self.inputs[0]->grad_ref();
    for (int f = 0; f < t; ++f)
      MatrixMap(g.data() + f * stride, k, c).noalias() +=
          a.transpose() * ConstMatrixMap(self.grad.data() + f * stride, k, c);
  });
}

Var temporal_conv(const Var& x, const Var& w, const Var& b) {
  require(x->value.rank() == 3, "temporal_conv: expected [t, K, Cin], got " + shape_string(x->shape()));
  require(w->value.rank() == 3 && w->value.dim(1) == x->value.dim(2) && w->value.dim(0) % 2 == 1,
          "temporal_conv: weight " + shape_string(w->shape()) + " incompatible with input " +
              shape_string(x->shape()));
  const int t = x->value.dim(0), k = x->value.dim(1), cin = x->value.dim(2);
  const int ksize = w->value.dim(0), cout = w->value.dim(2), half = ksize / 2;
  Tensor out({t, k, cout});
  auto om = out.matrix();
  const auto xm = x->value.matrix();
  for (int d = 0; d < ksize; ++d) {
    const int shift = d - half;  // y[f] += x[f + shift] W_d
    const int f0 = std::max(0, -shift), f1 = std::min(t, t - shift);
    if (f1 <= f0) continue;
    ConstMatrixMap wd(w->value.data() + static_cast<std::size_t>(d) * cin * cout, cin, cout);
    om.middleRows(f0 * k, (f1 - f0) * k).noalias() += xm.middleRows((f0 + shift) * k, (f1 - f0) * k) * wd;
  }
  if (b) {
    require(static_cast<int>(b->value.size()) == cout, "temporal_conv: bias width mismatch");
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), cout);
  }
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(b);
  return make_node(std::move(out), std::move(inputs), [t, k, cin, cout, ksize, half](Node& self) {
    auto& x = self.inputs[0];
    auto& w = self.inputs[1];
    const auto gm = std::as_const(self.grad).matrix();
    const auto xm = x->value.matrix();
    for (int d = 0; d < ksize; ++d) {
      const int shift = d - half;
      const int f0 = std::max(0, -shift), f1 = std::min(t, t - shift);
      if (f1 <= f0) continue;
      const std::size_t off = static_cast<std::size_t>(d) * cin * cout;
      const auto gy = gm.middleRows(f0 * k, (f1 - f0) * k);
      if (wants(x)) {
        ConstMatrixMap wd(w->value.data() + off, cin, cout);
        x->grad_ref().matrix().middleRows((f0 + shift) * k, (f1 - f0) * k).noalias() += gy * wd.transpose();
      }
      if (wants(w)) {
        MatrixMap gw(w->grad_ref().data() + off, cin, cout);
        gw.noalias() += xm.middleRows((f0 + shift) * k, (f1 - f0) * k).transpose() * gy;
      }
    }
    if (self.inputs.size() > 2 && wants(self.inputs[2])) {
      Tensor& gb = self.inputs[2]->grad_ref();
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), cout) += gm.colwise().sum();
    }
  });
}

Var mean_nodes(const Var& x) {
  require(x->value.rank() == 3, "mean_nodes: expected [t, K, C], got " + shape_string(x->shape()));
  const int t = x->value.dim(0), k = x->value.dim(1), c = x->value.dim(2);
  Tensor out({t, c});
  for (int f = 0; f < t; ++f)
    for (int n = 0; n < k; ++n)
      for (int ch = 0; ch < c; ++ch) out[f * c + ch] += x->value[(static_cast<std::size_t>(f) * k + n) * c + ch];
  for (double& v : out.values()) v /= k;
  return make_node(std::move(out), {x}, [t, k, c](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    for (int f = 0; f < t; ++f)
      for (int n = 0; n < k; ++n)
        for (int ch = 0; ch < c; ++ch)
          g[(static_cast<std::size_t>(f) * k + n) * c + ch] += self.grad[f * c + ch] / k;
  });
}

Var broadcast_nodes(const Var& x, int nodes) {
  require(x->value.rank() == 2, "broadcast_nodes: expected [t, C], got " + shape_string(x->shape()));
  const int t = x->value.dim(0), c = x->value.dim(1);
  Tensor out({t, nodes, c});
  for (int f = 0; f < t; ++f)
    for (int n = 0; n < nodes; ++n)
      std::copy(x->value.data() + f * c, x->value.data() + (f + 1) * c,
                out.data() + (static_cast<std::size_t>(f) * nodes + n) * c);
  return make_node(std::move(out), {x}, [t, nodes, c](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    for (int f = 0; f < t; ++f)
      for (int n = 0; n < nodes; ++n)
        for (int ch = 0; ch < c; ++ch) g[f * c + ch] += self.grad[(static_cast<std::size_t>(f) * nodes + n) * c + ch];
  });
}

Var mean_rows(const Var& x) {
  const int rows = x->value.rows(), c = x->value.cols();
  require(rows > 0, "mean_rows: empty input");
  Tensor out({1, c});
  Eigen::Map<Eigen::RowVectorXd>(out.data(), c) = x->value.matrix().colwise().mean();
  return make_node(std::move(out), {x}, [rows, c](Node& self) {
    Eigen::Map<const Eigen::RowVectorXd> g(self.grad.data(), c);
    self.inputs[0]->grad_ref().matrix().rowwise() += g / static_cast<double>(rows);
  });
}

// --- image -----------------------------------------------------------------

namespace {

// Builds the [F*H*W, 9*Cin] patch matrix with zero padding.
void im2col3x3(const double* x, int frames, int h, int w, int cin, RowMatrix& cols) {
  cols.setZero(static_cast<Eigen::Index>(frames) * h * w, 9 * cin);
  for (int f = 0; f < frames; ++f)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double* row = cols.data() + ((static_cast<std::size_t>(f) * h + y) * w + xx) * 9 * cin;
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w) continue;
            const double* src = x + ((static_cast<std::size_t>(f) * h + sy) * w + sx) * cin;
            std::copy(src, src + cin, row + (ky * 3 + kx) * cin);
          }
        }
      }
}

void col2im3x3(const RowMatrix& cols, int frames, int h, int w, int cin, double* gx) {
  for (int f = 0; f < frames; ++f)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const double* row = cols.data() + ((static_cast<std::size_t>(f) * h + y) * w + xx) * 9 * cin;
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w) continue;
            double* dst = gx + ((static_cast<std::size_t>(f) * h + sy) * w + sx) * cin;
            const double* src = row + (ky * 3 + kx) * cin;
            for (int c = 0; c < cin; ++c) dst[c] += src[c];
          }
        }
      }
}

// Single input channel: direct accumulation that skips zero pixels, which
// dominate binary silhouettes.
void conv3x3_single_forward(const double* x, int frames, int h, int w, const double* wt, int cout, double* y) {
  for (int f = 0; f < frames; ++f)
    for (int sy = 0; sy < h; ++sy)
      for (int sx = 0; sx < w; ++sx) {
        const double v = x[(static_cast<std::size_t>(f) * h + sy) * w + sx];
        if (v == 0.0) continue;
        // Input pixel (sy, sx) feeds output (sy - ky + 1, sx - kx + 1) through tap (ky, kx).
        for (int ky = 0; ky < 3; ++ky) {
          const int oy = sy - ky + 1;
          if (oy < 0 || oy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ox = sx - kx + 1;
            if (ox < 0 || ox >= w) continue;
            double* out = y + ((static_cast<std::size_t>(f) * h + oy) * w + ox) * cout;
            const double* tap = wt + static_cast<std::size_t>(ky * 3 + kx) * cout;
            for (int c = 0; c < cout; ++c) out[c] += v * tap[c];
          }
        }
      }
}

void conv3x3_single_backward(const double* x, int frames, int h, int w, const double* wt, int cout, const double* gy,
                             double* gw, double* gx) {
  for (int f = 0; f < frames; ++f)
    for (int sy = 0; sy < h; ++sy)
      for (int sx = 0; sx < w; ++sx) {
        const std::size_t in = (static_cast<std::size_t>(f) * h + sy) * w + sx;
        const double v = x[in];
        if (v == 0.0 && !gx) continue;
        double acc = 0.0;
        for (int ky = 0; ky < 3; ++ky) {
          const int oy = sy - ky + 1;
          if (oy < 0 || oy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ox = sx - kx + 1;
            if (ox < 0 || ox >= w) continue;
            const double* g = gy + ((static_cast<std::size_t>(f) * h + oy) * w + ox) * cout;
            const std::size_t t = static_cast<std::size_t>(ky * 3 + kx) * cout;
            if (gw && v != 0.0)
              for (int c = 0; c < cout; ++c) gw[t + c] += v * g[c];
            if (gx)
              for (int c = 0; c < cout; ++c) acc += wt[t + c] * g[c];
          }
        }
        if (gx) gx[in] += acc;
      }
}

}  // namespace

Var conv2d_3x3(const Var& x, const Var& w, const Var& b, bool fuse_relu) {
  require(x->value.rank() == 4, "conv2d_3x3: expected [F, H, W, Cin], got " + shape_string(x->shape()));
  const int frames = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2), cin = x->value.dim(3);
  require(w->value.rank() == 2 && w->value.dim(0) == 9 * cin,
          "conv2d_3x3: weight " + shape_string(w->shape()) + " incompatible with input " + shape_string(x->shape()));
  const int cout = w->value.dim(1);
  Tensor out({frames, h, wd, cout});
  auto om = out.matrix();
  // The im2col buffer is kept for the weight gradient when recording.
  auto cols = std::make_shared<RowMatrix>();
  if (cin == 1) {
    conv3x3_single_forward(x->value.data(), frames, h, wd, w->value.data(), cout, out.data());
  } else {
    im2col3x3(x->value.data(), frames, h, wd, cin, *cols);
    om.noalias() = *cols * w->value.matrix();
  }
  if (b) {
    require(static_cast<int>(b->value.size()) == cout, "conv2d_3x3: bias width mismatch");
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), cout);
  }
  if (fuse_relu)
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(b);
  const bool keep_cols = cin > 1 && grad_enabled() && wants(w);
  if (!keep_cols) cols.reset();
  return make_node(std::move(out), std::move(inputs), [frames, h, wd, cin, cout, fuse_relu, cols](Node& self) {
    auto& x = self.inputs[0];
    auto& w = self.inputs[1];
    RowMatrix gy = std::as_const(self.grad).matrix();
    if (fuse_relu) {
      const double* y = self.value.data();
      for (Eigen::Index i = 0; i < gy.size(); ++i)
        if (!(y[i] > 0.0)) gy.data()[i] = 0.0;
    }
    if (self.inputs.size() > 2 && wants(self.inputs[2])) {
      Tensor& gb = self.inputs[2]->grad_ref();
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), cout) += gy.colwise().sum();
    }
    if (cin == 1) {
      conv3x3_single_backward(x->value.data(), frames, h, wd, w->value.data(), cout, gy.data(),
                              wants(w) ? w->grad_ref().data() : nullptr, wants(x) ? x->grad_ref().data() : nullptr);
      return;
    }
    if (wants(w)) w->grad_ref().matrix().noalias() += cols->transpose() * gy;
    if (wants(x)) {
      RowMatrix gcols = gy * w->value.matrix().transpose();
      col2im3x3(gcols, frames, h, wd, cin, x->grad_ref().data());
    }
  });
}

Var max_pool2(const Var& x) {
  require(x->value.rank() == 4, "max_pool2: expected [F, H, W, C], got " + shape_string(x->shape()));
  const int frames = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2), c = x->value.dim(3);
  if (h % 2 || w % 2) throw GeometryError("max_pool2: spatial size " + shape_string(x->shape()) + " is not even");
  const int ho = h / 2, wo = w / 2;
  Tensor out({frames, ho, wo, c});
  std::vector<std::uint32_t> argmax(out.size());
  const double* xv = x->value.data();
  for (int f = 0; f < frames; ++f)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        for (int ch = 0; ch < c; ++ch) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((static_cast<std::size_t>(f) * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
              if (xv[idx] > best) {
                best = xv[idx];
                best_idx = idx;
              }
            }
          const std::size_t o = ((static_cast<std::size_t>(f) * ho + y) * wo + xx) * c + ch;
          out[o] = best;
          argmax[o] = static_cast<std::uint32_t>(best_idx);
        }
  return make_node(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
  });
}

Var max_over_first(const Var& x) {
  require(x->value.rank() >= 2, "max_over_first: expected rank >= 2, got " + shape_string(x->shape()));
  const int frames = x->value.dim(0);
  Shape shape(x->shape().begin() + 1, x->shape().end());
  const std::size_t n = shape_numel(shape);
  Tensor out(shape);
  std::vector<std::uint32_t> argmax(n, 0);
  const double* xv = x->value.data();
  std::copy(xv, xv + n, out.data());
  for (int f = 1; f < frames; ++f)
    for (std::size_t i = 0; i < n; ++i) {
      const double v = xv[static_cast<std::size_t>(f) * n + i];
      if (v > out[i]) {
        out[i] = v;
        argmax[i] = static_cast<std::uint32_t>(f);
      }
    }
  return make_node(std::move(out), {x}, [argmax = std::move(argmax), n](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    for (std::size_t i = 0; i < n; ++i) g[static_cast<std::size_t>(argmax[i]) * n + i] += self.grad[i];
  });
}

Var strip_pool(const Var& x, int strips) {
  require(x->value.rank() == 3, "strip_pool: expected [H, W, C], got " + shape_string(x->shape()));
  const int h = x->value.dim(0), w = x->value.dim(1), c = x->value.dim(2);
  if (strips <= 0 || h % strips)
    throw GeometryError("strip_pool: height " + std::to_string(h) + " not divisible into " + std::to_string(strips) +
                        " strips");
  const int sh = h / strips;
  const double count = static_cast<double>(sh) * w;
  Tensor out({strips, c});
  std::vector<std::uint32_t> argmax(static_cast<std::size_t>(strips) * c);
  const double* xv = x->value.data();
  for (int s = 0; s < strips; ++s)
    for (int ch = 0; ch < c; ++ch) {
      double best = -std::numeric_limits<double>::infinity(), sum = 0.0;
      std::size_t best_idx = 0;
      for (int y = s * sh; y < (s + 1) * sh; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const std::size_t idx = (static_cast<std::size_t>(y) * w + xx) * c + ch;
          sum += xv[idx];
          if (xv[idx] > best) {
            best = xv[idx];
            best_idx = idx;
          }
        }
      out[static_cast<std::size_t>(s) * c + ch] = best + sum / count;
      argmax[static_cast<std::size_t>(s) * c + ch] = static_cast<std::uint32_t>(best_idx);
    }
  return make_node(std::move(out), {x}, [argmax = std::move(argmax), strips, sh, w, c, count](Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    for (int s = 0; s < strips; ++s)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t o = static_cast<std::size_t>(s) * c + ch;
        const double up = self.grad[o];
        g[argmax[o]] += up;
        for (int y = s * sh; y < (s + 1) * sh; ++y)
          for (int xx = 0; xx < w; ++xx) g[(static_cast<std::size_t>(y) * w + xx) * c + ch] += up / count;
      }
  });
}

}  // namespace gaitstr::ad
