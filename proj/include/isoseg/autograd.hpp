#pragma once

// Reverse-mode tape.  Nodes are appended in evaluation order, which is a
// topological order by construction, so backward() is a single reverse sweep
// that visits every node exactly once.  Each op installs a closure that reads
// the node's gradient and accumulates into its inputs' gradient buffers.

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "isoseg/kernels.hpp"
#include "isoseg/rng.hpp"
#include "isoseg/tensor.hpp"

namespace isoseg {

template <typename S>
class Graph {
 public:
  using Id = std::uint32_t;

  /// `dropout_seed` feeds the graph-local random stream consumed by dropout
  /// ops in creation order.  `check` validates every forward output and every
  /// backward gradient for finiteness (NaN/Inf is a hard failure).
  explicit Graph(std::uint64_t dropout_seed = 0, bool check = true)
      : rng_(dropout_seed), check_(check) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Id leaf(Tensor<S> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, "leaf", nullptr);
  }

  const Tensor<S>& value(Id id) const { return nodes_[id].value; }
  const Tensor<S>& grad(Id id) const {
    if (nodes_[id].grad.data.empty())
      throw ContractError("grad(): node has no gradient (did backward run?)");
    return nodes_[id].grad;
  }
  std::size_t node_count() const { return nodes_.size(); }
  Rng& rng() { return rng_; }

  /// Reverse sweep from a scalar loss.  Every requires-grad node reachable
  /// from the loss receives its gradient; unreachable ones keep zeros.
  void backward(Id loss) {
    if (nodes_[loss].value.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(nodes_[loss].value.shape));
    if (!nodes_[loss].requires_grad)
      throw ContractError("backward: loss does not depend on any differentiable input");
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad = Tensor<S>(n.value.shape);
    nodes_[loss].grad.data[0] = S(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.requires_grad && n.backprop) n.backprop();
    }
    if (check_)
      for (auto& n : nodes_)
        if (!n.grad.data.empty()) check_finite(n.grad, n.op);
  }

  // Builder plumbing: ops reserve the id of the node they are about to push
  // so the backward closure can capture it.
  Id next_id() const { return static_cast<Id>(nodes_.size()); }
  Id push(Tensor<S> value, bool requires_grad, const char* op, std::function<void()> backprop) {
    if (check_) check_finite(value, op);
    nodes_.push_back(Node{std::move(value), Tensor<S>{}, std::move(backprop), requires_grad, op});
    return static_cast<Id>(nodes_.size() - 1);
  }
  Tensor<S>& grad_buf(Id id) { return nodes_[id].grad; }
  bool needs(Id id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::function<void()> backprop;
    bool requires_grad;
    const char* op;
  };
  std::vector<Node> nodes_;
  Rng rng_;
  bool check_;
};

// ---------------------------------------------------------------------------
// Op builders.  The overload set mirrors the plain-tensor kernels; the first
// argument selects the graph flavor.

template <typename S>
using GId = typename Graph<S>::Id;

template <typename S>
GId<S> conv3d(Graph<S>& g, GId<S> x, GId<S> w, const Dims3& stride, const Dims3& pad) {
  Tensor<S> y = conv3d(g.value(x), g.value(w), stride, pad);
  const bool need = g.needs(x) || g.needs(w);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, w, id, stride, pad] {
      conv3d_backward(gp->value(x), gp->value(w), stride, pad, gp->grad(id),
                      gp->needs(x) ? &gp->grad_buf(x) : nullptr,
                      gp->needs(w) ? &gp->grad_buf(w) : nullptr);
    };
  }
  return g.push(std::move(y), need, "conv3d", std::move(bp));
}

template <typename S>
GId<S> conv_transpose3d(Graph<S>& g, GId<S> x, GId<S> w, const Dims3& stride) {
  Tensor<S> y = conv_transpose3d(g.value(x), g.value(w), stride);
  const bool need = g.needs(x) || g.needs(w);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, w, id, stride] {
      conv_transpose3d_backward(gp->value(x), gp->value(w), stride, Dims3{0, 0, 0},
                                gp->grad(id),
                                gp->needs(x) ? &gp->grad_buf(x) : nullptr,
                                gp->needs(w) ? &gp->grad_buf(w) : nullptr);
    };
  }
  return g.push(std::move(y), need, "conv_transpose3d", std::move(bp));
}

/// Adds a per-channel bias (shape 1 x C x 1 x 1 x 1).
template <typename S>
GId<S> bias_add(Graph<S>& g, GId<S> x, GId<S> b) {
  const Tensor<S>& xv = g.value(x);
  const Tensor<S>& bv = g.value(b);
  if (bv.shape[1] != xv.shape[1] || bv.size() != bv.shape[1])
    throw DimensionError("bias_add: bias shape " + shape_str(bv.shape) +
                         " incompatible with input channels (axis 1) = " +
                         std::to_string(xv.shape[1]));
  Tensor<S> y(xv.shape);
  const std::size_t V = xv.spatial(), C = xv.shape[1];
  for (std::size_t bb = 0; bb < xv.shape[0]; ++bb)
    for (std::size_t c = 0; c < C; ++c) {
      const S* p = xv.data.data() + (bb * C + c) * V;
      S* q = y.data.data() + (bb * C + c) * V;
      const S add = bv.data[c];
      for (std::size_t i = 0; i < V; ++i) q[i] = p[i] + add;
    }
  const bool need = g.needs(x) || g.needs(b);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, b, id, V, C] {
      const Tensor<S>& dy = gp->grad(id);
      if (gp->needs(x)) {
        auto& dx = gp->grad_buf(x);
        for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i];
      }
      if (gp->needs(b)) {
        auto& db = gp->grad_buf(b);
        for (std::size_t bb = 0; bb < dy.shape[0]; ++bb)
          for (std::size_t c = 0; c < C; ++c) {
            const S* p = dy.data.data() + (bb * C + c) * V;
            double acc = 0.0;
            for (std::size_t i = 0; i < V; ++i) acc += static_cast<double>(p[i]);
            db.data[c] += static_cast<S>(acc);
          }
      }
    };
  }
  return g.push(std::move(y), need, "bias_add", std::move(bp));
}

/// Train-mode batch norm.  gamma/beta are graph leaves of shape 1xCx1x1x1;
/// running statistics live outside the graph and are updated in place.
template <typename S>
GId<S> batch_norm_train(Graph<S>& g, GId<S> x, GId<S> gamma, GId<S> beta, double eps,
                        double momentum, std::vector<S>& run_mean, std::vector<S>& run_var) {
  BnSaved<S> saved;
  Tensor<S> y = batch_norm_train(g.value(x), g.value(gamma).data, g.value(beta).data, eps,
                                 momentum, run_mean, run_var, saved);
  const bool need = g.needs(x) || g.needs(gamma) || g.needs(beta);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, gamma, beta, id, saved = std::move(saved)] {
      batch_norm_backward(gp->value(x), gp->value(gamma).data, saved, gp->grad(id),
                          gp->needs(x) ? &gp->grad_buf(x) : nullptr,
                          gp->needs(gamma) ? &gp->grad_buf(gamma).data : nullptr,
                          gp->needs(beta) ? &gp->grad_buf(beta).data : nullptr);
    };
  }
  return g.push(std::move(y), need, "batch_norm", std::move(bp));
}

/// Eval-mode batch norm: per-channel affine with the running statistics.
template <typename S>
GId<S> batch_norm_eval(Graph<S>& g, GId<S> x, GId<S> gamma, GId<S> beta, double eps,
                       const std::vector<S>& run_mean, const std::vector<S>& run_var) {
  Tensor<S> y = batch_norm_eval(g.value(x), g.value(gamma).data, g.value(beta).data, eps,
                                run_mean, run_var);
  const bool need = g.needs(x) || g.needs(gamma) || g.needs(beta);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    std::vector<S> rm = run_mean, rv = run_var;
    bp = [gp, x, gamma, beta, id, eps, rm = std::move(rm), rv = std::move(rv)] {
      const Tensor<S>& dy = gp->grad(id);
      const Tensor<S>& xv = gp->value(x);
      const std::size_t C = xv.shape[1], V = xv.spatial(), B = xv.shape[0];
      for (std::size_t c = 0; c < C; ++c) {
        const double invstd = 1.0 / std::sqrt(static_cast<double>(rv[c]) + eps);
        const double scale = static_cast<double>(gp->value(gamma).data[c]) * invstd;
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          const S* pd = dy.data.data() + (b * C + c) * V;
          const S* px = xv.data.data() + (b * C + c) * V;
          for (std::size_t i = 0; i < V; ++i) {
            sum_dy += static_cast<double>(pd[i]);
            sum_dy_xhat += static_cast<double>(pd[i]) *
                           (static_cast<double>(px[i]) - static_cast<double>(rm[c])) * invstd;
          }
          if (gp->needs(x)) {
            S* gx = gp->grad_buf(x).data.data() + (b * C + c) * V;
            for (std::size_t i = 0; i < V; ++i)
              gx[i] += static_cast<S>(static_cast<double>(pd[i]) * scale);
          }
        }
        if (gp->needs(gamma)) gp->grad_buf(gamma).data[c] += static_cast<S>(sum_dy_xhat);
        if (gp->needs(beta)) gp->grad_buf(beta).data[c] += static_cast<S>(sum_dy);
      }
    };
  }
  return g.push(std::move(y), need, "batch_norm_eval", std::move(bp));
}

template <typename S>
GId<S> relu(Graph<S>& g, GId<S> x) {
  Tensor<S> y = relu(g.value(x));
  const bool need = g.needs(x);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, id] {
      const Tensor<S>& dy = gp->grad(id);
      const Tensor<S>& xv = gp->value(x);
      auto& dx = gp->grad_buf(x);
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (xv.data[i] > S(0)) dx.data[i] += dy.data[i];
    };
  }
  return g.push(std::move(y), need, "relu", std::move(bp));
}

template <typename S>
GId<S> sigmoid(Graph<S>& g, GId<S> x) {
  Tensor<S> y = sigmoid(g.value(x));
  const bool need = g.needs(x);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, id] {
      const Tensor<S>& dy = gp->grad(id);
      const Tensor<S>& yv = gp->value(id);
      auto& dx = gp->grad_buf(x);
      for (std::size_t i = 0; i < dy.size(); ++i)
        dx.data[i] += dy.data[i] * yv.data[i] * (S(1) - yv.data[i]);
    };
  }
  return g.push(std::move(y), need, "sigmoid", std::move(bp));
}

template <typename S>
GId<S> softmax(Graph<S>& g, GId<S> x, std::size_t axis) {
  Tensor<S> y = softmax(g.value(x), axis);
  const bool need = g.needs(x);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, id, axis] {
      const Tensor<S>& dy = gp->grad(id);
      const Tensor<S>& yv = gp->value(id);
      auto& dx = gp->grad_buf(x);
      std::size_t outer = 1, inner = 1;
      for (std::size_t a = 0; a < axis; ++a) outer *= yv.shape[a];
      for (std::size_t a = axis + 1; a < 5; ++a) inner *= yv.shape[a];
      const std::size_t n = yv.shape[axis];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * n * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j)
            dot += static_cast<double>(dy.data[base + j * inner]) *
                   static_cast<double>(yv.data[base + j * inner]);
          for (std::size_t j = 0; j < n; ++j)
            dx.data[base + j * inner] +=
                static_cast<S>((static_cast<double>(dy.data[base + j * inner]) - dot) *
                               static_cast<double>(yv.data[base + j * inner]));
        }
    };
  }
  return g.push(std::move(y), need, "softmax", std::move(bp));
}

template <typename S>
GId<S> max_pool3d(Graph<S>& g, GId<S> x) {
  std::vector<std::uint64_t> argmax;
  const bool need = g.needs(x);
  Tensor<S> y = max_pool3d(g.value(x), need ? &argmax : nullptr);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, id, argmax = std::move(argmax)] {
      max_pool3d_backward(argmax, gp->grad(id), gp->grad_buf(x));
    };
  }
  return g.push(std::move(y), need, "max_pool3d", std::move(bp));
}

template <typename S>
GId<S> dropout(Graph<S>& g, GId<S> x, double rate) {
  std::vector<std::uint8_t> mask;
  Tensor<S> y = dropout_train(g.value(x), rate, g.rng(), mask);
  const bool need = g.needs(x);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    const S scale = static_cast<S>(1.0 / (1.0 - rate));
    bp = [gp, x, id, scale, mask = std::move(mask)] {
      const Tensor<S>& dy = gp->grad(id);
      auto& dx = gp->grad_buf(x);
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (mask[i]) dx.data[i] += dy.data[i] * scale;
    };
  }
  return g.push(std::move(y), need, "dropout", std::move(bp));
}

template <typename S>
GId<S> concat_channels(Graph<S>& g, const std::vector<GId<S>>& xs) {
  std::vector<const Tensor<S>*> views;
  views.reserve(xs.size());
  bool need = false;
  for (auto idx : xs) {
    views.push_back(&g.value(idx));
    need = need || g.needs(idx);
  }
  Tensor<S> y = concat_channels(views);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, xs, id] {
      const Tensor<S>& dy = gp->grad(id);
      const std::size_t V = dy.spatial();
      const std::size_t ctotal = dy.shape[1];
      for (std::size_t b = 0; b < dy.shape[0]; ++b) {
        std::size_t c0 = 0;
        for (auto idx : xs) {
          const std::size_t ci = gp->value(idx).shape[1];
          if (gp->needs(idx)) {
            auto& dx = gp->grad_buf(idx);
            const S* src = dy.data.data() + (b * ctotal + c0) * V;
            S* dst = dx.data.data() + b * ci * V;
            for (std::size_t i = 0; i < ci * V; ++i) dst[i] += src[i];
          }
          c0 += ci;
        }
      }
    };
  }
  return g.push(std::move(y), need, "concat_channels", std::move(bp));
}

template <typename S>
GId<S> slice_channels(Graph<S>& g, GId<S> x, std::size_t c0, std::size_t c1) {
  Tensor<S> y = slice_channels(g.value(x), c0, c1);
  const bool need = g.needs(x);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, id, c0, c1] {
      const Tensor<S>& dy = gp->grad(id);
      auto& dx = gp->grad_buf(x);
      const std::size_t V = dy.spatial(), C = dx.shape[1];
      for (std::size_t b = 0; b < dy.shape[0]; ++b) {
        const S* src = dy.data.data() + b * (c1 - c0) * V;
        S* dst = dx.data.data() + (b * C + c0) * V;
        for (std::size_t i = 0; i < (c1 - c0) * V; ++i) dst[i] += src[i];
      }
    };
  }
  return g.push(std::move(y), need, "slice_channels", std::move(bp));
}

template <typename S>
GId<S> crop3d(Graph<S>& g, GId<S> x, const Dims3& off, const Dims3& extent) {
  Tensor<S> y = crop3d(g.value(x), off, extent);
  const bool need = g.needs(x);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, id, off, extent] {
      const Tensor<S>& dy = gp->grad(id);
      auto& dx = gp->grad_buf(x);
      for (std::size_t b = 0; b < dy.shape[0]; ++b)
        for (std::size_t c = 0; c < dy.shape[1]; ++c)
          for (std::size_t z = 0; z < extent[0]; ++z)
            for (std::size_t yy = 0; yy < extent[1]; ++yy) {
              const S* src = &dy.at(b, c, z, yy, 0);
              S* dst = &dx.at(b, c, z + off[0], yy + off[1], off[2]);
              for (std::size_t xx = 0; xx < extent[2]; ++xx) dst[xx] += src[xx];
            }
    };
  }
  return g.push(std::move(y), need, "crop3d", std::move(bp));
}

namespace detail {

template <typename S, typename FwdFn, typename BwdFn>
GId<S> binary_elementwise(Graph<S>& g, GId<S> a, GId<S> b, const char* name, FwdFn fwd,
                          BwdFn bwd) {
  const Tensor<S>& av = g.value(a);
  const Tensor<S>& bv = g.value(b);
  require_same_shape(av, bv, name);
  Tensor<S> y(av.shape);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = fwd(av.data[i], bv.data[i]);
  const bool need = g.needs(a) || g.needs(b);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, a, b, id, bwd] {
      const Tensor<S>& dy = gp->grad(id);
      const Tensor<S>& av = gp->value(a);
      const Tensor<S>& bv = gp->value(b);
      S* da = gp->needs(a) ? gp->grad_buf(a).data.data() : nullptr;
      S* db = gp->needs(b) ? gp->grad_buf(b).data.data() : nullptr;
      for (std::size_t i = 0; i < dy.size(); ++i)
        bwd(dy.data[i], av.data[i], bv.data[i], da ? da + i : nullptr, db ? db + i : nullptr);
    };
  }
  return g.push(std::move(y), need, name, std::move(bp));
}

}  // namespace detail

template <typename S>
GId<S> add(Graph<S>& g, GId<S> a, GId<S> b) {
  return detail::binary_elementwise(
      g, a, b, "add", [](S x, S y) { return x + y; },
      [](S dy, S, S, S* da, S* db) {
        if (da) *da += dy;
        if (db) *db += dy;
      });
}

template <typename S>
GId<S> sub(Graph<S>& g, GId<S> a, GId<S> b) {
  return detail::binary_elementwise(
      g, a, b, "sub", [](S x, S y) { return x - y; },
      [](S dy, S, S, S* da, S* db) {
        if (da) *da += dy;
        if (db) *db -= dy;
      });
}

template <typename S>
GId<S> mul(Graph<S>& g, GId<S> a, GId<S> b) {
  return detail::binary_elementwise(
      g, a, b, "mul", [](S x, S y) { return x * y; },
      [](S dy, S x, S y, S* da, S* db) {
        if (da) *da += dy * y;
        if (db) *db += dy * x;
      });
}

template <typename S>
GId<S> div(Graph<S>& g, GId<S> a, GId<S> b) {
  return detail::binary_elementwise(
      g, a, b, "div", [](S x, S y) { return x / y; },
      [](S dy, S x, S y, S* da, S* db) {
        if (da) *da += dy / y;
        if (db) *db -= dy * x / (y * y);
      });
}

/// y = a * x + b with scalar constants.
template <typename S>
GId<S> affine(Graph<S>& g, GId<S> x, S a, S b) {
  const Tensor<S>& xv = g.value(x);
  Tensor<S> y(xv.shape);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = a * xv.data[i] + b;
  const bool need = g.needs(x);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, id, a] {
      const Tensor<S>& dy = gp->grad(id);
      auto& dx = gp->grad_buf(x);
      for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += a * dy.data[i];
    };
  }
  return g.push(std::move(y), need, "affine", std::move(bp));
}

/// Full reduction to a scalar node (accumulated in double, fixed order).
template <typename S>
GId<S> sum_all(Graph<S>& g, GId<S> x) {
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(sum_all(g.value(x))));
  const bool need = g.needs(x);
  const auto id = g.next_id();
  std::function<void()> bp;
  if (need) {
    Graph<S>* gp = &g;
    bp = [gp, x, id] {
      const S dy = gp->grad(id).data[0];
      auto& dx = gp->grad_buf(x);
      for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dy;
    };
  }
  return g.push(std::move(y), need, "sum_all", std::move(bp));
}

}  // namespace isoseg
