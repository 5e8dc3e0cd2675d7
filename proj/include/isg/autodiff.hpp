#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "isg/tensor.hpp"

namespace isg {

// Reverse-mode engine. Every op appends one step to the graph's tape as it
// executes, so the tape is a topological order of the computation by
// construction; backward() replays it in exact reverse and accumulates
// gradients additively. One graph per forward pass, one thread per graph.

template <class S>
struct NodeT {
  TensorT<S> value;
  TensorT<S> grad;  // allocated iff requires_grad
  bool requires_grad = false;
};

template <class S>
using VarT = std::shared_ptr<NodeT<S>>;

using Node = NodeT<double>;
using Var = VarT<double>;

template <class S>
VarT<S> leaf(TensorT<S> v, bool requires_grad = false) {
  auto n = std::make_shared<NodeT<S>>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad = TensorT<S>(n->value.shape);
  return n;
}

template <class S>
void zero_grad(const VarT<S>& v) {
  if (v->requires_grad) v->grad.fill(S(0));
}

template <class S>
class GraphT {
 public:
  VarT<S> node(TensorT<S> v, bool requires_grad) {
    auto n = std::make_shared<NodeT<S>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad = TensorT<S>(n->value.shape);
    return n;
  }

  void record(std::function<void()> back) { tape_.push_back(std::move(back)); }

  // Seeds d(out)/d(out) = 1 and replays the tape in reverse.
  void backward(const VarT<S>& out) {
    require(out->value.numel() == 1, Err::ShapeMismatch, "backward root must be scalar");
    require(out->requires_grad, Err::ShapeMismatch, "backward root does not require grad");
    out->grad.data[0] = S(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

  void clear() { tape_.clear(); }
  std::size_t steps() const { return tape_.size(); }

 private:
  std::vector<std::function<void()>> tape_;
};

using Graph = GraphT<double>;

namespace detail {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<MatRM<S>>;
template <class S>
using CMapM = Eigen::Map<const MatRM<S>>;
template <class S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using MapA = Eigen::Map<ArrX<S>>;
template <class S>
using CMapA = Eigen::Map<const ArrX<S>>;

template <class S>
inline bool any_grad(const VarT<S>& a) {
  return a->requires_grad;
}
template <class S, class... Rest>
inline bool any_grad(const VarT<S>& a, const Rest&... rest) {
  return a->requires_grad || any_grad(rest...);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and arithmetic

template <class S>
VarT<S> add(GraphT<S>& g, const VarT<S>& a, const VarT<S>& b) {
  require(same_shape(a->value, b->value), Err::ShapeMismatch,
          "add " + a->value.shape_str() + " vs " + b->value.shape_str());
  TensorT<S> out(a->value.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = a->value.data[i] + b->value.data[i];
  bool rg = detail::any_grad(a, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([a, b, o, n]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < n; ++i) a->grad.data[i] += o->grad.data[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < n; ++i) b->grad.data[i] += o->grad.data[i];
    });
  return o;
}

template <class S>
VarT<S> sub(GraphT<S>& g, const VarT<S>& a, const VarT<S>& b) {
  require(same_shape(a->value, b->value), Err::ShapeMismatch,
          "sub " + a->value.shape_str() + " vs " + b->value.shape_str());
  TensorT<S> out(a->value.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = a->value.data[i] - b->value.data[i];
  bool rg = detail::any_grad(a, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([a, b, o, n]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < n; ++i) a->grad.data[i] += o->grad.data[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < n; ++i) b->grad.data[i] -= o->grad.data[i];
    });
  return o;
}

template <class S>
VarT<S> scale(GraphT<S>& g, const VarT<S>& a, double c) {
  TensorT<S> out(a->value.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = a->value.data[i] * static_cast<S>(c);
  bool rg = a->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([a, o, c, n]() {
      for (std::size_t i = 0; i < n; ++i) a->grad.data[i] += o->grad.data[i] * static_cast<S>(c);
    });
  return o;
}

template <class S>
VarT<S> hadamard(GraphT<S>& g, const VarT<S>& a, const VarT<S>& b) {
  require(same_shape(a->value, b->value), Err::ShapeMismatch,
          "hadamard " + a->value.shape_str() + " vs " + b->value.shape_str());
  TensorT<S> out(a->value.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = a->value.data[i] * b->value.data[i];
  bool rg = detail::any_grad(a, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([a, b, o, n]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < n; ++i) a->grad.data[i] += o->grad.data[i] * b->value.data[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < n; ++i) b->grad.data[i] += o->grad.data[i] * a->value.data[i];
    });
  return o;
}

// Hadamard product where `a` may be single-channel (s x s x 1) against a
// full cube `b` (s x s x d); the broadcast gradient sums over channels.
template <class S>
VarT<S> hadamard_broadcast(GraphT<S>& g, const VarT<S>& a, const VarT<S>& b) {
  if (same_shape(a->value, b->value)) return hadamard(g, a, b);
  require(a->value.rank() == 3 && b->value.rank() == 3, Err::ShapeMismatch,
          "hadamard_broadcast expects rank-3 operands");
  require(a->value.extent(2) == 1 && a->value.extent(0) == b->value.extent(0) &&
              a->value.extent(1) == b->value.extent(1),
          Err::ShapeMismatch,
          "hadamard_broadcast " + a->value.shape_str() + " vs " + b->value.shape_str());
  const int pos = a->value.extent(0) * a->value.extent(1);
  const int d = b->value.extent(2);
  TensorT<S> out(b->value.shape);
  for (int i = 0; i < pos; ++i) {
    const S av = a->value.data[static_cast<std::size_t>(i)];
    const S* bp = b->value.ptr() + static_cast<std::size_t>(i) * d;
    S* op = out.ptr() + static_cast<std::size_t>(i) * d;
    for (int c = 0; c < d; ++c) op[c] = av * bp[c];
  }
  bool rg = detail::any_grad(a, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([a, b, o, pos, d]() {
      for (int i = 0; i < pos; ++i) {
        const S* go = o->grad.ptr() + static_cast<std::size_t>(i) * d;
        if (a->requires_grad) {
          const S* bp = b->value.ptr() + static_cast<std::size_t>(i) * d;
          S acc = S(0);
          for (int c = 0; c < d; ++c) acc += go[c] * bp[c];
          a->grad.data[static_cast<std::size_t>(i)] += acc;
        }
        if (b->requires_grad) {
          const S av = a->value.data[static_cast<std::size_t>(i)];
          S* gb = b->grad.ptr() + static_cast<std::size_t>(i) * d;
          for (int c = 0; c < d; ++c) gb[c] += go[c] * av;
        }
      }
    });
  return o;
}

template <class S>
VarT<S> sigmoid(GraphT<S>& g, const VarT<S>& x) {
  TensorT<S> out(x->value.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const S v = x->value.data[i];
    // branch keeps exp() argument non-positive
    out.data[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                            : std::exp(v) / (S(1) + std::exp(v));
  }
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        const S y = o->value.data[i];
        x->grad.data[i] += o->grad.data[i] * y * (S(1) - y);
      }
    });
  return o;
}

template <class S>
VarT<S> relu(GraphT<S>& g, const VarT<S>& x) {
  TensorT<S> out(x->value.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = x->value.data[i] > S(0) ? x->value.data[i] : S(0);
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, n]() {
      for (std::size_t i = 0; i < n; ++i)
        if (x->value.data[i] > S(0)) x->grad.data[i] += o->grad.data[i];
    });
  return o;
}

template <class S>
VarT<S> softplus(GraphT<S>& g, const VarT<S>& x) {
  TensorT<S> out(x->value.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const S v = x->value.data[i];
    // max(v,0) + log1p(exp(-|v|)) is exact and saturates to the linear asymptote
    out.data[i] = (v > S(0) ? v : S(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        const S v = x->value.data[i];
        const S s = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
        x->grad.data[i] += o->grad.data[i] * s;
      }
    });
  return o;
}

template <class S>
VarT<S> gelu(GraphT<S>& g, const VarT<S>& x) {
  TensorT<S> out(x->value.shape);
  const std::size_t n = out.numel();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x->value.data[i]);
    out.data[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, n]() {
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(x->value.data[i]);
        const double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double dens = inv_sqrt2pi * std::exp(-0.5 * v * v);
        x->grad.data[i] += o->grad.data[i] * static_cast<S>(phi + v * dens);
      }
    });
  return o;
}

// ---------------------------------------------------------------------------
// linear algebra

template <class S>
VarT<S> matmul(GraphT<S>& g, const VarT<S>& a, const VarT<S>& b) {
  require(a->value.rank() == 2 && b->value.rank() == 2, Err::ShapeMismatch,
          "matmul expects rank-2 operands");
  const int m = a->value.extent(0), k = a->value.extent(1);
  const int k2 = b->value.extent(0), n = b->value.extent(1);
  require(k == k2, Err::ShapeMismatch,
          "matmul inner extents " + a->value.shape_str() + " x " + b->value.shape_str());
  TensorT<S> out({m, n});
  {
    detail::CMapM<S> A(a->value.ptr(), m, k), B(b->value.ptr(), k, n);
    detail::MapM<S> C(out.ptr(), m, n);
    C.noalias() = A * B;
  }
  bool rg = detail::any_grad(a, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([a, b, o, m, k, n]() {
      detail::CMapM<S> dC(o->grad.ptr(), m, n);
      if (a->requires_grad) {
        detail::CMapM<S> B(b->value.ptr(), k, n);
        detail::MapM<S> dA(a->grad.ptr(), m, k);
        dA.noalias() += dC * B.transpose();
      }
      if (b->requires_grad) {
        detail::CMapM<S> A(a->value.ptr(), m, k);
        detail::MapM<S> dB(b->grad.ptr(), k, n);
        dB.noalias() += A.transpose() * dC;
      }
    });
  return o;
}

template <class S>
VarT<S> transpose(GraphT<S>& g, const VarT<S>& x) {
  require(x->value.rank() == 2, Err::ShapeMismatch, "transpose expects rank-2");
  const int m = x->value.extent(0), n = x->value.extent(1);
  TensorT<S> out({n, m});
  detail::CMapM<S> X(x->value.ptr(), m, n);
  detail::MapM<S> Y(out.ptr(), n, m);
  Y = X.transpose();
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, m, n]() {
      detail::CMapM<S> dY(o->grad.ptr(), n, m);
      detail::MapM<S> dX(x->grad.ptr(), m, n);
      dX += dY.transpose();
    });
  return o;
}

template <class S>
VarT<S> reshape(GraphT<S>& g, const VarT<S>& x, std::vector<int> shape) {
  require(TensorT<S>::numel_of(shape) == x->value.numel(), Err::ShapeMismatch,
          "reshape changes element count");
  TensorT<S> out(std::move(shape), x->value.data);
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o]() {
      const std::size_t n = x->value.numel();
      for (std::size_t i = 0; i < n; ++i) x->grad.data[i] += o->grad.data[i];
    });
  return o;
}

template <class S>
VarT<S> slice_cols(GraphT<S>& g, const VarT<S>& x, int c0, int len) {
  require(x->value.rank() == 2, Err::ShapeMismatch, "slice_cols expects rank-2");
  const int m = x->value.extent(0), n = x->value.extent(1);
  require(c0 >= 0 && len >= 1 && c0 + len <= n, Err::ShapeMismatch, "slice_cols out of range");
  TensorT<S> out({m, len});
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < len; ++c)
      out.data[static_cast<std::size_t>(r) * len + c] =
          x->value.data[static_cast<std::size_t>(r) * n + c0 + c];
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, m, n, c0, len]() {
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < len; ++c)
          x->grad.data[static_cast<std::size_t>(r) * n + c0 + c] +=
              o->grad.data[static_cast<std::size_t>(r) * len + c];
    });
  return o;
}

template <class S>
VarT<S> concat_cols(GraphT<S>& g, const std::vector<VarT<S>>& parts) {
  require(!parts.empty(), Err::ShapeMismatch, "concat_cols of nothing");
  const int m = parts[0]->value.extent(0);
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p->value.rank() == 2 && p->value.extent(0) == m, Err::ShapeMismatch,
            "concat_cols row mismatch");
    total += p->value.extent(1);
    rg = rg || p->requires_grad;
  }
  TensorT<S> out({m, total});
  int off = 0;
  for (const auto& p : parts) {
    const int w = p->value.extent(1);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < w; ++c)
        out.data[static_cast<std::size_t>(r) * total + off + c] =
            p->value.data[static_cast<std::size_t>(r) * w + c];
    off += w;
  }
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([parts, o, m, total]() {
      int off2 = 0;
      for (const auto& p : parts) {
        const int w = p->value.extent(1);
        if (p->requires_grad)
          for (int r = 0; r < m; ++r)
            for (int c = 0; c < w; ++c)
              p->grad.data[static_cast<std::size_t>(r) * w + c] +=
                  o->grad.data[static_cast<std::size_t>(r) * total + off2 + c];
        off2 += w;
      }
    });
  return o;
}

// Stacks T vectors of length n into a T x n matrix.
template <class S>
VarT<S> stack_rows(GraphT<S>& g, const std::vector<VarT<S>>& rows) {
  require(!rows.empty(), Err::ShapeMismatch, "stack_rows of nothing");
  const std::size_t n = rows[0]->value.numel();
  bool rg = false;
  for (const auto& r : rows) {
    require(r->value.numel() == n, Err::ShapeMismatch, "stack_rows length mismatch");
    rg = rg || r->requires_grad;
  }
  TensorT<S> out({static_cast<int>(rows.size()), static_cast<int>(n)});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] = rows[r]->value.data[c];
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([rows, o, n]() {
      for (std::size_t r = 0; r < rows.size(); ++r)
        if (rows[r]->requires_grad)
          for (std::size_t c = 0; c < n; ++c) rows[r]->grad.data[c] += o->grad.data[r * n + c];
    });
  return o;
}

// Adds a length-n row vector to every row of an m x n matrix.
template <class S>
VarT<S> add_rowvec(GraphT<S>& g, const VarT<S>& x, const VarT<S>& b) {
  require(x->value.rank() == 2, Err::ShapeMismatch, "add_rowvec expects rank-2 lhs");
  const int m = x->value.extent(0), n = x->value.extent(1);
  require(static_cast<int>(b->value.numel()) == n, Err::ShapeMismatch, "add_rowvec width mismatch");
  TensorT<S> out(x->value.shape);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c)
      out.data[static_cast<std::size_t>(r) * n + c] =
          x->value.data[static_cast<std::size_t>(r) * n + c] + b->value.data[static_cast<std::size_t>(c)];
  bool rg = detail::any_grad(x, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, b, o, m, n]() {
      if (x->requires_grad) {
        const std::size_t total = static_cast<std::size_t>(m) * n;
        for (std::size_t i = 0; i < total; ++i) x->grad.data[i] += o->grad.data[i];
      }
      if (b->requires_grad)
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < n; ++c)
            b->grad.data[static_cast<std::size_t>(c)] += o->grad.data[static_cast<std::size_t>(r) * n + c];
    });
  return o;
}

// ---------------------------------------------------------------------------
// softmax / normalization

namespace detail {

template <class S>
inline void softmax_inplace(const S* x, S* y, int n) {
  S mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  S sum = S(0);
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (int i = 0; i < n; ++i) y[i] /= sum;
}

template <class S>
inline void softmax_backward(const S* y, const S* dy, S* dx, int n) {
  S dot = S(0);
  for (int i = 0; i < n; ++i) dot += y[i] * dy[i];
  for (int i = 0; i < n; ++i) dx[i] += y[i] * (dy[i] - dot);
}

}  // namespace detail

// Softmax over all spatial positions of a single-channel s x s x 1 map.
template <class S>
VarT<S> softmax_spatial(GraphT<S>& g, const VarT<S>& x) {
  require(x->value.rank() == 3 && x->value.extent(2) == 1, Err::ShapeMismatch,
          "softmax_spatial expects s x s x 1, got " + x->value.shape_str());
  const int n = x->value.extent(0) * x->value.extent(1);
  TensorT<S> out(x->value.shape);
  detail::softmax_inplace(x->value.ptr(), out.ptr(), n);
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, n]() {
      detail::softmax_backward(o->value.ptr(), o->grad.ptr(), x->grad.ptr(), n);
    });
  return o;
}

template <class S>
VarT<S> softmax_rows(GraphT<S>& g, const VarT<S>& x) {
  require(x->value.rank() == 2, Err::ShapeMismatch, "softmax_rows expects rank-2");
  const int m = x->value.extent(0), n = x->value.extent(1);
  TensorT<S> out(x->value.shape);
  for (int r = 0; r < m; ++r)
    detail::softmax_inplace(x->value.ptr() + static_cast<std::size_t>(r) * n,
                            out.ptr() + static_cast<std::size_t>(r) * n, n);
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, m, n]() {
      for (int r = 0; r < m; ++r)
        detail::softmax_backward(o->value.ptr() + static_cast<std::size_t>(r) * n,
                                 o->grad.ptr() + static_cast<std::size_t>(r) * n,
                                 x->grad.ptr() + static_cast<std::size_t>(r) * n, n);
    });
  return o;
}

// Row-wise layer normalization with learned gain/offset.
template <class S>
VarT<S> layer_norm(GraphT<S>& g, const VarT<S>& x, const VarT<S>& gamma, const VarT<S>& beta,
                   double eps = 1e-5) {
  require(x->value.rank() == 2, Err::ShapeMismatch, "layer_norm expects rank-2");
  const int m = x->value.extent(0), n = x->value.extent(1);
  require(static_cast<int>(gamma->value.numel()) == n && static_cast<int>(beta->value.numel()) == n,
          Err::ShapeMismatch, "layer_norm parameter width mismatch");
  TensorT<S> out(x->value.shape);
  auto xhat = std::make_shared<TensorT<S>>(x->value.shape);
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(m));
  for (int r = 0; r < m; ++r) {
    const S* xr = x->value.ptr() + static_cast<std::size_t>(r) * n;
    S mu = S(0);
    for (int c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<S>(n);
    S var = S(0);
    for (int c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<S>(n);
    const S is = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    S* hr = xhat->ptr() + static_cast<std::size_t>(r) * n;
    S* yr = out.ptr() + static_cast<std::size_t>(r) * n;
    for (int c = 0; c < n; ++c) {
      hr[c] = (xr[c] - mu) * is;
      yr[c] = hr[c] * gamma->value.data[static_cast<std::size_t>(c)] +
              beta->value.data[static_cast<std::size_t>(c)];
    }
  }
  bool rg = detail::any_grad(x, gamma, beta);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, gamma, beta, o, xhat, inv_std, m, n]() {
      for (int r = 0; r < m; ++r) {
        const S* dy = o->grad.ptr() + static_cast<std::size_t>(r) * n;
        const S* hr = xhat->ptr() + static_cast<std::size_t>(r) * n;
        if (gamma->requires_grad || beta->requires_grad)
          for (int c = 0; c < n; ++c) {
            if (gamma->requires_grad) gamma->grad.data[static_cast<std::size_t>(c)] += dy[c] * hr[c];
            if (beta->requires_grad) beta->grad.data[static_cast<std::size_t>(c)] += dy[c];
          }
        if (x->requires_grad) {
          const S is = (*inv_std)[static_cast<std::size_t>(r)];
          S mean_g = S(0), mean_gh = S(0);
          for (int c = 0; c < n; ++c) {
            const S gc = dy[c] * gamma->value.data[static_cast<std::size_t>(c)];
            mean_g += gc;
            mean_gh += gc * hr[c];
          }
          mean_g /= static_cast<S>(n);
          mean_gh /= static_cast<S>(n);
          S* dx = x->grad.ptr() + static_cast<std::size_t>(r) * n;
          for (int c = 0; c < n; ++c) {
            const S gc = dy[c] * gamma->value.data[static_cast<std::size_t>(c)];
            dx[c] += (gc - mean_g - hr[c] * mean_gh) * is;
          }
        }
      }
    });
  return o;
}

// ---------------------------------------------------------------------------
// reductions and losses

namespace detail {

// shared by spatial pools (rank-3, last extent = channels) and row pools (rank-2)
template <class S>
VarT<S> pool_rows(GraphT<S>& g, const VarT<S>& x, int rows, int cols, bool mean) {
  TensorT<S> out({cols});
  const S w = mean ? S(1) / static_cast<S>(rows) : S(1);
  for (int r = 0; r < rows; ++r) {
    const S* xr = x->value.ptr() + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) out.data[static_cast<std::size_t>(c)] += xr[c] * w;
  }
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, rows, cols, w]() {
      for (int r = 0; r < rows; ++r) {
        S* gx = x->grad.ptr() + static_cast<std::size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) gx[c] += o->grad.data[static_cast<std::size_t>(c)] * w;
      }
    });
  return o;
}

}  // namespace detail

// (s0 x s1 x d) -> d-vector of spatial means
template <class S>
VarT<S> mean_pool_spatial(GraphT<S>& g, const VarT<S>& x) {
  require(x->value.rank() == 3, Err::ShapeMismatch, "mean_pool_spatial expects rank-3");
  return detail::pool_rows(g, x, x->value.extent(0) * x->value.extent(1), x->value.extent(2), true);
}

// (s0 x s1 x d) -> d-vector of spatial sums
template <class S>
VarT<S> sum_spatial(GraphT<S>& g, const VarT<S>& x) {
  require(x->value.rank() == 3, Err::ShapeMismatch, "sum_spatial expects rank-3");
  return detail::pool_rows(g, x, x->value.extent(0) * x->value.extent(1), x->value.extent(2), false);
}

// (m x n) -> n-vector of column means
template <class S>
VarT<S> mean_rows(GraphT<S>& g, const VarT<S>& x) {
  require(x->value.rank() == 2, Err::ShapeMismatch, "mean_rows expects rank-2");
  return detail::pool_rows(g, x, x->value.extent(0), x->value.extent(1), true);
}

template <class S>
VarT<S> sum_all(GraphT<S>& g, const VarT<S>& x) {
  TensorT<S> out({1});
  const std::size_t n = x->value.numel();
  S acc = S(0);
  for (std::size_t i = 0; i < n; ++i) acc += x->value.data[i];
  out.data[0] = acc;
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, n]() {
      const S go = o->grad.data[0];
      for (std::size_t i = 0; i < n; ++i) x->grad.data[i] += go;
    });
  return o;
}

// mean absolute difference; d|v|/dv at v = 0 is taken as 0
template <class S>
VarT<S> l1_loss(GraphT<S>& g, const VarT<S>& a, const VarT<S>& b) {
  require(same_shape(a->value, b->value), Err::ShapeMismatch, "l1_loss shape mismatch");
  const std::size_t n = a->value.numel();
  TensorT<S> out({1});
  S acc = S(0);
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(a->value.data[i] - b->value.data[i]);
  out.data[0] = acc / static_cast<S>(n);
  bool rg = detail::any_grad(a, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([a, b, o, n]() {
      const S go = o->grad.data[0] / static_cast<S>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const S d = a->value.data[i] - b->value.data[i];
        const S s = d > S(0) ? S(1) : (d < S(0) ? S(-1) : S(0));
        if (a->requires_grad) a->grad.data[i] += go * s;
        if (b->requires_grad) b->grad.data[i] -= go * s;
      }
    });
  return o;
}

// mean squared difference
template <class S>
VarT<S> l2_loss(GraphT<S>& g, const VarT<S>& a, const VarT<S>& b) {
  require(same_shape(a->value, b->value), Err::ShapeMismatch, "l2_loss shape mismatch");
  const std::size_t n = a->value.numel();
  TensorT<S> out({1});
  S acc = S(0);
  for (std::size_t i = 0; i < n; ++i) {
    const S d = a->value.data[i] - b->value.data[i];
    acc += d * d;
  }
  out.data[0] = acc / static_cast<S>(n);
  bool rg = detail::any_grad(a, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([a, b, o, n]() {
      const S go = o->grad.data[0] * S(2) / static_cast<S>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const S d = a->value.data[i] - b->value.data[i];
        if (a->requires_grad) a->grad.data[i] += go * d;
        if (b->requires_grad) b->grad.data[i] -= go * d;
      }
    });
  return o;
}

// euclidean distance ||a - b||_2; subgradient 0 when the inputs coincide
template <class S>
VarT<S> l2_distance(GraphT<S>& g, const VarT<S>& a, const VarT<S>& b) {
  require(same_shape(a->value, b->value), Err::ShapeMismatch, "l2_distance shape mismatch");
  const std::size_t n = a->value.numel();
  TensorT<S> out({1});
  S acc = S(0);
  for (std::size_t i = 0; i < n; ++i) {
    const S d = a->value.data[i] - b->value.data[i];
    acc += d * d;
  }
  out.data[0] = std::sqrt(acc);
  bool rg = detail::any_grad(a, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([a, b, o, n]() {
      const S norm = o->value.data[0];
      if (norm <= S(0)) return;
      const S go = o->grad.data[0] / norm;
      for (std::size_t i = 0; i < n; ++i) {
        const S d = a->value.data[i] - b->value.data[i];
        if (a->requires_grad) a->grad.data[i] += go * d;
        if (b->requires_grad) b->grad.data[i] -= go * d;
      }
    });
  return o;
}

}  // namespace isg
