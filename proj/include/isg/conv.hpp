#pragma once

#include <Eigen/Dense>

#include "isg/autodiff.hpp"

namespace isg {

// Convolutions over channels-last rank-3 maps (H x W x C). Weights are
// KH x KW x Cin x Cout so that w[ky][kx] is a contiguous Cin x Cout block;
// each (oy, ky, kx) triple then reduces to one gemm over a row run of
// output pixels, with the strided input pixels viewed through an
// Eigen::OuterStride map. Zero padding is implicit: out-of-range runs are
// simply skipped.

namespace detail {

template <class S>
using StridedC = Eigen::Map<const MatRM<S>, 0, Eigen::OuterStride<>>;
template <class S>
using StridedM = Eigen::Map<MatRM<S>, 0, Eigen::OuterStride<>>;

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

struct RowRun {
  int ox_lo, ox_hi;  // inclusive; empty if ox_lo > ox_hi
};

inline RowRun conv_row_run(int kx, int in_w, int out_w, int stride, int pad) {
  int lo = pad - kx;
  lo = lo > 0 ? (lo + stride - 1) / stride : 0;
  const int num = in_w - 1 + pad - kx;
  const int hi = num < 0 ? -1 : std::min(out_w - 1, num / stride);
  return {lo, hi};
}

}  // namespace detail

template <class S>
VarT<S> conv2d(GraphT<S>& g, const VarT<S>& x, const VarT<S>& w, const VarT<S>& b, int stride,
               int pad) {
  require(x->value.rank() == 3, Err::ShapeMismatch, "conv2d input must be H x W x C");
  require(w->value.rank() == 4, Err::ShapeMismatch, "conv2d weight must be KH x KW x Cin x Cout");
  const int H = x->value.extent(0), W = x->value.extent(1), Ci = x->value.extent(2);
  const int KH = w->value.extent(0), KW = w->value.extent(1);
  require(w->value.extent(2) == Ci, Err::ShapeMismatch,
          "conv2d channel mismatch: input " + x->value.shape_str() + " weight " + w->value.shape_str());
  const int Co = w->value.extent(3);
  require(stride >= 1 && pad >= 0, Err::ShapeMismatch, "conv2d needs stride >= 1, pad >= 0");
  require(H + 2 * pad >= KH && W + 2 * pad >= KW, Err::ShapeMismatch,
          "conv2d kernel exceeds padded input");
  require(static_cast<int>(b->value.numel()) == Co, Err::ShapeMismatch, "conv2d bias width mismatch");
  const int Ho = detail::conv_out_extent(H, KH, stride, pad);
  const int Wo = detail::conv_out_extent(W, KW, stride, pad);

  TensorT<S> out({Ho, Wo, Co});
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      S* op = out.ptr() + (static_cast<std::size_t>(oy) * Wo + ox) * Co;
      for (int c = 0; c < Co; ++c) op[c] = b->value.data[static_cast<std::size_t>(c)];
    }
  for (int oy = 0; oy < Ho; ++oy)
    for (int ky = 0; ky < KH; ++ky) {
      const int y = oy * stride - pad + ky;
      if (y < 0 || y >= H) continue;
      for (int kx = 0; kx < KW; ++kx) {
        const auto run = detail::conv_row_run(kx, W, Wo, stride, pad);
        if (run.ox_lo > run.ox_hi) continue;
        const int len = run.ox_hi - run.ox_lo + 1;
        const int x0 = run.ox_lo * stride - pad + kx;
        detail::StridedC<S> X(x->value.ptr() + (static_cast<std::size_t>(y) * W + x0) * Ci, len, Ci,
                              Eigen::OuterStride<>(static_cast<Eigen::Index>(stride) * Ci));
        detail::CMapM<S> Wk(w->value.ptr() + (static_cast<std::size_t>(ky) * KW + kx) * Ci * Co, Ci, Co);
        detail::MapM<S> O(out.ptr() + (static_cast<std::size_t>(oy) * Wo + run.ox_lo) * Co, len, Co);
        O.noalias() += X * Wk;
      }
    }

  bool rg = detail::any_grad(x, w, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, w, b, o, H, W, Ci, KH, KW, Co, Ho, Wo, stride, pad]() {
      if (b->requires_grad)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            const S* gp = o->grad.ptr() + (static_cast<std::size_t>(oy) * Wo + ox) * Co;
            for (int c = 0; c < Co; ++c) b->grad.data[static_cast<std::size_t>(c)] += gp[c];
          }
      for (int oy = 0; oy < Ho; ++oy)
        for (int ky = 0; ky < KH; ++ky) {
          const int y = oy * stride - pad + ky;
          if (y < 0 || y >= H) continue;
          for (int kx = 0; kx < KW; ++kx) {
            const auto run = detail::conv_row_run(kx, W, Wo, stride, pad);
            if (run.ox_lo > run.ox_hi) continue;
            const int len = run.ox_hi - run.ox_lo + 1;
            const int x0 = run.ox_lo * stride - pad + kx;
            detail::CMapM<S> dO(o->grad.ptr() + (static_cast<std::size_t>(oy) * Wo + run.ox_lo) * Co,
                                len, Co);
            if (x->requires_grad) {
              detail::CMapM<S> Wk(w->value.ptr() + (static_cast<std::size_t>(ky) * KW + kx) * Ci * Co,
                                  Ci, Co);
              detail::StridedM<S> dX(x->grad.ptr() + (static_cast<std::size_t>(y) * W + x0) * Ci, len,
                                     Ci, Eigen::OuterStride<>(static_cast<Eigen::Index>(stride) * Ci));
              dX.noalias() += dO * Wk.transpose();
            }
            if (w->requires_grad) {
              detail::StridedC<S> X(x->value.ptr() + (static_cast<std::size_t>(y) * W + x0) * Ci, len,
                                    Ci, Eigen::OuterStride<>(static_cast<Eigen::Index>(stride) * Ci));
              detail::MapM<S> dW(w->grad.ptr() + (static_cast<std::size_t>(ky) * KW + kx) * Ci * Co,
                                 Ci, Co);
              dW.noalias() += X.transpose() * dO;
            }
          }
        }
    });
  return o;
}

// Depthwise 2d convolution: weight is KH x KW x C, channel c of the output
// sees only channel c of the input.
template <class S>
VarT<S> conv2d_depthwise(GraphT<S>& g, const VarT<S>& x, const VarT<S>& w, const VarT<S>& b,
                         int stride, int pad) {
  require(x->value.rank() == 3, Err::ShapeMismatch, "depthwise input must be H x W x C");
  require(w->value.rank() == 3, Err::ShapeMismatch, "depthwise weight must be KH x KW x C");
  const int H = x->value.extent(0), W = x->value.extent(1), C = x->value.extent(2);
  const int KH = w->value.extent(0), KW = w->value.extent(1);
  require(w->value.extent(2) == C, Err::ShapeMismatch, "depthwise channel mismatch");
  require(static_cast<int>(b->value.numel()) == C, Err::ShapeMismatch, "depthwise bias width mismatch");
  require(H + 2 * pad >= KH && W + 2 * pad >= KW, Err::ShapeMismatch,
          "depthwise kernel exceeds padded input");
  const int Ho = detail::conv_out_extent(H, KH, stride, pad);
  const int Wo = detail::conv_out_extent(W, KW, stride, pad);

  TensorT<S> out({Ho, Wo, C});
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      S* op = out.ptr() + (static_cast<std::size_t>(oy) * Wo + ox) * C;
      for (int c = 0; c < C; ++c) op[c] = b->value.data[static_cast<std::size_t>(c)];
    }
  for (int oy = 0; oy < Ho; ++oy)
    for (int ky = 0; ky < KH; ++ky) {
      const int y = oy * stride - pad + ky;
      if (y < 0 || y >= H) continue;
      for (int kx = 0; kx < KW; ++kx) {
        const auto run = detail::conv_row_run(kx, W, Wo, stride, pad);
        if (run.ox_lo > run.ox_hi) continue;
        const S* wk = w->value.ptr() + (static_cast<std::size_t>(ky) * KW + kx) * C;
        for (int ox = run.ox_lo; ox <= run.ox_hi; ++ox) {
          const int xx = ox * stride - pad + kx;
          const S* xp = x->value.ptr() + (static_cast<std::size_t>(y) * W + xx) * C;
          S* op = out.ptr() + (static_cast<std::size_t>(oy) * Wo + ox) * C;
          for (int c = 0; c < C; ++c) op[c] += xp[c] * wk[c];
        }
      }
    }

  bool rg = detail::any_grad(x, w, b);
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, w, b, o, H, W, C, KH, KW, Ho, Wo, stride, pad]() {
      if (b->requires_grad)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            const S* gp = o->grad.ptr() + (static_cast<std::size_t>(oy) * Wo + ox) * C;
            for (int c = 0; c < C; ++c) b->grad.data[static_cast<std::size_t>(c)] += gp[c];
          }
      for (int oy = 0; oy < Ho; ++oy)
        for (int ky = 0; ky < KH; ++ky) {
          const int y = oy * stride - pad + ky;
          if (y < 0 || y >= H) continue;
          for (int kx = 0; kx < KW; ++kx) {
            const auto run = detail::conv_row_run(kx, W, Wo, stride, pad);
            if (run.ox_lo > run.ox_hi) continue;
            const S* wk = w->value.ptr() + (static_cast<std::size_t>(ky) * KW + kx) * C;
            S* dwk = w->requires_grad
                         ? w->grad.ptr() + (static_cast<std::size_t>(ky) * KW + kx) * C
                         : nullptr;
            for (int ox = run.ox_lo; ox <= run.ox_hi; ++ox) {
              const int xx = ox * stride - pad + kx;
              const S* gp = o->grad.ptr() + (static_cast<std::size_t>(oy) * Wo + ox) * C;
              const std::size_t xoff = (static_cast<std::size_t>(y) * W + xx) * C;
              if (x->requires_grad) {
                S* dx = x->grad.ptr() + xoff;
                for (int c = 0; c < C; ++c) dx[c] += gp[c] * wk[c];
              }
              if (dwk) {
                const S* xp = x->value.ptr() + xoff;
                for (int c = 0; c < C; ++c) dwk[c] += gp[c] * xp[c];
              }
            }
          }
        }
    });
  return o;
}

// Nearest-neighbour x2 upsample: (H x W x C) -> (2H x 2W x C).
template <class S>
VarT<S> upsample_nearest2(GraphT<S>& g, const VarT<S>& x) {
  require(x->value.rank() == 3, Err::ShapeMismatch, "upsample expects rank-3");
  const int H = x->value.extent(0), W = x->value.extent(1), C = x->value.extent(2);
  TensorT<S> out({2 * H, 2 * W, C});
  for (int oy = 0; oy < 2 * H; ++oy)
    for (int ox = 0; ox < 2 * W; ++ox) {
      const S* xp = x->value.ptr() + (static_cast<std::size_t>(oy / 2) * W + ox / 2) * C;
      S* op = out.ptr() + (static_cast<std::size_t>(oy) * 2 * W + ox) * C;
      for (int c = 0; c < C; ++c) op[c] = xp[c];
    }
  bool rg = x->requires_grad;
  auto o = g.node(std::move(out), rg);
  if (rg)
    g.record([x, o, H, W, C]() {
      for (int oy = 0; oy < 2 * H; ++oy)
        for (int ox = 0; ox < 2 * W; ++ox) {
          S* dx = x->grad.ptr() + (static_cast<std::size_t>(oy / 2) * W + ox / 2) * C;
          const S* gp = o->grad.ptr() + (static_cast<std::size_t>(oy) * 2 * W + ox) * C;
          for (int c = 0; c < C; ++c) dx[c] += gp[c];
        }
    });
  return o;
}

}  // namespace isg
