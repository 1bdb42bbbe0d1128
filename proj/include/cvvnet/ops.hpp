#pragma once

// Stateless tensor kernels with their hand-derived backward passes. Every
// backward accumulates into parameter gradients (+=) and returns the input
// gradient by value.

#include <cmath>
#include <limits>

#include <unsupported/Eigen/SpecialFunctions>

#include "cvvnet/tensor.hpp"

namespace cvvnet::ops {

// ---------------------------------------------------------------------------
// Pointwise (1x1 / 1x1x1) convolution over the channel axis of a (B, C, ...) tensor.

template <typename Scalar>
Tensor<Scalar> pointwise(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>* b) {
  if (x.rank() < 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw ShapeMismatch("pointwise: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  Shape out_shape = x.shape();
  out_shape[1] = w.dim(0);
  auto y = Tensor<Scalar>::empty(out_shape);
  const auto wm = w.matrix(0, w.dim(0), w.dim(1));
  for (Index n = 0; n < x.dim(0); ++n) {
    auto ym = y.channel_matrix(n);
    ym.noalias() = wm * x.channel_matrix(n);
    if (b) ym.colwise() += b->flat();
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> pointwise_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& dy,
                                  Tensor<Scalar>& dw, Tensor<Scalar>* db) {
  auto dx = Tensor<Scalar>::empty(x.shape());
  const auto wm = w.matrix(0, w.dim(0), w.dim(1));
  auto dwm = dw.matrix(0, w.dim(0), w.dim(1));
  for (Index n = 0; n < x.dim(0); ++n) {
    const auto g = dy.channel_matrix(n);
    dwm.noalias() += g * x.channel_matrix(n).transpose();
    if (db) db->flat() += g.rowwise().sum();
    dx.channel_matrix(n).noalias() = wm.transpose() * g;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Dense 3-D convolution (B, Ci, T, H, W) -> (B, Co, T', H', W'), temporal stride 1.

struct Conv3dGeometry {
  Index kt = 1, kh = 1, kw = 1;
  Index stride_hw = 1;
  Index pt = 0, ph = 0, pw = 0;
  /// Temporal padding repeats the edge frames instead of inserting zeros.
  bool replicate_time = false;

  Index out_t(Index t) const { return t + 2 * pt - kt + 1; }
  Index out_h(Index h) const { return (h + 2 * ph - kh) / stride_hw + 1; }
  Index out_w(Index w) const { return (w + 2 * pw - kw) / stride_hw + 1; }
  bool is_pointwise() const { return kt == 1 && kh == 1 && kw == 1 && stride_hw == 1 && pt == 0 && ph == 0 && pw == 0; }
};

namespace detail {

/// Output columns [lo, hi) whose input column ox * stride + q - pw lies inside [0, w).
inline std::pair<Index, Index> valid_columns(const Conv3dGeometry& g, Index q, Index w, Index wo) {
  const Index s = g.stride_hw, first = g.pw - q, last = w - 1 - q + g.pw;
  const Index lo = first <= 0 ? 0 : std::min(wo, (first + s - 1) / s);
  const Index hi = last < 0 ? lo : std::max(lo, std::min(wo, last / s + 1));
  return {lo, hi};
}

template <typename Scalar>
void im2col3d(const Scalar* x, Index ci, Index t, Index h, Index w, const Conv3dGeometry& g, Scalar* col) {
  const Index to = g.out_t(t), ho = g.out_h(h), wo = g.out_w(w);
  const Index ncol = to * ho * wo;
  Index row = 0;
  for (Index c = 0; c < ci; ++c)
    for (Index a = 0; a < g.kt; ++a)
      for (Index p = 0; p < g.kh; ++p)
        for (Index q = 0; q < g.kw; ++q, ++row) {
          Scalar* dst = col + row * ncol;
          for (Index ot = 0; ot < to; ++ot) {
            Index it = ot + a - g.pt;
            if (g.replicate_time) it = std::clamp<Index>(it, 0, t - 1);
            for (Index oy = 0; oy < ho; ++oy) {
              const Index iy = oy * g.stride_hw + p - g.ph;
              Scalar* d = dst + (ot * ho + oy) * wo;
              if (it < 0 || it >= t || iy < 0 || iy >= h) {
                std::fill(d, d + wo, Scalar(0));
                continue;
              }
              const Scalar* src = x + ((c * t + it) * h + iy) * w + (q - g.pw);
              const auto [lo, hi] = valid_columns(g, q, w, wo);
              std::fill(d, d + lo, Scalar(0));
              if (g.stride_hw == 1)
                std::copy(src + lo, src + hi, d + lo);
              else
                for (Index ox = lo; ox < hi; ++ox) d[ox] = src[ox * g.stride_hw];
              std::fill(d + hi, d + wo, Scalar(0));
            }
          }
        }
}

template <typename Scalar>
void col2im3d(const Scalar* col, Index ci, Index t, Index h, Index w, const Conv3dGeometry& g, Scalar* x) {
  const Index to = g.out_t(t), ho = g.out_h(h), wo = g.out_w(w);
  const Index ncol = to * ho * wo;
  Index row = 0;
  for (Index c = 0; c < ci; ++c)
    for (Index a = 0; a < g.kt; ++a)
      for (Index p = 0; p < g.kh; ++p)
        for (Index q = 0; q < g.kw; ++q, ++row) {
          const Scalar* src = col + row * ncol;
          for (Index ot = 0; ot < to; ++ot) {
            Index it = ot + a - g.pt;
            if (g.replicate_time) it = std::clamp<Index>(it, 0, t - 1);
            if (it < 0 || it >= t) continue;
            for (Index oy = 0; oy < ho; ++oy) {
              const Index iy = oy * g.stride_hw + p - g.ph;
              if (iy < 0 || iy >= h) continue;
              const Scalar* s = src + (ot * ho + oy) * wo;
              Scalar* d = x + ((c * t + it) * h + iy) * w + (q - g.pw);
              const auto [lo, hi] = valid_columns(g, q, w, wo);
              if (g.stride_hw == 1)
                VectorMap<Scalar>(d + lo, hi - lo) += ConstVectorMap<Scalar>(s + lo, hi - lo);
              else
                for (Index ox = lo; ox < hi; ++ox) d[ox * g.stride_hw] += s[ox];
            }
          }
        }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv3d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>* b,
                      const Conv3dGeometry& g) {
  require_rank(x.shape(), 5, "conv3d input");
  if (w.rank() != 5 || w.dim(1) != x.dim(1) || w.dim(2) != g.kt || w.dim(3) != g.kh || w.dim(4) != g.kw)
    throw ShapeMismatch("conv3d: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  if (g.is_pointwise()) {
    return pointwise(x, w.reshaped({w.dim(0), w.dim(1)}), b);
  }
  const Index n = x.dim(0), ci = x.dim(1), t = x.dim(2), h = x.dim(3), wd = x.dim(4);
  const Index co = w.dim(0);
  const Index to = g.out_t(t), ho = g.out_h(h), wo = g.out_w(wd);
  if (to < 1 || ho < 1 || wo < 1) throw ShapeMismatch("conv3d: input too small " + shape_str(x.shape()));
  const Index krows = ci * g.kt * g.kh * g.kw, ncol = to * ho * wo;
  auto y = Tensor<Scalar>::empty({n, co, to, ho, wo});
  RowMatrix<Scalar> col(krows, ncol);
  const auto wm = w.matrix(0, co, krows);
  for (Index s = 0; s < n; ++s) {
    detail::im2col3d(x.data() + s * x.stride(0), ci, t, h, wd, g, col.data());
    auto ym = y.channel_matrix(s);
    ym.noalias() = wm * col;
    if (b) ym.colwise() += b->flat();
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> conv3d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& dy,
                               const Conv3dGeometry& g, Tensor<Scalar>& dw, Tensor<Scalar>* db) {
  if (g.is_pointwise()) {
    Tensor<Scalar> dw2 = dw.reshaped({w.dim(0), w.dim(1)});
    auto dx = pointwise_backward(x, w.reshaped({w.dim(0), w.dim(1)}), dy, dw2, db);
    dw.flat() = dw2.flat();
    return dx;
  }
  const Index n = x.dim(0), ci = x.dim(1), t = x.dim(2), h = x.dim(3), wd = x.dim(4);
  const Index co = w.dim(0);
  const Index krows = ci * g.kt * g.kh * g.kw, ncol = g.out_t(t) * g.out_h(h) * g.out_w(wd);
  Tensor<Scalar> dx(x.shape());
  RowMatrix<Scalar> col(krows, ncol), dcol(krows, ncol);
  const auto wm = w.matrix(0, co, krows);
  auto dwm = dw.matrix(0, co, krows);
  for (Index s = 0; s < n; ++s) {
    const auto g_s = dy.channel_matrix(s);
    detail::im2col3d(x.data() + s * x.stride(0), ci, t, h, wd, g, col.data());
    dwm.noalias() += g_s * col.transpose();
    if (db) db->flat() += g_s.rowwise().sum();
    dcol.noalias() = wm.transpose() * g_s;
    detail::col2im3d(dcol.data(), ci, t, h, wd, g, dx.data() + s * dx.stride(0));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Depthwise k x k convolution on (N, C, H, W), stride 1, zero padding (k-1)/2.

template <typename Scalar>
Tensor<Scalar> depthwise2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>* b) {
  require_rank(x.shape(), 4, "depthwise2d input");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (w.rank() != 3 || w.dim(0) != c || w.dim(1) != w.dim(2) || w.dim(1) % 2 == 0)
    throw ShapeMismatch("depthwise2d: input " + shape_str(x.shape()) + " kernel " + shape_str(w.shape()));
  const Index k = w.dim(1), pad = (k - 1) / 2;
  auto y = Tensor<Scalar>::empty(x.shape());
  for (Index s = 0; s < n; ++s)
    for (Index ch = 0; ch < c; ++ch) {
      const Scalar* src = x.data() + (s * c + ch) * h * wd;
      Scalar* dst = y.data() + (s * c + ch) * h * wd;
      const Scalar* ker = w.data() + ch * k * k;
      std::fill(dst, dst + h * wd, b ? (*b)[ch] : Scalar(0));
      for (Index ky = 0; ky < k; ++ky)
        for (Index kx = 0; kx < k; ++kx) {
          const Scalar v = ker[ky * k + kx];
          const Index x0 = std::max<Index>(0, pad - kx), x1 = std::min<Index>(wd, wd + pad - kx);
          for (Index oy = 0; oy < h; ++oy) {
            const Index iy = oy + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const Scalar* srow = src + iy * wd;
            Scalar* drow = dst + oy * wd;
            const Scalar* sshift = srow + kx - pad;
#pragma GCC ivdep
            for (Index ox = x0; ox < x1; ++ox) drow[ox] += v * sshift[ox];
          }
        }
    }
  return y;
}

template <typename Scalar>
Tensor<Scalar> depthwise2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& dy,
                                    Tensor<Scalar>& dw, Tensor<Scalar>* db) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index k = w.dim(1), pad = (k - 1) / 2;
  Tensor<Scalar> dx(x.shape());
  for (Index s = 0; s < n; ++s)
    for (Index ch = 0; ch < c; ++ch) {
      const Scalar* src = x.data() + (s * c + ch) * h * wd;
      const Scalar* g = dy.data() + (s * c + ch) * h * wd;
      Scalar* dsrc = dx.data() + (s * c + ch) * h * wd;
      const Scalar* ker = w.data() + ch * k * k;
      Scalar* dker = dw.data() + ch * k * k;
      if (db) {
        Scalar acc = 0;
        for (Index i = 0; i < h * wd; ++i) acc += g[i];
        (*db)[ch] += acc;
      }
      for (Index ky = 0; ky < k; ++ky)
        for (Index kx = 0; kx < k; ++kx) {
          const Scalar v = ker[ky * k + kx];
          Scalar acc = 0;
          const Index x0 = std::max<Index>(0, pad - kx), x1 = std::min<Index>(wd, wd + pad - kx);
          for (Index oy = 0; oy < h; ++oy) {
            const Index iy = oy + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const Scalar* srow = src + iy * wd;
            Scalar* dsrow = dsrc + iy * wd;
            const Scalar* grow = g + oy * wd;
            const Index shift = kx - pad, len = x1 - x0;
            const auto gseg = ConstVectorMap<Scalar>(grow + x0, len);
            acc += gseg.dot(ConstVectorMap<Scalar>(srow + x0 + shift, len));
            VectorMap<Scalar>(dsrow + x0 + shift, len) += v * gseg;
          }
          dker[ky * k + kx] += acc;
        }
    }
  return dx;
}

// ---------------------------------------------------------------------------
// 3x3 max pooling, stride 1, zero padding 1. Padding cells take part in the max
// as zeros; `argmax` stores the winning flat input index, or -1 for a pad cell.

template <typename Scalar>
Tensor<Scalar> maxpool3x3(const Tensor<Scalar>& x, std::vector<std::int32_t>* argmax) {
  require_rank(x.shape(), 4, "maxpool3x3 input");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), pw = w + 2;
  auto y = Tensor<Scalar>::empty(x.shape());
  if (argmax) argmax->resize(static_cast<std::size_t>(x.size()));
  // Zero-bordered copy of one plane; the scan order below is row-major over the window.
  std::vector<Scalar> padded(static_cast<std::size_t>((h + 2) * pw), Scalar(0));
  for (Index p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * h * w;
    for (Index iy = 0; iy < h; ++iy) std::copy_n(src + iy * w, w, padded.data() + (iy + 1) * pw + 1);
    for (Index oy = 0; oy < h; ++oy)
      for (Index ox = 0; ox < w; ++ox) {
        const Scalar* win = padded.data() + oy * pw + ox;
        Scalar best = win[0];
        Index arg = 0;
        for (Index dy = 0; dy < 3; ++dy)
          for (Index dx = 0; dx < 3; ++dx) {
            const Scalar v = win[dy * pw + dx];
            const bool greater = v > best;
            best = greater ? v : best;
            arg = greater ? dy * pw + dx : arg;
          }
        const Index o = p * h * w + oy * w + ox;
        y[o] = best;
        if (argmax) {
          const Index iy = oy + arg / pw - 1, ix = ox + arg % pw - 1;
          const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
          (*argmax)[static_cast<std::size_t>(o)] = inside ? static_cast<std::int32_t>(p * h * w + iy * w + ix) : -1;
        }
      }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> maxpool3x3_backward(const Shape& x_shape, const std::vector<std::int32_t>& argmax,
                                   const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(x_shape);
  for (Index o = 0; o < dy.size(); ++o) {
    const auto a = argmax[static_cast<std::size_t>(o)];
    if (a >= 0) dx[a] += dy[o];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Non-overlapping average pooling (kernel = stride = s) on (N, C, H, W).

template <typename Scalar>
Tensor<Scalar> avgpool(const Tensor<Scalar>& x, Index s) {
  require_rank(x.shape(), 4, "avgpool input");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % s != 0 || w % s != 0)
    throw IndivisibleSpatial("spatial " + std::to_string(h) + "x" + std::to_string(w) + " by stride " +
                             std::to_string(s));
  const Index ho = h / s, wo = w / s;
  Tensor<Scalar> y({x.dim(0), x.dim(1), ho, wo});
  const Scalar inv = Scalar(1) / static_cast<Scalar>(s * s);
  for (Index p = 0; p < planes; ++p)
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox) {
        Scalar acc = 0;
        for (Index a = 0; a < s; ++a)
          for (Index c = 0; c < s; ++c) acc += x[p * h * w + (oy * s + a) * w + ox * s + c];
        y[p * ho * wo + oy * wo + ox] = acc * inv;
      }
  return y;
}

template <typename Scalar>
Tensor<Scalar> avgpool_backward(const Shape& x_shape, Index s, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(x_shape);
  const Index planes = x_shape[0] * x_shape[1], h = x_shape[2], w = x_shape[3];
  const Index ho = h / s, wo = w / s;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(s * s);
  for (Index p = 0; p < planes; ++p)
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox) {
        const Scalar g = dy[p * ho * wo + oy * wo + ox] * inv;
        for (Index a = 0; a < s; ++a)
          for (Index c = 0; c < s; ++c) dx[p * h * w + (oy * s + a) * w + ox * s + c] += g;
      }
  return dx;
}

// ---------------------------------------------------------------------------
// Activations. GELU is the exact erf form.

template <typename Scalar>
Scalar gelu_scalar(Scalar v) {
  return Scalar(0.5) * v * (Scalar(1) + std::erf(v * Scalar(M_SQRT1_2)));
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  auto y = Tensor<Scalar>::empty(x.shape());
  const auto v = x.flat().array();
  y.flat().array() = Scalar(0.5) * v * (Scalar(1) + (v * Scalar(M_SQRT1_2)).erf());
  return y;
}

template <typename Scalar>
Tensor<Scalar> gelu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  auto dx = Tensor<Scalar>::empty(x.shape());
  const Scalar inv_sqrt_2pi = Scalar(0.3989422804014327);
  const auto v = x.flat().array();
  const auto cdf = Scalar(0.5) * (Scalar(1) + (v * Scalar(M_SQRT1_2)).erf());
  const auto pdf = inv_sqrt_2pi * (Scalar(-0.5) * v.square()).exp();
  dx.flat().array() = dy.flat().array() * (cdf + v * pdf);
  return dx;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  auto y = Tensor<Scalar>::empty(x.shape());
  y.flat() = x.flat().cwiseMax(Scalar(0));
  return y;
}

/// Gradient of ReLU given its input (or output: the masks agree).
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  auto dx = Tensor<Scalar>::empty(x.shape());
  dx.flat() = (x.flat().array() > Scalar(0)).select(dy.flat(), Scalar(0));
  return dx;
}

// ---------------------------------------------------------------------------
// Channel concatenation / split along axis 1.

template <typename Scalar>
Tensor<Scalar> concat_channels(std::initializer_list<const Tensor<Scalar>*> parts) {
  const Tensor<Scalar>& first = **parts.begin();
  Shape shape = first.shape();
  Index channels = 0;
  for (const auto* p : parts) {
    if (p->rank() != first.rank() || p->dim(0) != first.dim(0) || p->stride(1) != first.stride(1))
      throw ShapeMismatch("concat_channels: " + shape_str(p->shape()) + " vs " + shape_str(first.shape()));
    channels += p->dim(1);
  }
  shape[1] = channels;
  auto y = Tensor<Scalar>::empty(shape);
  const Index inner = first.stride(1);
  for (Index n = 0; n < first.dim(0); ++n) {
    Scalar* dst = y.data() + n * channels * inner;
    for (const auto* p : parts) {
      const Index len = p->dim(1) * inner;
      std::copy_n(p->data() + n * len, len, dst);
      dst += len;
    }
  }
  return y;
}

/// Inverse of concat_channels for gradients: slices [begin, begin + count) of axis 1.
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& x, Index begin, Index count) {
  Shape shape = x.shape();
  shape[1] = count;
  auto y = Tensor<Scalar>::empty(shape);
  const Index inner = x.stride(1);
  for (Index n = 0; n < x.dim(0); ++n)
    std::copy_n(x.data() + (n * x.dim(1) + begin) * inner, count * inner, y.data() + n * count * inner);
  return y;
}

// ---------------------------------------------------------------------------
// Folding time into batch: (B, C, T, H, W) <-> (B*T, C, H, W).

template <typename Scalar>
Tensor<Scalar> fold_time(const Tensor<Scalar>& x) {
  require_rank(x.shape(), 5, "fold_time input");
  const Index b = x.dim(0), c = x.dim(1), t = x.dim(2), hw = x.dim(3) * x.dim(4);
  auto y = Tensor<Scalar>::empty({b * t, c, x.dim(3), x.dim(4)});
  for (Index n = 0; n < b; ++n)
    for (Index ch = 0; ch < c; ++ch)
      for (Index f = 0; f < t; ++f)
        std::copy_n(x.data() + ((n * c + ch) * t + f) * hw, hw, y.data() + ((n * t + f) * c + ch) * hw);
  return y;
}

template <typename Scalar>
Tensor<Scalar> unfold_time(const Tensor<Scalar>& y, Index t) {
  require_rank(y.shape(), 4, "unfold_time input");
  const Index b = y.dim(0) / t, c = y.dim(1), hw = y.dim(2) * y.dim(3);
  auto x = Tensor<Scalar>::empty({b, c, t, y.dim(2), y.dim(3)});
  for (Index n = 0; n < b; ++n)
    for (Index ch = 0; ch < c; ++ch)
      for (Index f = 0; f < t; ++f)
        std::copy_n(y.data() + ((n * t + f) * c + ch) * hw, hw, x.data() + ((n * c + ch) * t + f) * hw);
  return x;
}

}  // namespace cvvnet::ops
