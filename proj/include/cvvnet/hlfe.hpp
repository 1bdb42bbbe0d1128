#pragma once

// High-low frequency feature extraction on (B, C, H, W) feature maps.
//
//   high, pooling:  Y1 = GELU(P_pool * MaxPool3x3(X))
//   high, conv:     X' = P_in * X;  F3 = DW3(X'), F5 = DW5(F3), F7 = DW7(F5)
//                   Y2 = GELU(P_ms * [F3; F5; F7])
//   low:            Q = Wq X (full resolution), K/V = Wk/Wv AvgPool_s(X)
//                   Y_low = Wo [head_1; ...; head_Nh],  head = softmax(Q K^T / sqrt(d)) V
//   output:         Y = P_out * [Y1; Y2; Y_low] + X
//
// Every 1x1 map carries a bias. No positional encoding is used.

#include <cmath>

#include "cvvnet/layers.hpp"

namespace cvvnet {

template <typename Scalar>
struct HlfeParams {
  Parameter<Scalar> proj_pool_w, proj_pool_b;
  Parameter<Scalar> proj_in_w, proj_in_b;
  Parameter<Scalar> dw3_w, dw3_b, dw5_w, dw5_b, dw7_w, dw7_b;
  Parameter<Scalar> fuse_ms_w, fuse_ms_b;
  Parameter<Scalar> wq_w, wq_b, wk_w, wk_b, wv_w, wv_b, wo_w, wo_b;
  Parameter<Scalar> fuse_out_w, fuse_out_b;
  Index n_heads = 8;
  Index kv_stride = 2;

  Index channels() const { return proj_in_w.value.dim(0); }
  Index head_dim() const { return channels() / n_heads; }

  template <typename Rng>
  static HlfeParams init(Index channels, Index n_heads, Index kv_stride, Rng& rng) {
    if (n_heads < 1 || channels % n_heads != 0)
      throw ShapeMismatch("HLFE channels " + std::to_string(channels) + " not divisible by heads " +
                          std::to_string(n_heads));
    HlfeParams p;
    p.n_heads = n_heads;
    p.kv_stride = kv_stride;
    const Index c = channels;
    auto weight = [&](Shape s, Index fan_in) { return Parameter<Scalar>(fan_in_uniform<Scalar>(std::move(s), fan_in, rng)); };
    auto bias = [&](Index n) { return Parameter<Scalar>(Tensor<Scalar>({n}), false); };
    p.proj_pool_w = weight({c, c}, c);
    p.proj_pool_b = bias(c);
    p.proj_in_w = weight({c, c}, c);
    p.proj_in_b = bias(c);
    p.dw3_w = weight({c, 3, 3}, 9);
    p.dw3_b = bias(c);
    p.dw5_w = weight({c, 5, 5}, 25);
    p.dw5_b = bias(c);
    p.dw7_w = weight({c, 7, 7}, 49);
    p.dw7_b = bias(c);
    p.fuse_ms_w = weight({c, 3 * c}, 3 * c);
    p.fuse_ms_b = bias(c);
    p.wq_w = weight({c, c}, c);
    p.wq_b = bias(c);
    p.wk_w = weight({c, c}, c);
    p.wk_b = bias(c);
    p.wv_w = weight({c, c}, c);
    p.wv_b = bias(c);
    p.wo_w = weight({c, c}, c);
    p.wo_b = bias(c);
    p.fuse_out_w = weight({c, 3 * c}, 3 * c);
    p.fuse_out_b = bias(c);
    return p;
  }

  void visit(const std::string& prefix, const ParamVisitor<Scalar>& f) {
    f(join_name(prefix, "proj_pool.weight"), proj_pool_w);
    f(join_name(prefix, "proj_pool.bias"), proj_pool_b);
    f(join_name(prefix, "proj_in.weight"), proj_in_w);
    f(join_name(prefix, "proj_in.bias"), proj_in_b);
    f(join_name(prefix, "dw3.weight"), dw3_w);
    f(join_name(prefix, "dw3.bias"), dw3_b);
    f(join_name(prefix, "dw5.weight"), dw5_w);
    f(join_name(prefix, "dw5.bias"), dw5_b);
    f(join_name(prefix, "dw7.weight"), dw7_w);
    f(join_name(prefix, "dw7.bias"), dw7_b);
    f(join_name(prefix, "fuse_ms.weight"), fuse_ms_w);
    f(join_name(prefix, "fuse_ms.bias"), fuse_ms_b);
    f(join_name(prefix, "wq.weight"), wq_w);
    f(join_name(prefix, "wq.bias"), wq_b);
    f(join_name(prefix, "wk.weight"), wk_w);
    f(join_name(prefix, "wk.bias"), wk_b);
    f(join_name(prefix, "wv.weight"), wv_w);
    f(join_name(prefix, "wv.bias"), wv_b);
    f(join_name(prefix, "wo.weight"), wo_w);
    f(join_name(prefix, "wo.bias"), wo_b);
    f(join_name(prefix, "fuse_out.weight"), fuse_out_w);
    f(join_name(prefix, "fuse_out.bias"), fuse_out_b);
  }
};

namespace detail {

template <typename Scalar>
void check_hlfe_input(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p) {
  require_rank(x.shape(), 4, "HLFE input");
  if (x.dim(1) != p.channels())
    throw ShapeMismatch("HLFE expects " + std::to_string(p.channels()) + " channels, got " + shape_str(x.shape()));
}

template <typename Scalar>
struct PoolPathCache {
  std::vector<std::int32_t> argmax;
  Tensor<Scalar> pooled, pre_act;
};

template <typename Scalar>
struct ConvPathCache {
  Tensor<Scalar> xp, f3, f5, f7, cat, pre_act;
};

template <typename Scalar>
struct AttentionCache {
  Tensor<Scalar> q, pooled, k, v, heads;
};

template <typename Scalar>
Tensor<Scalar> pool_path(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p, PoolPathCache<Scalar>* c) {
  std::vector<std::int32_t> argmax;
  auto pooled = ops::maxpool3x3(x, &argmax);
  auto pre = ops::pointwise(pooled, p.proj_pool_w.value, &p.proj_pool_b.value);
  auto y = ops::gelu(pre);
  if (c) {
    c->argmax = std::move(argmax);
    c->pooled = std::move(pooled);
    c->pre_act = std::move(pre);
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> conv_path(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p, ConvPathCache<Scalar>* c) {
  auto xp = ops::pointwise(x, p.proj_in_w.value, &p.proj_in_b.value);
  auto f3 = ops::depthwise2d(xp, p.dw3_w.value, &p.dw3_b.value);
  auto f5 = ops::depthwise2d(f3, p.dw5_w.value, &p.dw5_b.value);
  auto f7 = ops::depthwise2d(f5, p.dw7_w.value, &p.dw7_b.value);
  auto cat = ops::concat_channels<Scalar>({&f3, &f5, &f7});
  auto pre = ops::pointwise(cat, p.fuse_ms_w.value, &p.fuse_ms_b.value);
  auto y = ops::gelu(pre);
  if (c) {
    c->xp = std::move(xp);
    c->f3 = std::move(f3);
    c->f5 = std::move(f5);
    c->f7 = std::move(f7);
    c->cat = std::move(cat);
    c->pre_act = std::move(pre);
  }
  return y;
}

/// Row-softmax of S = Q_h^T K_h / sqrt(d) for one sample/head: (HW x HWk).
template <typename Scalar>
RowMatrix<Scalar> attention_weights(const Eigen::Ref<const RowMatrix<Scalar>>& qh,
                                    const Eigen::Ref<const RowMatrix<Scalar>>& kh, Scalar scale) {
  RowMatrix<Scalar> s = (qh.transpose() * kh) * scale;
  for (Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return s;
}

template <typename Scalar>
Tensor<Scalar> attention_path(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p, AttentionCache<Scalar>* c) {
  const Index n = x.dim(0);
  const Index s = p.kv_stride;
  if (x.dim(2) % s != 0 || x.dim(3) % s != 0)
    throw IndivisibleSpatial("HLFE attention: " + shape_str(x.shape()) + " with kv_stride " + std::to_string(s));
  auto q = ops::pointwise(x, p.wq_w.value, &p.wq_b.value);
  auto pooled = ops::avgpool(x, s);
  auto k = ops::pointwise(pooled, p.wk_w.value, &p.wk_b.value);
  auto v = ops::pointwise(pooled, p.wv_w.value, &p.wv_b.value);
  const Index d = p.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  Tensor<Scalar> heads(x.shape());
  for (Index b = 0; b < n; ++b) {
    const auto qm = q.channel_matrix(b);
    const auto km = k.channel_matrix(b);
    const auto vm = v.channel_matrix(b);
    auto om = heads.channel_matrix(b);
    for (Index h = 0; h < p.n_heads; ++h) {
      const RowMatrix<Scalar> attn = attention_weights<Scalar>(qm.middleRows(h * d, d), km.middleRows(h * d, d), scale);
      om.middleRows(h * d, d).noalias() = vm.middleRows(h * d, d) * attn.transpose();
    }
  }
  auto y = ops::pointwise(heads, p.wo_w.value, &p.wo_b.value);
  if (c) {
    c->q = std::move(q);
    c->pooled = std::move(pooled);
    c->k = std::move(k);
    c->v = std::move(v);
    c->heads = std::move(heads);
  }
  return y;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> high_freq_pool_path(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p) {
  detail::check_hlfe_input(x, p);
  return detail::pool_path<Scalar>(x, p, nullptr);
}

template <typename Scalar>
Tensor<Scalar> high_freq_conv_path(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p) {
  detail::check_hlfe_input(x, p);
  return detail::conv_path<Scalar>(x, p, nullptr);
}

template <typename Scalar>
Tensor<Scalar> low_freq_attention(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p) {
  detail::check_hlfe_input(x, p);
  return detail::attention_path<Scalar>(x, p, nullptr);
}

/// Intermediate tensors of the low-frequency path, for inspection.
template <typename Scalar>
struct AttentionTrace {
  Tensor<Scalar> keys, values;             // (B, C, H/s, W/s)
  std::vector<RowMatrix<Scalar>> weights;  // index b * n_heads + h, each (H*W x H/s*W/s)
};

template <typename Scalar>
AttentionTrace<Scalar> trace_low_freq_attention(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p) {
  detail::check_hlfe_input(x, p);
  detail::AttentionCache<Scalar> c;
  detail::attention_path<Scalar>(x, p, &c);
  AttentionTrace<Scalar> t;
  const Index d = p.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  for (Index b = 0; b < x.dim(0); ++b)
    for (Index h = 0; h < p.n_heads; ++h)
      t.weights.push_back(detail::attention_weights<Scalar>(c.q.channel_matrix(b).middleRows(h * d, d),
                                                            c.k.channel_matrix(b).middleRows(h * d, d), scale));
  t.keys = std::move(c.k);
  t.values = std::move(c.v);
  return t;
}

template <typename Scalar>
Tensor<Scalar> hlfe_forward(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p) {
  detail::check_hlfe_input(x, p);
  auto y1 = detail::pool_path<Scalar>(x, p, nullptr);
  auto y2 = detail::conv_path<Scalar>(x, p, nullptr);
  auto yl = detail::attention_path<Scalar>(x, p, nullptr);
  auto y = ops::pointwise(ops::concat_channels<Scalar>({&y1, &y2, &yl}), p.fuse_out_w.value, &p.fuse_out_b.value);
  y += x;
  return y;
}

/// HLFE as a trainable layer: caches intermediates on forward(Train) and
/// accumulates parameter gradients on backward.
template <typename Scalar>
class Hlfe {
 public:
  Hlfe() = default;
  explicit Hlfe(HlfeParams<Scalar> params) : params_(std::move(params)) {}
  template <typename Rng>
  Hlfe(Index channels, Index n_heads, Index kv_stride, Rng& rng)
      : params_(HlfeParams<Scalar>::init(channels, n_heads, kv_stride, rng)) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    detail::check_hlfe_input(x, params_);
    if (mode == Mode::Eval) return hlfe_forward(x, params_);
    x_ = x;
    y1_ = detail::pool_path<Scalar>(x, params_, &pool_);
    y2_ = detail::conv_path<Scalar>(x, params_, &conv_);
    yl_ = detail::attention_path<Scalar>(x, params_, &attn_);
    cat_ = ops::concat_channels<Scalar>({&y1_, &y2_, &yl_});
    auto y = ops::pointwise(cat_, params_.fuse_out_w.value, &params_.fuse_out_b.value);
    y += x;
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    auto& p = params_;
    const Index c = p.channels();
    Tensor<Scalar> dx = dy;  // residual
    auto dcat = ops::pointwise_backward(cat_, p.fuse_out_w.value, dy, p.fuse_out_w.grad, &p.fuse_out_b.grad);
    dx += backward_pool(ops::slice_channels(dcat, 0, c));
    dx += backward_conv(ops::slice_channels(dcat, c, c));
    dx += backward_attention(ops::slice_channels(dcat, 2 * c, c));
    return dx;
  }

  HlfeParams<Scalar>& params() { return params_; }
  const HlfeParams<Scalar>& params() const { return params_; }
  void visit(const std::string& prefix, const ParamVisitor<Scalar>& f) { params_.visit(prefix, f); }

 private:
  Tensor<Scalar> backward_pool(const Tensor<Scalar>& dy1) {
    auto& p = params_;
    auto dpre = ops::gelu_backward(pool_.pre_act, dy1);
    auto dpooled = ops::pointwise_backward(pool_.pooled, p.proj_pool_w.value, dpre, p.proj_pool_w.grad,
                                           &p.proj_pool_b.grad);
    return ops::maxpool3x3_backward(x_.shape(), pool_.argmax, dpooled);
  }

  Tensor<Scalar> backward_conv(const Tensor<Scalar>& dy2) {
    auto& p = params_;
    const Index c = p.channels();
    auto dpre = ops::gelu_backward(conv_.pre_act, dy2);
    auto dcat = ops::pointwise_backward(conv_.cat, p.fuse_ms_w.value, dpre, p.fuse_ms_w.grad, &p.fuse_ms_b.grad);
    auto df7 = ops::slice_channels(dcat, 2 * c, c);
    auto df5 = ops::slice_channels(dcat, c, c);
    auto df3 = ops::slice_channels(dcat, 0, c);
    df5 += ops::depthwise2d_backward(conv_.f5, p.dw7_w.value, df7, p.dw7_w.grad, &p.dw7_b.grad);
    df3 += ops::depthwise2d_backward(conv_.f3, p.dw5_w.value, df5, p.dw5_w.grad, &p.dw5_b.grad);
    auto dxp = ops::depthwise2d_backward(conv_.xp, p.dw3_w.value, df3, p.dw3_w.grad, &p.dw3_b.grad);
    return ops::pointwise_backward(x_, p.proj_in_w.value, dxp, p.proj_in_w.grad, &p.proj_in_b.grad);
  }

  Tensor<Scalar> backward_attention(const Tensor<Scalar>& dyl) {
    auto& p = params_;
    const Index n = x_.dim(0), d = p.head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
    auto dheads = ops::pointwise_backward(attn_.heads, p.wo_w.value, dyl, p.wo_w.grad, &p.wo_b.grad);
    Tensor<Scalar> dq(attn_.q.shape()), dk(attn_.k.shape()), dv(attn_.v.shape());
    for (Index b = 0; b < n; ++b) {
      const auto qm = attn_.q.channel_matrix(b);
      const auto km = attn_.k.channel_matrix(b);
      const auto vm = attn_.v.channel_matrix(b);
      const auto gm = dheads.channel_matrix(b);
      auto dqm = dq.channel_matrix(b);
      auto dkm = dk.channel_matrix(b);
      auto dvm = dv.channel_matrix(b);
      for (Index h = 0; h < p.n_heads; ++h) {
        const RowMatrix<Scalar> attn =
            detail::attention_weights<Scalar>(qm.middleRows(h * d, d), km.middleRows(h * d, d), scale);
        const auto g = gm.middleRows(h * d, d);  // d x HW
        dvm.middleRows(h * d, d).noalias() = g * attn;
        RowMatrix<Scalar> dattn = g.transpose() * vm.middleRows(h * d, d);  // HW x HWk
        const Vector<Scalar> row_dot = (dattn.array() * attn.array()).rowwise().sum();
        RowMatrix<Scalar> ds = attn.array() * (dattn.colwise() - row_dot).array();
        ds *= scale;
        dqm.middleRows(h * d, d).noalias() = km.middleRows(h * d, d) * ds.transpose();
        dkm.middleRows(h * d, d).noalias() = qm.middleRows(h * d, d) * ds;
      }
    }
    auto dx = ops::pointwise_backward(x_, p.wq_w.value, dq, p.wq_w.grad, &p.wq_b.grad);
    auto dpooled = ops::pointwise_backward(attn_.pooled, p.wk_w.value, dk, p.wk_w.grad, &p.wk_b.grad);
    dpooled += ops::pointwise_backward(attn_.pooled, p.wv_w.value, dv, p.wv_w.grad, &p.wv_b.grad);
    dx += ops::avgpool_backward(x_.shape(), p.kv_stride, dpooled);
    return dx;
  }

  HlfeParams<Scalar> params_;
  Tensor<Scalar> x_, y1_, y2_, yl_, cat_;
  detail::PoolPathCache<Scalar> pool_;
  detail::ConvPathCache<Scalar> conv_;
  detail::AttentionCache<Scalar> attn_;
};

}  // namespace cvvnet
