#pragma once

// Small stateful layers: each caches what its backward pass needs from the
// most recent forward call in Train mode.

#include <cmath>
#include <random>

#include "cvvnet/ops.hpp"

namespace cvvnet {

/// Fan-in scaled uniform init, bound = 1 / sqrt(fan_in).
template <typename Scalar, typename Rng>
Tensor<Scalar> fan_in_uniform(Shape shape, Index fan_in, Rng& rng) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(fan_in));
  return Tensor<Scalar>::uniform(std::move(shape), -bound, bound, rng);
}

template <typename Scalar>
class Conv3d {
 public:
  Conv3d() = default;
  template <typename Rng>
  Conv3d(Index in_ch, Index out_ch, ops::Conv3dGeometry geom, Rng& rng, bool with_bias = true)
      : geom_(geom),
        weight_(fan_in_uniform<Scalar>({out_ch, in_ch, geom.kt, geom.kh, geom.kw}, in_ch * geom.kt * geom.kh * geom.kw,
                                       rng)),
        has_bias_(with_bias) {
    if (has_bias_) bias_ = Parameter<Scalar>(Tensor<Scalar>({out_ch}), false);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    if (mode == Mode::Train) input_ = x;
    return ops::conv3d(x, weight_.value, has_bias_ ? &bias_.value : nullptr, geom_);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    return ops::conv3d_backward(input_, weight_.value, dy, geom_, weight_.grad, has_bias_ ? &bias_.grad : nullptr);
  }
  void visit(const std::string& prefix, const ParamVisitor<Scalar>& f) {
    f(join_name(prefix, "weight"), weight_);
    if (has_bias_) f(join_name(prefix, "bias"), bias_);
  }

  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }
  const ops::Conv3dGeometry& geometry() const { return geom_; }

 private:
  ops::Conv3dGeometry geom_;
  Parameter<Scalar> weight_, bias_;
  bool has_bias_ = true;
  Tensor<Scalar> input_;
};

/// Pointwise channel map y = W x + b over axis 1 of any (B, C, ...) tensor.
template <typename Scalar>
class Pointwise {
 public:
  Pointwise() = default;
  template <typename Rng>
  Pointwise(Index in_ch, Index out_ch, Rng& rng, bool with_bias = true)
      : weight_(fan_in_uniform<Scalar>({out_ch, in_ch}, in_ch, rng)), has_bias_(with_bias) {
    if (has_bias_) bias_ = Parameter<Scalar>(Tensor<Scalar>({out_ch}), false);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    if (mode == Mode::Train) input_ = x;
    return ops::pointwise(x, weight_.value, has_bias_ ? &bias_.value : nullptr);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    return ops::pointwise_backward(input_, weight_.value, dy, weight_.grad, has_bias_ ? &bias_.grad : nullptr);
  }
  void visit(const std::string& prefix, const ParamVisitor<Scalar>& f) {
    f(join_name(prefix, "weight"), weight_);
    if (has_bias_) f(join_name(prefix, "bias"), bias_);
  }

  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }

 private:
  Parameter<Scalar> weight_, bias_;
  bool has_bias_ = true;
  Tensor<Scalar> input_;
};

/// Per-channel batch normalization over every axis except 1. Train mode uses
/// batch statistics and updates running estimates (unbiased variance); Eval
/// uses the running estimates.
template <typename Scalar>
class BatchNorm {
 public:
  static constexpr Scalar kEps = Scalar(1e-5);

  BatchNorm() = default;
  explicit BatchNorm(Index channels, bool affine_shift = true, Scalar momentum = Scalar(0.1))
      : gamma_(Tensor<Scalar>::constant({channels}, Scalar(1)), false),
        beta_(Tensor<Scalar>({channels}), false),
        running_mean_({channels}),
        running_var_(Tensor<Scalar>::constant({channels}, Scalar(1))),
        shift_(affine_shift),
        momentum_(momentum) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    const Index n = x.dim(0), c = x.dim(1), inner = x.stride(1);
    if (c != gamma_.value.size()) throw ShapeMismatch("batchnorm channels " + shape_str(x.shape()));
    auto y = Tensor<Scalar>::empty(x.shape());
    Vector<Scalar> mean(c), inv_std(c);
    if (mode == Mode::Train) {
      const Index count = n * inner;
      for (Index ch = 0; ch < c; ++ch) {
        double s = 0, ss = 0;
        for (Index b = 0; b < n; ++b) {
          const auto seg = x.flat().segment((b * c + ch) * inner, inner);
          s += static_cast<double>(seg.sum());
        }
        const double mu = s / static_cast<double>(count);
        for (Index b = 0; b < n; ++b) {
          const auto seg = x.flat().segment((b * c + ch) * inner, inner);
          ss += static_cast<double>((seg.array() - static_cast<Scalar>(mu)).square().sum());
        }
        const double var = ss / static_cast<double>(count);
        mean[ch] = static_cast<Scalar>(mu);
        inv_std[ch] = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(kEps)));
        const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
        running_mean_[ch] = (Scalar(1) - momentum_) * running_mean_[ch] + momentum_ * static_cast<Scalar>(mu);
        running_var_[ch] = (Scalar(1) - momentum_) * running_var_[ch] + momentum_ * static_cast<Scalar>(unbiased);
      }
    } else {
      mean = running_mean_.flat();
      inv_std = (running_var_.flat().array() + kEps).rsqrt().matrix();
    }
    auto xhat = Tensor<Scalar>::empty(x.shape());
    for (Index b = 0; b < n; ++b)
      for (Index ch = 0; ch < c; ++ch) {
        const Index off = (b * c + ch) * inner;
        xhat.flat().segment(off, inner) = (x.flat().segment(off, inner).array() - mean[ch]) * inv_std[ch];
        y.flat().segment(off, inner) =
            xhat.flat().segment(off, inner).array() * gamma_.value[ch] + (shift_ ? beta_.value[ch] : Scalar(0));
      }
    if (mode == Mode::Train) {
      xhat_ = std::move(xhat);
      inv_std_ = inv_std;
    }
    return y;
  }

  /// Backward through the batch-statistics (Train) path.
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    const Index n = dy.dim(0), c = dy.dim(1), inner = dy.stride(1);
    const Scalar count = static_cast<Scalar>(n * inner);
    auto dx = Tensor<Scalar>::empty(dy.shape());
    for (Index ch = 0; ch < c; ++ch) {
      Scalar sum_dy = 0, sum_dy_xhat = 0;
      for (Index b = 0; b < n; ++b) {
        const Index off = (b * c + ch) * inner;
        sum_dy += dy.flat().segment(off, inner).sum();
        sum_dy_xhat += dy.flat().segment(off, inner).dot(xhat_.flat().segment(off, inner));
      }
      gamma_.grad[ch] += sum_dy_xhat;
      if (shift_) beta_.grad[ch] += sum_dy;
      const Scalar k = gamma_.value[ch] * inv_std_[ch] / count;
      for (Index b = 0; b < n; ++b) {
        const Index off = (b * c + ch) * inner;
        dx.flat().segment(off, inner) =
            k * (count * dy.flat().segment(off, inner).array() - sum_dy -
                 xhat_.flat().segment(off, inner).array() * sum_dy_xhat);
      }
    }
    return dx;
  }

  void visit(const std::string& prefix, const ParamVisitor<Scalar>& f) {
    f(join_name(prefix, "gamma"), gamma_);
    if (shift_) f(join_name(prefix, "beta"), beta_);
  }
  void visit_buffers(const std::string& prefix, const BufferVisitor<Scalar>& f) {
    f(join_name(prefix, "running_mean"), running_mean_);
    f(join_name(prefix, "running_var"), running_var_);
  }

  Parameter<Scalar>& gamma() { return gamma_; }
  Parameter<Scalar>& beta() { return beta_; }
  Tensor<Scalar>& running_mean() { return running_mean_; }
  Tensor<Scalar>& running_var() { return running_var_; }

 private:
  Parameter<Scalar> gamma_, beta_;
  Tensor<Scalar> running_mean_, running_var_;
  bool shift_ = true;
  Scalar momentum_ = Scalar(0.1);
  Tensor<Scalar> xhat_;
  Vector<Scalar> inv_std_;
};

}  // namespace cvvnet
