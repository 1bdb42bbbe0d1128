#pragma once

#include <optional>

#include "cvvnet/layers.hpp"

namespace cvvnet {

/// Pseudo-3D residual block on (B, C, T, H, W):
///   y = shortcut(x) + ReLU(BN(Conv_3x1x1(ReLU(BN(Conv_1x3x3,stride s(x))))))
/// Temporal padding replicates edge frames. The shortcut is the identity unless the channel count or spatial stride
/// changes, in which case it is a strided 1x1x1 convolution followed by BN.
/// Convolutions feeding a BN carry no bias.
template <typename Scalar>
class P3dBlock {
 public:
  P3dBlock() = default;
  template <typename Rng>
  P3dBlock(Index in_ch, Index out_ch, Index stride, Rng& rng)
      : spatial_(in_ch, out_ch, ops::Conv3dGeometry{1, 3, 3, stride, 0, 1, 1}, rng, false),
        bn1_(out_ch),
        temporal_(out_ch, out_ch, ops::Conv3dGeometry{3, 1, 1, 1, 1, 0, 0, true}, rng, false),
        bn2_(out_ch) {
    if (in_ch != out_ch || stride != 1) {
      shortcut_.emplace(in_ch, out_ch, ops::Conv3dGeometry{1, 1, 1, stride, 0, 0, 0}, rng, false);
      bn_sc_.emplace(out_ch);
    }
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    require_rank(x.shape(), 5, "P3D input");
    if (x.dim(1) != spatial_.weight().value.dim(1))
      throw ShapeMismatch("P3D expects " + std::to_string(spatial_.weight().value.dim(1)) + " channels, got " +
                          shape_str(x.shape()));
    auto a1 = bn1_.forward(spatial_.forward(x, mode), mode);
    auto h1 = ops::relu(a1);
    auto a2 = bn2_.forward(temporal_.forward(h1, mode), mode);
    auto h2 = ops::relu(a2);
    if (mode == Mode::Train) {
      a1_ = std::move(a1);
      a2_ = a2;
    }
    if (shortcut_) return bn_sc_->forward(shortcut_->forward(x, mode), mode) + h2;
    return h2 + x;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    auto da2 = ops::relu_backward(a2_, dy);
    auto dh1 = temporal_.backward(bn2_.backward(da2));
    auto dx = spatial_.backward(bn1_.backward(ops::relu_backward(a1_, dh1)));
    if (shortcut_)
      dx += shortcut_->backward(bn_sc_->backward(dy));
    else
      dx += dy;
    return dx;
  }

  void visit(const std::string& prefix, const ParamVisitor<Scalar>& f) {
    spatial_.visit(join_name(prefix, "spatial"), f);
    bn1_.visit(join_name(prefix, "bn1"), f);
    temporal_.visit(join_name(prefix, "temporal"), f);
    bn2_.visit(join_name(prefix, "bn2"), f);
    if (shortcut_) {
      shortcut_->visit(join_name(prefix, "shortcut"), f);
      bn_sc_->visit(join_name(prefix, "bn_shortcut"), f);
    }
  }
  void visit_buffers(const std::string& prefix, const BufferVisitor<Scalar>& f) {
    bn1_.visit_buffers(join_name(prefix, "bn1"), f);
    bn2_.visit_buffers(join_name(prefix, "bn2"), f);
    if (bn_sc_) bn_sc_->visit_buffers(join_name(prefix, "bn_shortcut"), f);
  }

  Conv3d<Scalar>& spatial() { return spatial_; }
  Conv3d<Scalar>& temporal() { return temporal_; }
  bool has_projection() const { return shortcut_.has_value(); }

 private:
  Conv3d<Scalar> spatial_;
  BatchNorm<Scalar> bn1_;
  Conv3d<Scalar> temporal_;
  BatchNorm<Scalar> bn2_;
  std::optional<Conv3d<Scalar>> shortcut_;
  std::optional<BatchNorm<Scalar>> bn_sc_;
  Tensor<Scalar> a1_, a2_;
};

}  // namespace cvvnet
