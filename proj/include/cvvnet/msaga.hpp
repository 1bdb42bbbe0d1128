#pragma once

// Multi-scale attention gated aggregation on clip features (B, C, T, H, W).
//
//   DGA:     G = Wg X,  V = Wv E(X),  Y = Wp (ReLU(G) ⊙ ReLU(V))
//   Add:     Y = X + E(X)
//   Concat:  Y = Wc [X; E(X)]          (2C -> C)
//
// E is either HLFE applied frame by frame (time folded into batch) or a
// stride-1 P3D block. All W* are 1x1x1 convolutions with bias.

#include <optional>
#include <string>

#include "cvvnet/hlfe.hpp"
#include "cvvnet/p3d.hpp"

namespace cvvnet {

enum class Aggregator { DGA, Add, Concat };
enum class Extractor { HLFE, P3D };

inline std::string to_string(Aggregator a) {
  switch (a) {
    case Aggregator::DGA: return "DGA";
    case Aggregator::Add: return "Add";
    case Aggregator::Concat: return "Concat";
  }
  return "?";
}
inline std::string to_string(Extractor e) { return e == Extractor::HLFE ? "HLFE" : "P3D"; }

inline Aggregator parse_aggregator(const std::string& s) {
  if (s == "DGA") return Aggregator::DGA;
  if (s == "Add") return Aggregator::Add;
  if (s == "Concat") return Aggregator::Concat;
  throw ConfigError("unknown aggregator '" + s + "' (expected DGA|Add|Concat)");
}
inline Extractor parse_extractor(const std::string& s) {
  if (s == "HLFE") return Extractor::HLFE;
  if (s == "P3D") return Extractor::P3D;
  throw ConfigError("unknown extractor '" + s + "' (expected HLFE|P3D)");
}

/// HLFE over every frame independently: fold T into the batch axis.
template <typename Scalar>
Tensor<Scalar> apply_hlfe_over_time(const Tensor<Scalar>& x, const HlfeParams<Scalar>& p) {
  require_rank(x.shape(), 5, "apply_hlfe_over_time input");
  return ops::unfold_time(hlfe_forward(ops::fold_time(x), p), x.dim(2));
}

template <typename Scalar>
class Msaga {
 public:
  Msaga() = default;
  template <typename Rng>
  Msaga(Index channels, Extractor extractor, Aggregator aggregator, Index n_heads, Index kv_stride, Rng& rng)
      : extractor_(extractor), aggregator_(aggregator), channels_(channels) {
    if (extractor == Extractor::HLFE)
      hlfe_.emplace(channels, n_heads, kv_stride, rng);
    else
      p3d_.emplace(channels, channels, 1, rng);
    switch (aggregator) {
      case Aggregator::DGA:
        gate_.emplace(channels, channels, rng);
        value_.emplace(channels, channels, rng);
        proj_.emplace(channels, channels, rng);
        break;
      case Aggregator::Concat:
        fuse_.emplace(2 * channels, channels, rng);
        break;
      case Aggregator::Add:
        break;
    }
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    require_rank(x.shape(), 5, "MSAGA input");
    if (x.dim(1) != channels_)
      throw ShapeMismatch("MSAGA expects " + std::to_string(channels_) + " channels, got " + shape_str(x.shape()));
    auto e = extract(x, mode);
    switch (aggregator_) {
      case Aggregator::Add:
        return x + e;
      case Aggregator::Concat:
        return fuse_->forward(ops::concat_channels<Scalar>({&x, &e}), mode);
      case Aggregator::DGA: {
        auto g = gate_->forward(x, mode);
        auto v = value_->forward(e, mode);
        auto m = Tensor<Scalar>::empty(g.shape());
        m.flat() = g.flat().cwiseMax(Scalar(0)).cwiseProduct(v.flat().cwiseMax(Scalar(0)));
        if (mode == Mode::Train) {
          g_ = std::move(g);
          v_ = std::move(v);
        }
        return proj_->forward(m, mode);
      }
    }
    return {};
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    switch (aggregator_) {
      case Aggregator::Add:
        return dy + extract_backward(dy);
      case Aggregator::Concat: {
        auto dcat = fuse_->backward(dy);
        return ops::slice_channels(dcat, 0, channels_) + extract_backward(ops::slice_channels(dcat, channels_, channels_));
      }
      case Aggregator::DGA: {
        auto dm = proj_->backward(dy);
        auto dg = Tensor<Scalar>::empty(dm.shape()), dv = Tensor<Scalar>::empty(dm.shape());
        const auto gpos = (g_.flat().array() > Scalar(0));
        const auto vpos = (v_.flat().array() > Scalar(0));
        dg.flat() = (gpos && vpos).select(dm.flat().cwiseProduct(v_.flat()), Scalar(0));
        dv.flat() = (gpos && vpos).select(dm.flat().cwiseProduct(g_.flat()), Scalar(0));
        return gate_->backward(dg) + extract_backward(value_->backward(dv));
      }
    }
    return {};
  }

  void visit(const std::string& prefix, const ParamVisitor<Scalar>& f) {
    if (hlfe_) hlfe_->visit(join_name(prefix, "hlfe"), f);
    if (p3d_) p3d_->visit(join_name(prefix, "p3d"), f);
    if (gate_) gate_->visit(join_name(prefix, "gate"), f);
    if (value_) value_->visit(join_name(prefix, "value"), f);
    if (proj_) proj_->visit(join_name(prefix, "proj"), f);
    if (fuse_) fuse_->visit(join_name(prefix, "fuse"), f);
  }
  void visit_buffers(const std::string& prefix, const BufferVisitor<Scalar>& f) {
    if (p3d_) p3d_->visit_buffers(join_name(prefix, "p3d"), f);
  }

  Extractor extractor() const { return extractor_; }
  Aggregator aggregator() const { return aggregator_; }
  Hlfe<Scalar>* hlfe() { return hlfe_ ? &*hlfe_ : nullptr; }
  P3dBlock<Scalar>* p3d() { return p3d_ ? &*p3d_ : nullptr; }
  Pointwise<Scalar>* gate() { return gate_ ? &*gate_ : nullptr; }
  Pointwise<Scalar>* value() { return value_ ? &*value_ : nullptr; }
  Pointwise<Scalar>* proj() { return proj_ ? &*proj_ : nullptr; }
  Pointwise<Scalar>* fuse() { return fuse_ ? &*fuse_ : nullptr; }

  /// Replaces the extractor by a user function (test harness hook).
  void override_extractor(std::function<Tensor<Scalar>(const Tensor<Scalar>&)> f) { override_ = std::move(f); }

 private:
  Tensor<Scalar> extract(const Tensor<Scalar>& x, Mode mode) {
    if (override_) return override_(x);
    if (hlfe_) {
      t_ = x.dim(2);
      return ops::unfold_time(hlfe_->forward(ops::fold_time(x), mode), t_);
    }
    return p3d_->forward(x, mode);
  }
  Tensor<Scalar> extract_backward(const Tensor<Scalar>& de) {
    if (override_) return Tensor<Scalar>(de.shape());
    if (hlfe_) return ops::unfold_time(hlfe_->backward(ops::fold_time(de)), t_);
    return p3d_->backward(de);
  }

  Extractor extractor_ = Extractor::HLFE;
  Aggregator aggregator_ = Aggregator::DGA;
  Index channels_ = 0;
  std::optional<Hlfe<Scalar>> hlfe_;
  std::optional<P3dBlock<Scalar>> p3d_;
  std::optional<Pointwise<Scalar>> gate_, value_, proj_, fuse_;
  std::function<Tensor<Scalar>(const Tensor<Scalar>&)> override_;
  Tensor<Scalar> g_, v_;
  Index t_ = 1;
};

}  // namespace cvvnet
