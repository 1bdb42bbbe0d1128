#pragma once

// End-to-end network: stem -> stages of P3D / MSAGA blocks -> temporal max
// pooling -> horizontal pyramid pooling -> per-part FC -> BNNeck heads.

#include <map>
#include <variant>

#include "cvvnet/msaga.hpp"

namespace cvvnet {

struct BackboneConfig {
  Index in_channels = 1;
  Index input_height = 64;
  Index input_width = 44;
  std::vector<Index> stage_channels{16, 32};
  std::vector<Index> blocks_per_stage{1, 2};
  /// Spatial stride entering each stage; a stride-2 P3D transition block is
  /// inserted wherever the stride or the channel count changes.
  std::vector<Index> stage_strides{1, 2};
  std::vector<std::pair<Index, Index>> msaga_positions{{1, 0}};
  std::vector<Index> hpp_bins{1, 2, 4};
  Index embed_dim = 32;
  Index num_classes = 16;
  Aggregator aggregator = Aggregator::DGA;
  Extractor extractor = Extractor::HLFE;
  Index n_heads = 8;
  Index kv_stride = 2;
  std::uint64_t init_seed = 0;

  Index parts() const { return std::accumulate(hpp_bins.begin(), hpp_bins.end(), Index{0}); }
  bool is_msaga(Index stage, Index block) const {
    return std::find(msaga_positions.begin(), msaga_positions.end(), std::pair<Index, Index>{stage, block}) !=
           msaga_positions.end();
  }
  Index final_height() const {
    Index h = input_height;
    for (Index s : stage_strides) h = (h - 1) / s + 1;
    return h;
  }

  void validate() const {
    const auto n = stage_channels.size();
    if (n == 0 || blocks_per_stage.size() != n || stage_strides.size() != n)
      throw ConfigError("stage_channels, blocks_per_stage and stage_strides must have equal nonzero length");
    for (std::size_t i = 1; i < n; ++i)
      if (stage_channels[i] < stage_channels[i - 1]) throw ConfigError("stage_channels must be nondecreasing");
    for (auto [s, b] : msaga_positions)
      if (s < 0 || s >= static_cast<Index>(n) || b < 0 || b >= blocks_per_stage[static_cast<std::size_t>(s)])
        throw ConfigError("msaga position (" + std::to_string(s) + ", " + std::to_string(b) + ") is not a block slot");
    if (hpp_bins.empty()) throw ConfigError("hpp_bins must not be empty");
    for (Index k : hpp_bins)
      if (k < 1 || final_height() % k != 0)
        throw ConfigError("hpp bin " + std::to_string(k) + " does not divide final height " +
                          std::to_string(final_height()));
    if (embed_dim < 1 || num_classes < 1 || in_channels < 1) throw ConfigError("sizes must be positive");
  }

  /// Reduced-width default used for desk-scale experiments.
  static BackboneConfig toy() { return {}; }

  /// A larger staging in the style of the cited P3D backbone lineage.
  static BackboneConfig paper_like() {
    BackboneConfig c;
    c.stage_channels = {64, 128, 256, 512};
    c.blocks_per_stage = {1, 5, 4, 1};
    c.stage_strides = {1, 2, 2, 1};
    c.msaga_positions = {{1, 0}, {1, 2}, {1, 4}};
    c.hpp_bins = {16};
    c.embed_dim = 256;
    c.num_classes = 74;
    return c;
  }
};

template <typename Scalar>
using LayerCapture = std::map<std::string, Tensor<Scalar>>;

// ---------------------------------------------------------------------------
// Pooling heads as free functions.

/// Elementwise max over the time axis: (B, C, T, H, W) -> (B, C, H, W).
template <typename Scalar>
Tensor<Scalar> temporal_max_pool(const Tensor<Scalar>& x, std::vector<std::int32_t>* argmax = nullptr) {
  require_rank(x.shape(), 5, "temporal_max_pool input");
  const Index b = x.dim(0), c = x.dim(1), t = x.dim(2), hw = x.dim(3) * x.dim(4);
  if (t < 1) throw EmptyInput("temporal_max_pool needs T >= 1");
  Tensor<Scalar> y({b, c, x.dim(3), x.dim(4)});
  if (argmax) argmax->assign(static_cast<std::size_t>(y.size()), 0);
  for (Index p = 0; p < b * c; ++p)
    for (Index i = 0; i < hw; ++i) {
      Scalar best = x[p * t * hw + i];
      std::int32_t arg = 0;
      for (Index f = 1; f < t; ++f) {
        const Scalar v = x[(p * t + f) * hw + i];
        if (v > best) {
          best = v;
          arg = static_cast<std::int32_t>(f);
        }
      }
      y[p * hw + i] = best;
      if (argmax) (*argmax)[static_cast<std::size_t>(p * hw + i)] = arg;
    }
  return y;
}

template <typename Scalar>
Tensor<Scalar> temporal_max_pool_backward(const Shape& x_shape, const std::vector<std::int32_t>& argmax,
                                          const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(x_shape);
  const Index t = x_shape[2], hw = x_shape[3] * x_shape[4];
  for (Index o = 0; o < dy.size(); ++o) {
    const Index p = o / hw, i = o % hw;
    dx[(p * t + argmax[static_cast<std::size_t>(o)]) * hw + i] += dy[o];
  }
  return dx;
}

/// Horizontal pyramid pooling: for each level with k strips, each of the k
/// equal-height bands is pooled to max + mean. Output (B, P, C), P = sum(bins).
template <typename Scalar>
Tensor<Scalar> hpp(const Tensor<Scalar>& x, const std::vector<Index>& bins, std::vector<std::int32_t>* argmax = nullptr) {
  require_rank(x.shape(), 4, "hpp input");
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Index parts = 0;
  for (Index k : bins) {
    if (k < 1 || h % k != 0)
      throw IndivisibleHeight("height " + std::to_string(h) + " not divisible by " + std::to_string(k) + " strips");
    parts += k;
  }
  Tensor<Scalar> y({b, parts, c});
  if (argmax) argmax->assign(static_cast<std::size_t>(y.size()), 0);
  for (Index n = 0; n < b; ++n)
    for (Index ch = 0; ch < c; ++ch) {
      const Scalar* plane = x.data() + (n * c + ch) * h * w;
      Index part = 0;
      for (Index k : bins) {
        const Index sh = h / k, len = sh * w;
        for (Index s = 0; s < k; ++s, ++part) {
          const Scalar* strip = plane + s * len;
          Index arg = 0;
          Scalar sum = 0;
          for (Index i = 0; i < len; ++i) {
            sum += strip[i];
            if (strip[i] > strip[arg]) arg = i;
          }
          const Index o = (n * parts + part) * c + ch;
          y[o] = strip[arg] + sum / static_cast<Scalar>(len);
          if (argmax) (*argmax)[static_cast<std::size_t>(o)] = static_cast<std::int32_t>(s * len + arg);
        }
      }
    }
  return y;
}

template <typename Scalar>
Tensor<Scalar> hpp_backward(const Shape& x_shape, const std::vector<Index>& bins,
                            const std::vector<std::int32_t>& argmax, const Tensor<Scalar>& dy) {
  const Index b = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3];
  const Index parts = dy.dim(1);
  Tensor<Scalar> dx(x_shape);
  for (Index n = 0; n < b; ++n)
    for (Index ch = 0; ch < c; ++ch) {
      Scalar* plane = dx.data() + (n * c + ch) * h * w;
      Index part = 0;
      for (Index k : bins) {
        const Index sh = h / k, len = sh * w;
        for (Index s = 0; s < k; ++s, ++part) {
          const Index o = (n * parts + part) * c + ch;
          const Scalar g = dy[o];
          plane[argmax[static_cast<std::size_t>(o)]] += g;
          const Scalar gm = g / static_cast<Scalar>(len);
          for (Index i = 0; i < len; ++i) plane[s * len + i] += gm;
        }
      }
    }
  return dx;
}

/// Independent per-part linear maps: (B, P, C) x (P, C, D) -> (B, P, D).
template <typename Scalar>
Tensor<Scalar> part_fc(const Tensor<Scalar>& parts, const Tensor<Scalar>& w) {
  require_rank(parts.shape(), 3, "part_fc input");
  if (w.rank() != 3 || w.dim(0) != parts.dim(1) || w.dim(1) != parts.dim(2))
    throw ShapeMismatch("part_fc: parts " + shape_str(parts.shape()) + " weight " + shape_str(w.shape()));
  const Index b = parts.dim(0), p = parts.dim(1), c = parts.dim(2), d = w.dim(2);
  Tensor<Scalar> y({b, p, d});
  for (Index n = 0; n < b; ++n)
    for (Index k = 0; k < p; ++k)
      y.matrix((n * p + k) * d, 1, d).noalias() =
          parts.matrix((n * p + k) * c, 1, c) * w.matrix(k * c * d, c, d);
  return y;
}

template <typename Scalar>
Tensor<Scalar> part_fc_backward(const Tensor<Scalar>& parts, const Tensor<Scalar>& w, const Tensor<Scalar>& dy,
                                Tensor<Scalar>& dw) {
  const Index b = parts.dim(0), p = parts.dim(1), c = parts.dim(2), d = w.dim(2);
  Tensor<Scalar> dparts(parts.shape());
  for (Index n = 0; n < b; ++n)
    for (Index k = 0; k < p; ++k) {
      const auto g = dy.matrix((n * p + k) * d, 1, d);
      dw.matrix(k * c * d, c, d).noalias() += parts.matrix((n * p + k) * c, 1, c).transpose() * g;
      dparts.matrix((n * p + k) * c, 1, c).noalias() = g * w.matrix(k * c * d, c, d).transpose();
    }
  return dparts;
}

template <typename Scalar>
struct BackboneOutput {
  Tensor<Scalar> embedding;     // (B, P, D), pre-normalization: triplet and retrieval feature
  Tensor<Scalar> bn_embedding;  // (B, P, D), after the BNNeck normalization
  Tensor<Scalar> logits;        // (B, P, num_classes)
};

/// BNNeck: scale-only batch normalization over the P*D features followed by
/// bias-free per-part classifiers.
template <typename Scalar>
class BnNeck {
 public:
  BnNeck() = default;
  template <typename Rng>
  BnNeck(Index parts, Index dim, Index classes, Rng& rng)
      : bn_(parts * dim, /*affine_shift=*/false),
        classifier_(fan_in_uniform<Scalar>({parts, dim, classes}, dim, rng)) {}

  BackboneOutput<Scalar> forward(const Tensor<Scalar>& emb, Mode mode) {
    require_rank(emb.shape(), 3, "bnneck input");
    const Index b = emb.dim(0), p = emb.dim(1), d = emb.dim(2);
    BackboneOutput<Scalar> out;
    out.embedding = emb;
    out.bn_embedding = bn_.forward(emb.reshaped({b, p * d}), mode).reshaped({b, p, d});
    out.logits = part_fc(out.bn_embedding, classifier_.value);
    if (mode == Mode::Train) normed_ = out.bn_embedding;
    return out;
  }

  /// Returns d(embedding) given gradients on the triplet feature and the logits.
  Tensor<Scalar> backward(const Tensor<Scalar>& d_embedding, const Tensor<Scalar>& d_logits) {
    const Index b = normed_.dim(0), p = normed_.dim(1), d = normed_.dim(2);
    auto dnorm = part_fc_backward(normed_, classifier_.value, d_logits, classifier_.grad);
    auto demb = bn_.backward(dnorm.reshaped({b, p * d})).reshaped({b, p, d});
    demb += d_embedding;
    return demb;
  }

  void visit(const std::string& prefix, const ParamVisitor<Scalar>& f) {
    bn_.visit(join_name(prefix, "bn"), f);
    f(join_name(prefix, "classifier.weight"), classifier_);
  }
  void visit_buffers(const std::string& prefix, const BufferVisitor<Scalar>& f) {
    bn_.visit_buffers(join_name(prefix, "bn"), f);
  }

  Parameter<Scalar>& classifier() { return classifier_; }
  BatchNorm<Scalar>& bn() { return bn_; }

 private:
  BatchNorm<Scalar> bn_;
  Parameter<Scalar> classifier_;
  Tensor<Scalar> normed_;
};

template <typename Scalar>
class CvvNet {
 public:
  using Block = std::variant<P3dBlock<Scalar>, Msaga<Scalar>>;

  struct Stage {
    std::optional<P3dBlock<Scalar>> transition;
    std::vector<Block> blocks;
  };

  CvvNet() = default;
  explicit CvvNet(BackboneConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.init_seed);
    const Index c0 = config_.stage_channels.front();
    stem_ = Conv3d<Scalar>(config_.in_channels, c0, ops::Conv3dGeometry{3, 3, 3, 1, 1, 1, 1, true}, rng);
    Index ch = c0;
    for (std::size_t s = 0; s < config_.stage_channels.size(); ++s) {
      Stage stage;
      const Index out = config_.stage_channels[s], stride = config_.stage_strides[s];
      if (out != ch || stride != 1) stage.transition.emplace(ch, out, stride, rng);
      ch = out;
      for (Index b = 0; b < config_.blocks_per_stage[s]; ++b) {
        if (config_.is_msaga(static_cast<Index>(s), b))
          stage.blocks.emplace_back(std::in_place_type<Msaga<Scalar>>, ch, config_.extractor, config_.aggregator,
                                    config_.n_heads, config_.kv_stride, rng);
        else
          stage.blocks.emplace_back(std::in_place_type<P3dBlock<Scalar>>, ch, ch, 1, rng);
      }
      stages_.push_back(std::move(stage));
    }
    fc_ = Parameter<Scalar>(fan_in_uniform<Scalar>({config_.parts(), ch, config_.embed_dim}, ch, rng));
    neck_ = BnNeck<Scalar>(config_.parts(), config_.embed_dim, config_.num_classes, rng);
  }

  const BackboneConfig& config() const { return config_; }

  /// Stem: 3x3x3 convolution (stride 1, pad 1; edge-replicated in time) followed by ReLU.
  Tensor<Scalar> stem(const Tensor<Scalar>& x, Mode mode) {
    require_rank(x.shape(), 5, "network input");
    if (x.dim(1) != config_.in_channels || x.dim(3) != config_.input_height || x.dim(4) != config_.input_width)
      throw ShapeMismatch("network expects (B, " + std::to_string(config_.in_channels) + ", T, " +
                          std::to_string(config_.input_height) + ", " + std::to_string(config_.input_width) +
                          "), got " + shape_str(x.shape()));
    auto pre = stem_.forward(x, mode);
    auto y = ops::relu(pre);
    if (mode == Mode::Train) stem_pre_ = std::move(pre);
    return y;
  }

  /// Everything before temporal pooling.
  Tensor<Scalar> features(const Tensor<Scalar>& x, Mode mode, LayerCapture<Scalar>* capture = nullptr) {
    auto h = stem(x, mode);
    if (capture) (*capture)["stem"] = h;
    int msaga_count = 0;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      auto& stage = stages_[s];
      const std::string sname = "stage" + std::to_string(s);
      if (stage.transition) {
        h = stage.transition->forward(h, mode);
        if (capture) (*capture)[sname + ".transition"] = h;
      }
      for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
        const bool is_msaga = std::holds_alternative<Msaga<Scalar>>(stage.blocks[b]);
        h = std::visit([&](auto& blk) { return blk.forward(h, mode); }, stage.blocks[b]);
        if (capture) {
          (*capture)[sname + ".block" + std::to_string(b)] = h;
          if (is_msaga) (*capture)["msaga." + std::to_string(++msaga_count)] = h;
        }
      }
    }
    return h;
  }

  BackboneOutput<Scalar> forward(const Tensor<Scalar>& x, Mode mode, LayerCapture<Scalar>* capture = nullptr) {
    auto h = features(x, mode, capture);
    std::vector<std::int32_t> tmp_arg, hpp_arg;
    auto pooled = temporal_max_pool(h, mode == Mode::Train ? &tmp_arg : nullptr);
    if (capture) (*capture)["temporal_pool"] = pooled;
    auto parts = hpp(pooled, config_.hpp_bins, mode == Mode::Train ? &hpp_arg : nullptr);
    auto emb = part_fc(parts, fc_.value);
    if (mode == Mode::Train) {
      feat_shape_ = h.shape();
      pooled_shape_ = pooled.shape();
      tmp_arg_ = std::move(tmp_arg);
      hpp_arg_ = std::move(hpp_arg);
      parts_ = std::move(parts);
    }
    return neck_.forward(emb, mode);
  }

  /// Backpropagates gradients w.r.t. the embedding (triplet path) and the
  /// logits; returns the gradient w.r.t. the network input.
  Tensor<Scalar> backward(const Tensor<Scalar>& d_embedding, const Tensor<Scalar>& d_logits) {
    auto demb = neck_.backward(d_embedding, d_logits);
    auto dparts = part_fc_backward(parts_, fc_.value, demb, fc_.grad);
    auto dpooled = hpp_backward(pooled_shape_, config_.hpp_bins, hpp_arg_, dparts);
    auto dh = temporal_max_pool_backward(feat_shape_, tmp_arg_, dpooled);
    for (auto s = stages_.rbegin(); s != stages_.rend(); ++s) {
      for (auto b = s->blocks.rbegin(); b != s->blocks.rend(); ++b)
        dh = std::visit([&](auto& blk) { return blk.backward(dh); }, *b);
      if (s->transition) dh = s->transition->backward(dh);
    }
    return stem_.backward(ops::relu_backward(stem_pre_, dh));
  }

  void visit(const ParamVisitor<Scalar>& f) {
    stem_.visit("stem", f);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string sname = "stage" + std::to_string(s);
      if (stages_[s].transition) stages_[s].transition->visit(sname + ".transition", f);
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b)
        std::visit([&](auto& blk) { blk.visit(sname + ".block" + std::to_string(b), f); }, stages_[s].blocks[b]);
    }
    f("part_fc.weight", fc_);
    neck_.visit("bnneck", f);
  }

  void visit_buffers(const BufferVisitor<Scalar>& f) {
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string sname = "stage" + std::to_string(s);
      if (stages_[s].transition) stages_[s].transition->visit_buffers(sname + ".transition", f);
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b)
        std::visit([&](auto& blk) { blk.visit_buffers(sname + ".block" + std::to_string(b), f); },
                   stages_[s].blocks[b]);
    }
    neck_.visit_buffers("bnneck", f);
  }

  void zero_grad() {
    visit([](const std::string&, Parameter<Scalar>& p) { p.zero_grad(); });
  }

  Index parameter_count() {
    Index n = 0;
    visit([&](const std::string&, Parameter<Scalar>& p) { n += p.value.size(); });
    return n;
  }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> names{"stem"};
    int msaga_count = 0;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string sname = "stage" + std::to_string(s);
      if (stages_[s].transition) names.push_back(sname + ".transition");
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
        names.push_back(sname + ".block" + std::to_string(b));
        if (std::holds_alternative<Msaga<Scalar>>(stages_[s].blocks[b]))
          names.push_back("msaga." + std::to_string(++msaga_count));
      }
    }
    names.push_back("temporal_pool");
    return names;
  }

  Conv3d<Scalar>& stem_conv() { return stem_; }
  std::vector<Stage>& stages() { return stages_; }
  Parameter<Scalar>& fc() { return fc_; }
  BnNeck<Scalar>& neck() { return neck_; }

 private:
  BackboneConfig config_;
  Conv3d<Scalar> stem_;
  std::vector<Stage> stages_;
  Parameter<Scalar> fc_;
  BnNeck<Scalar> neck_;

  Tensor<Scalar> stem_pre_, parts_;
  Shape feat_shape_, pooled_shape_;
  std::vector<std::int32_t> tmp_arg_, hpp_arg_;
};

}  // namespace cvvnet
