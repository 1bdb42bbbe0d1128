#include "cvvnet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>

#include <unsupported/Eigen/FFT>

namespace cvvnet {

ChannelReduce parse_channel_reduce(const std::string& s) {
  if (s == "mean") return ChannelReduce::Mean;
  if (s == "max") return ChannelReduce::Max;
  throw ConfigError("unknown channel reduction '" + s + "' (expected mean|max)");
}

namespace {

struct Geometry {
  Index c = 0, t = 1, h = 0, w = 0;
};

Geometry single_sample(const TensorF& fmap) {
  const auto& s = fmap.shape();
  if (s.size() == 3) return {s[0], 1, s[1], s[2]};
  if ((s.size() == 4 || s.size() == 5) && s[0] != 1)
    throw ShapeMismatch("expected a single-sample feature map, got " + shape_str(s));
  if (s.size() == 4) return {s[1], 1, s[2], s[3]};
  if (s.size() == 5) return {s[1], s[2], s[3], s[4]};
  throw ShapeMismatch("feature map must have rank 3, 4 or 5, got " + shape_str(s));
}

// Value of channel ch, frame f at pixel i in a (C, T, H*W) layout.
inline double at(const TensorF& x, const Geometry& g, Index ch, Index f, Index i) {
  return static_cast<double>(x[(ch * g.t + f) * g.h * g.w + i]);
}

}  // namespace

Eigen::MatrixXd reduce_feature_map(const TensorF& fmap, ChannelReduce reduce) {
  const Geometry g = single_sample(fmap);
  if (g.c < 1 || g.t < 1 || g.h < 1 || g.w < 1) throw EmptyInput("feature map is empty");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(g.h, g.w);
  for (Index f = 0; f < g.t; ++f)
    for (Index i = 0; i < g.h * g.w; ++i) {
      double v = at(fmap, g, 0, f, i);
      for (Index ch = 1; ch < g.c; ++ch)
        v = reduce == ChannelReduce::Max ? std::max(v, at(fmap, g, ch, f, i)) : v + at(fmap, g, ch, f, i);
      if (reduce == ChannelReduce::Mean) v /= static_cast<double>(g.c);
      out(i / g.w, i % g.w) += v / static_cast<double>(g.t);
    }
  return out;
}

Eigen::MatrixXcd centered_dft(const Eigen::MatrixXd& plane) {
  const Index h = plane.rows(), w = plane.cols();
  Eigen::FFT<double> fft;
  Eigen::MatrixXcd rows(h, w);
  Eigen::VectorXcd in, out;
  for (Index r = 0; r < h; ++r) {
    in = plane.row(r).transpose().cast<std::complex<double>>();
    fft.fwd(out, in);
    rows.row(r) = out.transpose();
  }
  Eigen::MatrixXcd full(h, w);
  for (Index c = 0; c < w; ++c) {
    in = rows.col(c);
    fft.fwd(out, in);
    full.col(c) = out;
  }
  // fftshift: frequency index k lands at (k + n/2) mod n.
  Eigen::MatrixXcd shifted(h, w);
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) shifted((r + h / 2) % h, (c + w / 2) % w) = full(r, c);
  return shifted;
}

Eigen::VectorXd radial_mean(const Eigen::MatrixXd& centered) {
  const Index h = centered.rows(), w = centered.cols();
  const double cr = static_cast<double>(h / 2), cc = static_cast<double>(w / 2);
  const auto radius = [&](Index r, Index c) {
    return static_cast<Index>(std::lround(std::hypot(static_cast<double>(r) - cr, static_cast<double>(c) - cc)));
  };
  const Index bands = radius(0, 0) + 1;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(bands), count = Eigen::VectorXd::Zero(bands);
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) {
      const Index k = radius(r, c);
      sum(k) += centered(r, c);
      count(k) += 1;
    }
  // Every band up to the corner is populated for a centred origin.
  return sum.cwiseQuotient(count.cwiseMax(1.0));
}

SpectrumProfile plane_spectrum(const Eigen::MatrixXd& plane) {
  const Eigen::MatrixXcd f = centered_dft(plane);
  SpectrumProfile s;
  s.power = f.cwiseAbs2();
  s.magnitude = f.cwiseAbs().array().log1p().matrix();
  s.radial_profile = radial_mean(s.magnitude);
  return s;
}

SpectrumProfile feature_spectrum(const TensorF& fmap, ChannelReduce reduce) {
  return plane_spectrum(reduce_feature_map(fmap, reduce));
}

Eigen::MatrixXd activation_map(const TensorF& fmap) {
  const Geometry g = single_sample(fmap);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(g.h, g.w);
  const double scale = 1.0 / static_cast<double>(g.c * g.t);
  for (Index ch = 0; ch < g.c; ++ch)
    for (Index f = 0; f < g.t; ++f)
      for (Index i = 0; i < g.h * g.w; ++i) out(i / g.w, i % g.w) += std::abs(at(fmap, g, ch, f, i)) * scale;
  return out;
}

Eigen::MatrixXd bilinear_resize(const Eigen::MatrixXd& m, Index rows, Index cols) {
  if (m.size() == 0) throw EmptyInput("bilinear_resize of an empty map");
  const Index h = m.rows(), w = m.cols();
  Eigen::MatrixXd out(rows, cols);
  const auto source = [](Index i, Index out_n, Index in_n, Index& lo, Index& hi, double& frac) {
    const double s = std::clamp((static_cast<double>(i) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5,
                                0.0, static_cast<double>(in_n - 1));
    lo = static_cast<Index>(std::floor(s));
    hi = std::min(lo + 1, in_n - 1);
    frac = s - static_cast<double>(lo);
  };
  for (Index r = 0; r < rows; ++r) {
    Index r0, r1;
    double fr;
    source(r, rows, h, r0, r1, fr);
    for (Index c = 0; c < cols; ++c) {
      Index c0, c1;
      double fc;
      source(c, cols, w, c0, c1, fc);
      out(r, c) = (1 - fr) * ((1 - fc) * m(r0, c0) + fc * m(r0, c1)) + fr * ((1 - fc) * m(r1, c0) + fc * m(r1, c1));
    }
  }
  return out;
}

Eigen::MatrixXd minmax_normalize(const Eigen::MatrixXd& m) {
  const double lo = m.minCoeff(), hi = m.maxCoeff();
  if (!(hi > lo)) return Eigen::MatrixXd::Zero(m.rows(), m.cols());
  return ((m.array() - lo) / (hi - lo)).matrix();
}

namespace {

// Piecewise-linear "jet": blue -> cyan -> yellow -> red.
std::array<double, 3> jet(double v) {
  const auto ramp = [&](double centre) { return std::clamp(1.5 - std::abs(4.0 * v - centre), 0.0, 1.0); };
  return {ramp(3.0), ramp(2.0), ramp(1.0)};
}

}  // namespace

HeatmapOverlay heatmap_from_feature(const TensorF& fmap, const SilhouetteFrame& base, double alpha) {
  if (base.height() != kFrameHeight || base.width() != kFrameWidth)
    throw ShapeMismatch("heatmap base frame must be 64x44");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  HeatmapOverlay o;
  o.activation = minmax_normalize(bilinear_resize(activation_map(fmap), kFrameHeight, kFrameWidth));
  o.base = base;
  o.blend.height = kFrameHeight;
  o.blend.width = kFrameWidth;
  o.blend.pixels.resize(static_cast<std::size_t>(kFrameHeight * kFrameWidth * 3));
  for (Index r = 0; r < kFrameHeight; ++r)
    for (Index c = 0; c < kFrameWidth; ++c) {
      const auto rgb = jet(o.activation(r, c));
      const double g = base.mask(r, c) ? 255.0 : 0.0;
      for (int k = 0; k < 3; ++k)
        o.blend.pixels[static_cast<std::size_t>((r * kFrameWidth + c) * 3 + k)] =
            static_cast<std::uint8_t>(std::lround(alpha * 255.0 * rgb[static_cast<std::size_t>(k)] + (1 - alpha) * g));
    }
  return o;
}

HeatmapOverlay activation_heatmap(CvvNet<float>& model, const SilhouetteClip& clip, const std::string& layer,
                                  double alpha) {
  const auto names = model.layer_names();
  if (std::find(names.begin(), names.end(), layer) == names.end()) {
    std::string known;
    for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
    throw UnknownLayer("layer '" + layer + "' is not captured; known layers: " + known);
  }
  if (clip.frames.empty()) throw EmptyInput("heatmap clip has no frames");
  LayerCapture<float> capture;
  model.forward(clips_to_tensor({&clip}), Mode::Eval, &capture);
  return heatmap_from_feature(capture.at(layer), clip.frames[static_cast<std::size_t>(clip.length() / 2)], alpha);
}

Gray8 spectrum_image(const SpectrumProfile& s) {
  const Eigen::MatrixXd n = minmax_normalize(s.magnitude);
  Gray8 img(n.rows(), n.cols());
  for (Index i = 0; i < n.size(); ++i) img.data()[i] = static_cast<std::uint8_t>(std::lround(255.0 * n(i / n.cols(), i % n.cols())));
  return img;
}

std::string radial_csv(const SpectrumProfile& s) {
  std::string out = "radius,magnitude\n";
  char line[64];
  for (Index r = 0; r < s.radial_profile.size(); ++r) {
    std::snprintf(line, sizeof line, "%ld,%.17g\n", static_cast<long>(r), s.radial_profile(r));
    out += line;
  }
  return out;
}

}  // namespace cvvnet
