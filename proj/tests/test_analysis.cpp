#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "cvvnet/analysis.hpp"
#include "cvvnet/dataset.hpp"

using namespace cvvnet;

namespace {

Eigen::MatrixXd random_plane(std::mt19937_64& rng, Index h, Index w) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd m(h, w);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Naive O(N^2) DFT of one bin, centered indexing.
std::complex<double> dft_bin(const Eigen::MatrixXd& x, Index u, Index v) {
  std::complex<double> s = 0;
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < x.cols(); ++c) {
      const double phase = -2 * std::numbers::pi *
                           (static_cast<double>(u * r) / static_cast<double>(x.rows()) +
                            static_cast<double>(v * c) / static_cast<double>(x.cols()));
      s += x(r, c) * std::polar(1.0, phase);
    }
  return s;
}

SilhouetteClip walker_clip(Index frames) {
  SynthConfig sc;
  sc.identities = 1;
  sc.sequences_per_cell = 1;
  sc.n_frames = frames;
  sc.seed = 2;
  return render_entry(make_manifest(sc).front(), 0).clip;
}

BackboneConfig small_model() {
  BackboneConfig c;
  c.stage_channels = {4, 8};
  c.n_heads = 2;
  return c;
}

}  // namespace

TEST_CASE("centered DFT agrees with a direct summation") {
  std::mt19937_64 rng(1);
  for (auto [h, w] : {std::pair<Index, Index>{8, 6}, {7, 5}, {16, 11}}) {
    const auto x = random_plane(rng, h, w);
    const auto f = centered_dft(x);
    for (Index r = 0; r < h; ++r)
      for (Index c = 0; c < w; ++c) {
        const Index u = (r - h / 2 + h) % h, v = (c - w / 2 + w) % w;
        CHECK(std::abs(f(r, c) - dft_bin(x, u, v)) < 1e-9);
      }
  }
}

TEST_CASE("spectrum satisfies Parseval and point symmetry") {
  std::mt19937_64 rng(2);
  for (auto [h, w] : {std::pair<Index, Index>{16, 11}, {32, 22}, {8, 8}, {9, 7}}) {
    const auto x = random_plane(rng, h, w);
    const auto s = plane_spectrum(x);
    const double spatial = x.squaredNorm(), spectral = s.power.sum() / static_cast<double>(h * w);
    CHECK(std::abs(spatial - spectral) <= 1e-6 * std::max(1.0, spatial));
    // 180 degree rotation about the zero frequency: (r, c) <-> (2*ch - r, 2*cw - c).
    double worst = 0;
    for (Index r = 0; r < h; ++r)
      for (Index c = 0; c < w; ++c) {
        const Index rr = ((2 * (h / 2) - r) % h + h) % h, cc = ((2 * (w / 2) - c) % w + w) % w;
        worst = std::max(worst, std::abs(s.magnitude(r, c) - s.magnitude(rr, cc)));
      }
    CHECK(worst < 1e-9);
    CHECK(s.radial_profile.minCoeff() >= 0.0);
  }
}

TEST_CASE("a constant plane puts all energy at DC") {
  const auto s = plane_spectrum(Eigen::MatrixXd::Constant(16, 11, 2.5));
  CHECK(s.power(8, 5) == doctest::Approx(std::pow(2.5 * 176, 2)));
  CHECK(s.power.sum() - s.power(8, 5) < 1e-12 * s.power(8, 5));
  CHECK(s.radial_profile(0) == doctest::Approx(std::log1p(2.5 * 176)));
  CHECK(s.radial_profile.tail(s.radial_profile.size() - 1).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("a horizontal sinusoid gives two symmetric peaks on the horizontal axis") {
  const Index h = 16, w = 20, k = 3;
  Eigen::MatrixXd x(h, w);
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) x(r, c) = std::cos(2 * std::numbers::pi * static_cast<double>(k * c) / w);
  const auto s = plane_spectrum(x);
  Index r0, c0;
  s.power.maxCoeff(&r0, &c0);
  CHECK(r0 == h / 2);
  CHECK((c0 == w / 2 + k || c0 == w / 2 - k));
  CHECK(s.power(h / 2, w / 2 + k) == doctest::Approx(s.power(h / 2, w / 2 - k)));
  CHECK(s.power(h / 2, w / 2 + k) == doctest::Approx(std::pow(h * w / 2.0, 2)));
  CHECK(s.power.sum() == doctest::Approx(2 * std::pow(h * w / 2.0, 2)));
}

TEST_CASE("white noise has an approximately flat radial profile") {
  std::mt19937_64 rng(3);
  const Index h = 32, w = 32, trials = 100;
  Eigen::VectorXd mean;
  for (Index t = 0; t < trials; ++t) {
    const auto p = plane_spectrum(random_plane(rng, h, w)).radial_profile;
    mean = t ? Eigen::VectorXd(mean + p) : p;
  }
  mean /= static_cast<double>(trials);
  // Bands 1..15 lie fully inside the grid; E log(1 + |F|) with |F| Rayleigh
  // of scale sqrt(h*w/2) is the same in every band.
  const Eigen::VectorXd inner = mean.segment(1, 15);
  const double avg = inner.mean();
  CHECK((inner.array() - avg).abs().maxCoeff() < 0.03 * avg);
}

TEST_CASE("channel reductions") {
  TensorF f({1, 2, 3, 2, 2});
  for (Index i = 0; i < f.size(); ++i) f[i] = static_cast<float>(i % 7) - 2.0f;
  const auto mean = reduce_feature_map(f, ChannelReduce::Mean), mx = reduce_feature_map(f, ChannelReduce::Max);
  for (Index r = 0; r < 2; ++r)
    for (Index c = 0; c < 2; ++c) {
      double m = 0, x = 0;
      for (Index t = 0; t < 3; ++t) {
        const double a = f(0, 0, t, r, c), b = f(0, 1, t, r, c);
        m += (a + b) / 2 / 3;
        x += std::max(a, b) / 3;
      }
      CHECK(mean(r, c) == doctest::Approx(m));
      CHECK(mx(r, c) == doctest::Approx(x));
    }
  CHECK_THROWS_AS(reduce_feature_map(TensorF({2, 1, 4, 4}), ChannelReduce::Mean), ShapeMismatch);
  CHECK(parse_channel_reduce("max") == ChannelReduce::Max);
  CHECK_THROWS_AS(parse_channel_reduce("median"), ConfigError);
}

TEST_CASE("heatmap normalization and resampling") {
  const auto clip = walker_clip(4);
  const auto& base = clip.frames[2];

  const auto zero = heatmap_from_feature(TensorF({1, 3, 2, 8, 6}), base);
  CHECK(zero.activation.rows() == 64);
  CHECK(zero.activation.cols() == 44);
  CHECK(zero.activation.isZero(0.0));

  for (auto [h, w] : {std::pair<Index, Index>{8, 6}, {16, 11}, {64, 44}, {5, 3}}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(h));
    const auto f = TensorF::normal({1, 2, h, w}, 1.0, rng);
    const auto o = heatmap_from_feature(f, base);
    CHECK(o.activation.rows() == 64);
    CHECK(o.activation.cols() == 44);
    CHECK(o.activation.minCoeff() == 0.0);
    CHECK(o.activation.maxCoeff() == doctest::Approx(1.0));
    CHECK(o.blend.pixels.size() == 64u * 44u * 3u);
  }

  // Energy only in the bottom quarter of the feature lands on the legs.
  TensorF legs({1, 4, 16, 11});
  for (Index ch = 0; ch < 4; ++ch)
    for (Index r = 12; r < 16; ++r)
      for (Index c = 0; c < 11; ++c) legs(0, ch, r, c) = -1.5f;
  const auto o = heatmap_from_feature(legs, base);
  const double bottom = o.activation.bottomRows(16).sum(), total = o.activation.sum();
  CHECK(bottom / total > 0.9);
  CHECK(o.activation.topRows(44).isZero(0.0));

  // Resampling an identical-size map is the identity; a constant stays constant.
  std::mt19937_64 rng(9);
  const auto m = random_plane(rng, 6, 5);
  CHECK((bilinear_resize(m, 6, 5) - m).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((bilinear_resize(Eigen::MatrixXd::Constant(3, 2, 0.4), 64, 44).array() - 0.4).abs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(heatmap_from_feature(legs, base, 1.5), ConfigError);
}

TEST_CASE("model heatmaps are deterministic and reject unknown layers") {
  const auto clip = walker_clip(6);
  CvvNet<float> a(small_model()), b(small_model());
  for (const auto& layer : a.layer_names()) {
    const auto x = activation_heatmap(a, clip, layer), y = activation_heatmap(b, clip, layer);
    CHECK(x.activation == y.activation);
    CHECK(x.blend.pixels == y.blend.pixels);
    CHECK(x.base == clip.frames[3]);
    CHECK(x.activation.maxCoeff() <= 1.0);
    CHECK(x.activation.minCoeff() >= 0.0);
  }
  CHECK_THROWS_AS(activation_heatmap(a, clip, "stage9.block0"), UnknownLayer);

  LayerCapture<float> cap;
  a.forward(clips_to_tensor({&clip}), Mode::Eval, &cap);
  const auto s = feature_spectrum(cap.at("msaga.1"));
  CHECK(s.magnitude.rows() == cap.at("msaga.1").dim(3));
  const auto csv = radial_csv(s);
  CHECK(csv.rfind("radius,magnitude\n0,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == s.radial_profile.size() + 1);
  const auto img = spectrum_image(s);
  CHECK(img.rows() == s.magnitude.rows());
  CHECK(img.maxCoeff() == 255);
}
