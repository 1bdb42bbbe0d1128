#include <doctest.h>

#include <random>

#include "cvvnet/msaga.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace cvvnet;

namespace {

TensorD frame(const TensorD& clip, Index b, Index t) {
  const Index c = clip.dim(1), h = clip.dim(3), w = clip.dim(4);
  TensorD f({1, c, h, w});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) f(0, ch, i, j) = clip(b, ch, t, i, j);
  return f;
}

void randomize_biases(Msaga<double>& m, std::mt19937_64& rng) {
  m.visit("", [&](const std::string& name, Parameter<double>& p) {
    if (name.ends_with("bias")) p.value = TensorD::uniform(p.value.shape(), -0.3, 0.3, rng);
  });
}

}  // namespace

TEST_CASE("HLFE over time: T=1 equals the single-frame HLFE") {
  std::mt19937_64 rng(1);
  auto p = HlfeParams<double>::init(4, 2, 2, rng);
  auto x = TensorD::uniform({2, 4, 1, 4, 6}, -1, 1, rng);
  auto y = apply_hlfe_over_time(x, p);
  auto ref = hlfe_forward(x.reshaped({2, 4, 4, 6}), p);
  CHECK(y.reshaped({2, 4, 4, 6}).max_abs_diff(ref) == 0);
}

TEST_CASE("HLFE over time: repeated frames give repeated outputs, permutations commute") {
  std::mt19937_64 rng(2);
  auto p = HlfeParams<double>::init(4, 2, 2, rng);
  auto single = TensorD::uniform({1, 4, 1, 4, 4}, -1, 1, rng);
  TensorD clip({1, 4, 3, 4, 4});
  for (Index c = 0; c < 4; ++c)
    for (Index t = 0; t < 3; ++t)
      for (Index i = 0; i < 16; ++i) clip[(c * 3 + t) * 16 + i] = single[c * 16 + i];
  auto y = apply_hlfe_over_time(clip, p);
  for (Index c = 0; c < 4; ++c)
    for (Index i = 0; i < 16; ++i) {
      CHECK(y[(c * 3 + 1) * 16 + i] == y[(c * 3 + 0) * 16 + i]);
      CHECK(y[(c * 3 + 2) * 16 + i] == y[(c * 3 + 0) * 16 + i]);
    }

  auto x = TensorD::uniform({2, 4, 3, 4, 4}, -1, 1, rng);
  const Index perm[3] = {2, 0, 1};
  TensorD xp(x.shape());
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 4; ++c)
      for (Index t = 0; t < 3; ++t)
        for (Index i = 0; i < 16; ++i) xp[((b * 4 + c) * 3 + t) * 16 + i] = x[((b * 4 + c) * 3 + perm[t]) * 16 + i];
  auto yx = apply_hlfe_over_time(x, p), yp = apply_hlfe_over_time(xp, p);
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 4; ++c)
      for (Index t = 0; t < 3; ++t)
        for (Index i = 0; i < 16; ++i)
          CHECK(yp[((b * 4 + c) * 3 + t) * 16 + i] == yx[((b * 4 + c) * 3 + perm[t]) * 16 + i]);
}

TEST_CASE("DGA: a closed gate gives an exactly zero output") {
  std::mt19937_64 rng(3);
  Msaga<double> m(4, Extractor::HLFE, Aggregator::DGA, 2, 2, rng);
  m.gate()->weight().value.set_zero();
  m.gate()->bias().value = TensorD::constant({4}, -1.0);
  auto x = TensorD::uniform({2, 4, 3, 4, 4}, -2, 2, rng);
  auto y = m.forward(x, Mode::Eval);
  CHECK(y.flat().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("Add aggregator with a zero extractor is the identity") {
  std::mt19937_64 rng(4);
  Msaga<double> m(4, Extractor::HLFE, Aggregator::Add, 2, 2, rng);
  m.override_extractor([](const TensorD& x) { return TensorD(x.shape()); });
  auto x = TensorD::uniform({1, 4, 2, 4, 4}, -1, 1, rng);
  CHECK(m.forward(x, Mode::Eval) == x);
}

TEST_CASE("DGA matches a literal loop over the gating equations") {
  std::mt19937_64 rng(5);
  Msaga<double> m(4, Extractor::HLFE, Aggregator::DGA, 2, 2, rng);
  randomize_biases(m, rng);
  auto x = TensorD::uniform({1, 4, 2, 4, 4}, -1, 1, rng);
  auto y = m.forward(x, Mode::Eval);

  const auto& hp = m.hlfe()->params();
  const auto& Wg = m.gate()->weight().value;
  const auto& bg = m.gate()->bias().value;
  const auto& Wv = m.value()->weight().value;
  const auto& bv = m.value()->bias().value;
  const auto& Wp = m.proj()->weight().value;
  const auto& bp = m.proj()->bias().value;
  double worst = 0;
  for (Index t = 0; t < 2; ++t) {
    const auto f = frame(x, 0, t);
    const auto vhl = oracle::hlfe(f, hp);
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 4; ++j) {
        double gated[4];
        for (Index o = 0; o < 4; ++o) {
          double g = bg[o], v = bv[o];
          for (Index c = 0; c < 4; ++c) {
            g += Wg(o, c) * f(0, c, i, j);
            v += Wv(o, c) * vhl(0, c, i, j);
          }
          gated[o] = std::max(g, 0.0) * std::max(v, 0.0);
        }
        for (Index o = 0; o < 4; ++o) {
          double out = bp[o];
          for (Index c = 0; c < 4; ++c) out += Wp(o, c) * gated[c];
          worst = std::max(worst, std::abs(out - y(0, o, t, i, j)));
        }
      }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("DGA: the gated product is supported only where both gates are open") {
  std::mt19937_64 rng(6);
  Msaga<double> m(4, Extractor::HLFE, Aggregator::DGA, 2, 2, rng);
  m.proj()->weight().value = TensorD({4, 4});
  for (Index i = 0; i < 4; ++i) m.proj()->weight().value(i, i) = 1.0;
  auto x = TensorD::uniform({1, 4, 2, 4, 4}, -1, 1, rng);
  auto prod = m.forward(x, Mode::Eval);
  auto g = oracle::pointwise(x, m.gate()->weight().value, m.gate()->bias().value);
  auto v = oracle::pointwise(apply_hlfe_over_time(x, m.hlfe()->params()), m.value()->weight().value,
                             m.value()->bias().value);
  Index nonzero = 0;
  for (Index i = 0; i < prod.size(); ++i)
    if (prod[i] != 0.0) {
      ++nonzero;
      CHECK(g[i] > 0);
      CHECK(v[i] > 0);
    }
  CHECK(nonzero > 0);
}

TEST_CASE("DGA gating path is pointwise in space and time") {
  std::mt19937_64 rng(7);
  Msaga<double> m(4, Extractor::HLFE, Aggregator::DGA, 2, 2, rng);
  m.override_extractor([](const TensorD& x) { return x; });
  auto x = TensorD::uniform({1, 4, 3, 4, 4}, -1, 1, rng);
  auto y0 = m.forward(x, Mode::Eval);
  auto x1 = x;
  const Index t = 1, i = 2, j = 3;
  for (Index c = 0; c < 4; ++c) x1(0, c, t, i, j) += 0.7;
  auto y1 = m.forward(x1, Mode::Eval);
  for (Index c = 0; c < 4; ++c)
    for (Index tt = 0; tt < 3; ++tt)
      for (Index ii = 0; ii < 4; ++ii)
        for (Index jj = 0; jj < 4; ++jj)
          if (tt != t || ii != i || jj != j) CHECK(y0(0, c, tt, ii, jj) == y1(0, c, tt, ii, jj));
}

TEST_CASE("all six extractor x aggregator cells preserve shape") {
  std::mt19937_64 rng(8);
  auto x = TensorD::uniform({2, 8, 3, 4, 6}, -1, 1, rng);
  for (auto e : {Extractor::P3D, Extractor::HLFE})
    for (auto a : {Aggregator::Add, Aggregator::Concat, Aggregator::DGA}) {
      Msaga<double> m(8, e, a, 8, 2, rng);
      CAPTURE(to_string(e));
      CAPTURE(to_string(a));
      auto y = m.forward(x, Mode::Train);
      CHECK(y.shape() == x.shape());
      CHECK(y.all_finite());
      CHECK(m.forward(x, Mode::Eval).shape() == x.shape());
    }
  Msaga<double> m(8, Extractor::HLFE, Aggregator::DGA, 8, 2, rng);
  CHECK_THROWS_AS(m.forward(TensorD({1, 4, 2, 4, 4}), Mode::Eval), ShapeMismatch);
}

TEST_CASE("MSAGA gradients match central differences") {
  for (auto e : {Extractor::HLFE, Extractor::P3D})
    for (auto a : {Aggregator::DGA, Aggregator::Add, Aggregator::Concat}) {
      std::mt19937_64 rng(9);
      Msaga<double> m(4, e, a, 2, 2, rng);
      randomize_biases(m, rng);
      CAPTURE(to_string(e));
      CAPTURE(to_string(a));
      auto r = testing::check_layer(m, TensorD::uniform({1, 4, 2, 4, 4}, -1, 1, rng), 10);
      CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
    }
}
