#include <doctest.h>

#include <numeric>
#include <random>

#include "cvvnet/hlfe.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace cvvnet;

namespace {

HlfeParams<double> random_params(Index c, Index heads, std::uint64_t seed, bool random_biases = true) {
  std::mt19937_64 rng(seed);
  auto p = HlfeParams<double>::init(c, heads, 2, rng);
  if (random_biases)
    p.visit("", [&](const std::string& name, Parameter<double>& q) {
      if (name.ends_with("bias")) q.value = TensorD::uniform(q.value.shape(), -0.3, 0.3, rng);
    });
  return p;
}

TensorD identity(Index rows, Index cols) {
  TensorD w({rows, cols});
  for (Index i = 0; i < std::min(rows, cols); ++i) w(i, i) = 1.0;
  return w;
}

TensorD delta_kernel(Index c, Index k) {
  TensorD w({c, k, k});
  for (Index ch = 0; ch < c; ++ch) w(ch, k / 2, k / 2) = 1.0;
  return w;
}

void zero_biases(HlfeParams<double>& p) {
  p.visit("", [](const std::string& name, Parameter<double>& q) {
    if (name.ends_with("bias")) q.value.set_zero();
  });
}

}  // namespace

TEST_CASE("pool path: constant field gives GELU of the constant") {
  auto p = random_params(4, 2, 1);
  zero_biases(p);
  p.proj_pool_w.value = identity(4, 4);
  auto y = high_freq_pool_path(TensorD::constant({1, 4, 5, 6}, 0.7), p);
  for (Index i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(oracle::gelu(0.7)).epsilon(1e-14));
}

TEST_CASE("pool path: an impulse dilates to its 3x3 neighbourhood") {
  auto p = random_params(1, 1, 2);
  zero_biases(p);
  p.proj_pool_w.value = identity(1, 1);
  TensorD x({1, 1, 5, 5});
  x(0, 0, 2, 1) = 1.5;
  auto y = high_freq_pool_path(x, p);
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 5; ++j) {
      const bool inside = std::abs(i - 2) <= 1 && std::abs(j - 1) <= 1;
      CHECK(y(0, 0, i, j) == doctest::Approx(inside ? oracle::gelu(1.5) : 0.0));
    }
}

TEST_CASE("pool path: distinct values match windowed maxima") {
  auto p = random_params(1, 1, 3);
  zero_biases(p);
  p.proj_pool_w.value = identity(1, 1);
  TensorD x({1, 1, 4, 4});
  // a fixed permutation of -7.5 .. 7.5 so that some windows are all-negative
  const double vals[16] = {3.5, -6.5, 0.5, -0.5, 7.5, -7.5, 1.5, -3.5, -2.5, 4.5, -5.5, 2.5, 6.5, -1.5, -4.5, 5.5};
  for (Index i = 0; i < 16; ++i) x[i] = vals[i];
  auto y = high_freq_pool_path(x, p);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) {
      double m = -1e9;
      for (Index a = i - 1; a <= i + 1; ++a)
        for (Index b = j - 1; b <= j + 1; ++b)
          m = std::max(m, (a < 0 || a > 3 || b < 0 || b > 3) ? 0.0 : x(0, 0, a, b));
      CHECK(y(0, 0, i, j) == doctest::Approx(oracle::gelu(m)).epsilon(1e-14));
    }
}

TEST_CASE("conv path: identity kernels and projections give GELU(x)") {
  auto p = random_params(3, 1, 4);
  zero_biases(p);
  p.proj_in_w.value = identity(3, 3);
  p.dw3_w.value = delta_kernel(3, 3);
  p.dw5_w.value = delta_kernel(3, 5);
  p.dw7_w.value = delta_kernel(3, 7);
  p.fuse_ms_w.value = identity(3, 9);
  std::mt19937_64 rng(5);
  auto x = TensorD::uniform({2, 3, 4, 5}, -2, 2, rng);
  auto y = high_freq_conv_path(x, p);
  for (Index i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(oracle::gelu(x[i])).epsilon(1e-14));
}

TEST_CASE("conv path: constant field gives kernel-sum times constant in the interior of F3") {
  auto p = random_params(2, 1, 6);
  zero_biases(p);
  p.proj_in_w.value = identity(2, 2);
  detail::ConvPathCache<double> cache;
  detail::conv_path(TensorD::constant({1, 2, 7, 7}, 2.0), p, &cache);
  for (Index c = 0; c < 2; ++c) {
    double ksum = 0;
    for (Index i = 0; i < 9; ++i) ksum += p.dw3_w.value[c * 9 + i];
    for (Index i = 1; i < 6; ++i)
      for (Index j = 1; j < 6; ++j) CHECK(cache.f3(0, c, i, j) == doctest::Approx(2.0 * ksum).epsilon(1e-14));
  }
}

TEST_CASE("conv path: horizontal difference kernel responds only on a vertical edge") {
  auto p = random_params(1, 1, 7);
  zero_biases(p);
  p.proj_in_w.value = identity(1, 1);
  p.dw3_w.value = TensorD({1, 3, 3});
  p.dw3_w.value(0, 1, 0) = -1.0;
  p.dw3_w.value(0, 1, 1) = 1.0;
  TensorD x({1, 1, 4, 4});
  for (Index i = 0; i < 4; ++i)
    for (Index j = 2; j < 4; ++j) x(0, 0, i, j) = 1.0;
  detail::ConvPathCache<double> cache;
  detail::conv_path(x, p, &cache);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(cache.f3(0, 0, i, j) == (j == 2 ? 1.0 : 0.0));
}

TEST_CASE("conv path: depthwise stage leaves other channels untouched") {
  auto p = random_params(4, 1, 8);
  zero_biases(p);
  p.proj_in_w.value = identity(4, 4);
  std::mt19937_64 rng(9);
  auto x = TensorD::uniform({1, 4, 5, 5}, -1, 1, rng);
  detail::ConvPathCache<double> a, b;
  detail::conv_path(x, p, &a);
  for (Index i = 0; i < 25; ++i) x[1 * 25 + i] += 0.5;
  detail::conv_path(x, p, &b);
  for (Index c = 0; c < 4; ++c)
    for (Index i = 0; i < 25; ++i) {
      if (c == 1) continue;
      CHECK(a.f3[c * 25 + i] == b.f3[c * 25 + i]);
    }
}

TEST_CASE("attention: zero queries average the pooled values") {
  auto p = random_params(4, 2, 10);
  zero_biases(p);
  p.wq_w.value = TensorD({4, 4});
  p.wk_w.value = identity(4, 4);
  p.wv_w.value = identity(4, 4);
  p.wo_w.value = identity(4, 4);
  std::mt19937_64 rng(11);
  auto x = TensorD::uniform({1, 4, 4, 6}, -1, 1, rng);
  auto y = low_freq_attention(x, p);
  for (Index c = 0; c < 4; ++c) {
    double mean = 0;
    for (Index i = 0; i < 24; ++i) mean += x[c * 24 + i];
    mean /= 24.0;  // mean of 2x2 block means = global mean
    for (Index i = 0; i < 24; ++i) CHECK(y[c * 24 + i] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("attention: Nyquist checkerboard annihilates keys, values and output") {
  auto p = random_params(8, 2, 12);
  zero_biases(p);
  TensorD x({1, 8, 4, 4});
  for (Index c = 0; c < 8; ++c)
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 4; ++j) x(0, c, i, j) = ((i + j) % 2 == 0) ? 1.0 : -1.0;
  auto trace = trace_low_freq_attention(x, p);
  CHECK(trace.keys.flat().cwiseAbs().maxCoeff() == 0.0);
  CHECK(trace.values.flat().cwiseAbs().maxCoeff() == 0.0);
  CHECK(low_freq_attention(x, p).flat().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention: any input with zero 2x2 block means has zero K and V") {
  auto p = random_params(4, 2, 13);
  zero_biases(p);
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = TensorD::uniform({2, 4, 6, 4}, -3, 3, rng);
    for (Index pl = 0; pl < 8; ++pl)
      for (Index bi = 0; bi < 3; ++bi)
        for (Index bj = 0; bj < 2; ++bj) {
          double m = 0;
          for (Index a = 0; a < 2; ++a)
            for (Index b = 0; b < 2; ++b) m += x[pl * 24 + (2 * bi + a) * 4 + 2 * bj + b];
          m /= 4;
          for (Index a = 0; a < 2; ++a)
            for (Index b = 0; b < 2; ++b) x[pl * 24 + (2 * bi + a) * 4 + 2 * bj + b] -= m;
        }
    auto trace = trace_low_freq_attention(x, p);
    CHECK(trace.keys.flat().cwiseAbs().maxCoeff() < 1e-14);
    CHECK(trace.values.flat().cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("attention: rows of the attention matrix sum to one") {
  auto p = random_params(8, 4, 15);
  std::mt19937_64 rng(16);
  auto trace = trace_low_freq_attention(TensorD::uniform({2, 8, 6, 8}, -4, 4, rng), p);
  REQUIRE(trace.weights.size() == 8);
  for (const auto& a : trace.weights) {
    CHECK(a.rows() == 48);
    CHECK(a.cols() == 12);
    CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
    CHECK(a.minCoeff() >= 0.0);
  }
}

TEST_CASE("attention: output is invariant to the ordering of key/value tokens") {
  std::mt19937_64 rng(17);
  RowMatrix<double> q = RowMatrix<double>::Random(2, 12), k = RowMatrix<double>::Random(2, 5),
                    v = RowMatrix<double>::Random(2, 5);
  std::vector<Index> perm{3, 0, 4, 1, 2};
  RowMatrix<double> kp(2, 5), vp(2, 5);
  for (Index i = 0; i < 5; ++i) {
    kp.col(i) = k.col(perm[i]);
    vp.col(i) = v.col(perm[i]);
  }
  const RowMatrix<double> out = v * detail::attention_weights<double>(q, k, 0.7).transpose();
  const RowMatrix<double> outp = vp * detail::attention_weights<double>(q, kp, 0.7).transpose();
  CHECK((out - outp).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("attention: matches the literal token-loop implementation") {
  auto p = random_params(8, 2, 18);
  std::mt19937_64 rng(19);
  auto x = TensorD::uniform({1, 8, 4, 4}, -1, 1, rng);
  CHECK(low_freq_attention(x, p).max_abs_diff(oracle::attention(x, p)) < 1e-6);
  auto x2 = TensorD::uniform({2, 8, 4, 6}, -1, 1, rng);
  CHECK(low_freq_attention(x2, p).max_abs_diff(oracle::attention(x2, p)) < 1e-6);
}

TEST_CASE("attention: errors") {
  auto p = random_params(8, 2, 20);
  CHECK_THROWS_AS(low_freq_attention(TensorD({1, 8, 5, 4}), p), IndivisibleSpatial);
  CHECK_THROWS_AS(low_freq_attention(TensorD({1, 4, 4, 4}), p), ShapeMismatch);
  std::mt19937_64 rng(0);
  CHECK_THROWS_AS(HlfeParams<double>::init(6, 4, 2, rng), ShapeMismatch);
}

TEST_CASE("hlfe: zeroed output fusion is the exact identity") {
  auto p = random_params(8, 2, 21);
  p.fuse_out_w.value.set_zero();
  p.fuse_out_b.value.set_zero();
  std::mt19937_64 rng(22);
  auto x = TensorD::uniform({2, 8, 4, 6}, -1, 1, rng);
  CHECK(hlfe_forward(x, p) == x);
  auto xf = x.cast<float>();
  auto pf = HlfeParams<float>::init(8, 2, 2, rng);
  pf.fuse_out_w.value.set_zero();
  CHECK(hlfe_forward(xf, pf) == xf);
}

TEST_CASE("hlfe: shape is preserved") {
  auto p = random_params(16, 8, 23);
  std::mt19937_64 rng(24);
  auto y = hlfe_forward(TensorD::uniform({2, 16, 8, 8}, -1, 1, rng), p);
  CHECK(y.shape() == Shape{2, 16, 8, 8});
  CHECK(y.all_finite());
}

TEST_CASE("hlfe: full forward equals the composed oracle") {
  auto p = random_params(8, 2, 25);
  std::mt19937_64 rng(26);
  auto x = TensorD::uniform({1, 8, 4, 4}, -1, 1, rng);
  CHECK(hlfe_forward(x, p).max_abs_diff(oracle::hlfe(x, p)) < 1e-6);
  Hlfe<double> layer(p);
  CHECK(layer.forward(x, Mode::Train).max_abs_diff(oracle::hlfe(x, p)) < 1e-6);
}

TEST_CASE("hlfe: analytic gradients match central differences for every parameter") {
  Hlfe<double> layer(random_params(8, 2, 27));
  std::mt19937_64 rng(28);
  auto r = testing::check_layer(layer, TensorD::uniform({1, 8, 4, 4}, -1, 1, rng), 29);
  for (const auto& [name, err] : r.per_tensor) CHECK_MESSAGE(err < 1e-4, name);
  CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
  CHECK(r.per_tensor.size() == 23);  // 22 parameter tensors + input
}
