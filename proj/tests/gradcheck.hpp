#pragma once

// Central finite-difference gradient checking for layers exposing
// forward(x, Mode) / backward(dy) / visit(prefix, ParamVisitor).

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>

#include "cvvnet/tensor.hpp"

namespace cvvnet::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[index]"
  std::map<std::string, double> per_tensor;
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from dominating through rounding noise of the difference
/// quotient.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

inline void record(GradCheckResult& r, const std::string& name, Index i, double analytic, double numeric,
                   double floor) {
  const double e = rel_error(analytic, numeric, floor);
  auto& slot = r.per_tensor[name];
  slot = std::max(slot, e);
  ++r.checked;
  if (e > r.max_rel_error) {
    r.max_rel_error = e;
    r.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic) +
              " numeric=" + std::to_string(numeric);
  }
}

/// Checks d/dθ sum(weights ⊙ f(x; θ)) for every parameter and for the input.
/// `forward` must run in Train mode; `backward` must accumulate into .grad.
template <typename Fwd, typename Bwd, typename Visit>
GradCheckResult check_gradients(Tensor<double> x, Fwd forward, Bwd backward, Visit visit, std::uint64_t seed,
                                double step = 1e-4, bool check_input = true, double floor = 1e-6) {
  std::mt19937_64 rng(seed);
  Tensor<double> y = forward(x);
  const Tensor<double> weights = Tensor<double>::uniform(y.shape(), -1.0, 1.0, rng);
  auto loss = [&](const Tensor<double>& in) { return forward(in).flat().dot(weights.flat()); };

  visit([](const std::string&, Parameter<double>& p) { p.zero_grad(); });
  forward(x);
  const Tensor<double> dx = backward(weights);

  GradCheckResult r;
  visit([&](const std::string& name, Parameter<double>& p) {
    for (Index i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + step;
      const double lp = loss(x);
      p.value[i] = saved - step;
      const double lm = loss(x);
      p.value[i] = saved;
      record(r, name, i, p.grad[i], (lp - lm) / (2 * step), floor);
    }
  });
  if (check_input) {
    for (Index i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + step;
      const double lp = loss(x);
      x[i] = saved - step;
      const double lm = loss(x);
      x[i] = saved;
      record(r, "input", i, dx[i], (lp - lm) / (2 * step), floor);
    }
  }
  return r;
}

template <typename Layer>
GradCheckResult check_layer(Layer& layer, const Tensor<double>& x, std::uint64_t seed, bool check_input = true) {
  return check_gradients(
      x, [&](const Tensor<double>& in) { return layer.forward(in, Mode::Train); },
      [&](const Tensor<double>& dy) { return layer.backward(dy); },
      [&](const ParamVisitor<double>& f) { layer.visit("", f); }, seed, 1e-4, check_input);
}

}  // namespace cvvnet::testing
