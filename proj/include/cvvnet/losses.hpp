#pragma once

// Batch-all triplet and part-wise cross-entropy losses with analytic
// gradients.

#include <cmath>
#include <vector>

#include "cvvnet/tensor.hpp"

namespace cvvnet {

struct LossWeights {
  double alpha = 1.0;  // triplet
  double beta = 1.0;   // cross-entropy
  double margin = 0.2;

  void validate() const {
    if (!(alpha >= 0 && beta >= 0 && margin >= 0)) throw ConfigError("loss weights and margin must be >= 0");
    if (!(alpha + beta > 0)) throw ConfigError("alpha + beta must be positive");
  }
};

struct TripletResult {
  double loss = 0.0;
  /// Fraction of (part, triplet) pairs with a positive hinge.
  double active_fraction = 0.0;
  /// No triplet had positive loss in any part; loss is then 0.
  bool no_valid_triplets = true;
};

/// Per part: Euclidean distances, hinge max(0, d(a,p) - d(a,n) + margin)
/// over every anchor/positive/negative triple, averaged over the triples
/// with positive hinge (0 if none). The result is the mean over parts.
/// At coincident points the distance gradient is taken as 0.
template <typename Scalar>
TripletResult triplet_loss(const Tensor<Scalar>& feats, const std::vector<int>& labels, double margin,
                           Tensor<Scalar>* grad = nullptr) {
  require_rank(feats.shape(), 3, "triplet features");
  const Index b = feats.dim(0), parts = feats.dim(1), d = feats.dim(2);
  if (static_cast<Index>(labels.size()) != b) throw ShapeMismatch("one label per sample required");
  if (grad) *grad = Tensor<Scalar>(feats.shape());
  TripletResult r;
  Index active_total = 0, triples_total = 0;
  Eigen::MatrixXd dist(b, b), coef(b, b);
  for (Index p = 0; p < parts; ++p) {
    for (Index i = 0; i < b; ++i)
      for (Index j = 0; j < b; ++j) {
        const auto xi = feats.flat().segment((i * parts + p) * d, d).template cast<double>();
        const auto xj = feats.flat().segment((j * parts + p) * d, d).template cast<double>();
        dist(i, j) = (xi - xj).norm();
      }
    coef.setZero();
    double sum = 0;
    Index active = 0;
    for (Index a = 0; a < b; ++a)
      for (Index pos = 0; pos < b; ++pos) {
        if (pos == a || labels[a] != labels[pos]) continue;
        for (Index n = 0; n < b; ++n) {
          if (labels[n] == labels[a]) continue;
          ++triples_total;
          const double h = dist(a, pos) - dist(a, n) + margin;
          if (h > 0) {
            sum += h;
            ++active;
            coef(a, pos) += 1.0;
            coef(a, n) -= 1.0;
          }
        }
      }
    active_total += active;
    if (active == 0) continue;
    r.no_valid_triplets = false;
    r.loss += sum / static_cast<double>(active) / static_cast<double>(parts);
    if (!grad) continue;
    const double scale = 1.0 / static_cast<double>(active) / static_cast<double>(parts);
    for (Index i = 0; i < b; ++i)
      for (Index j = 0; j < b; ++j) {
        if (coef(i, j) == 0 || dist(i, j) == 0) continue;
        const auto xi = feats.flat().segment((i * parts + p) * d, d).template cast<double>();
        const auto xj = feats.flat().segment((j * parts + p) * d, d).template cast<double>();
        const Eigen::VectorXd g = (scale * coef(i, j) / dist(i, j)) * (xi - xj);
        grad->flat().segment((i * parts + p) * d, d) += g.cast<Scalar>();
        grad->flat().segment((j * parts + p) * d, d) -= g.cast<Scalar>();
      }
  }
  r.active_fraction = triples_total ? static_cast<double>(active_total) / static_cast<double>(triples_total) : 0.0;
  return r;
}

/// Softmax cross-entropy per part, averaged over parts and batch.
template <typename Scalar>
double ce_loss(const Tensor<Scalar>& logits, const std::vector<int>& labels, Tensor<Scalar>* grad = nullptr) {
  require_rank(logits.shape(), 3, "logits");
  const Index b = logits.dim(0), parts = logits.dim(1), k = logits.dim(2);
  if (static_cast<Index>(labels.size()) != b) throw ShapeMismatch("one label per sample required");
  for (int l : labels)
    if (l < 0 || l >= k) throw LabelOutOfRange("label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
  if (grad) *grad = Tensor<Scalar>(logits.shape());
  const double norm = 1.0 / static_cast<double>(b * parts);
  double loss = 0;
  for (Index i = 0; i < b; ++i)
    for (Index p = 0; p < parts; ++p) {
      const Index off = (i * parts + p) * k;
      const Eigen::VectorXd z = logits.flat().segment(off, k).template cast<double>();
      const double m = z.maxCoeff();
      const Eigen::VectorXd e = (z.array() - m).exp();
      const double lse = m + std::log(e.sum());
      loss += lse - z(labels[i]);
      if (grad) {
        Eigen::VectorXd g = e / e.sum();
        g(labels[i]) -= 1.0;
        grad->flat().segment(off, k) = (norm * g).cast<Scalar>();
      }
    }
  return loss * norm;
}

struct LossReport {
  double total = 0, triplet = 0, ce = 0;
  double active_fraction = 0;
  bool no_valid_triplets = false;
};

/// alpha * triplet + beta * ce; gradients are scaled by the weights.
template <typename Scalar>
LossReport total_loss(const Tensor<Scalar>& feats, const Tensor<Scalar>& logits, const std::vector<int>& labels,
                      const LossWeights& w, Tensor<Scalar>* d_feats = nullptr, Tensor<Scalar>* d_logits = nullptr) {
  w.validate();
  LossReport r;
  const TripletResult t = triplet_loss(feats, labels, w.margin, d_feats);
  r.triplet = t.loss;
  r.active_fraction = t.active_fraction;
  r.no_valid_triplets = t.no_valid_triplets;
  r.ce = ce_loss(logits, labels, d_logits);
  r.total = w.alpha * r.triplet + w.beta * r.ce;
  if (d_feats) *d_feats *= static_cast<Scalar>(w.alpha);
  if (d_logits) *d_logits *= static_cast<Scalar>(w.beta);
  return r;
}

}  // namespace cvvnet
