#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cvvnet/errors.hpp"

namespace cvvnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using VectorMap = Eigen::Map<Vector<Scalar>>;
template <typename Scalar>
using ConstVectorMap = Eigen::Map<const Vector<Scalar>>;

/// Dense row-major tensor of arbitrary rank. Layouts used throughout:
/// (B, C, H, W) for feature maps and (B, C, T, H, W) for clip features.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Storage = Vector<Scalar>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_)) { data_.setZero(); }
  Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(shape_size(shape_)) { data_.setConstant(fill); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  /// Allocates without initializing; every element must be written before it is read.
  static Tensor empty(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.resize(shape_size(t.shape_));
    return t;
  }
  static Tensor constant(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }
  template <typename Rng>
  static Tensor uniform(Shape shape, Scalar lo, Scalar hi, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = static_cast<Scalar>(dist(rng));
    return t;
  }
  template <typename Rng>
  static Tensor normal(Shape shape, Scalar stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = static_cast<Scalar>(dist(rng));
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  auto flat() { return Eigen::Map<Storage>(data_.data(), data_.size()); }
  auto flat() const { return Eigen::Map<const Storage>(data_.data(), data_.size()); }

  /// Element count of everything after the leading `axis` dimensions.
  Index stride(Index axis) const {
    Index s = 1;
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape_.size(); ++i) s *= shape_[i];
    return s;
  }

  /// View of one batch item as a (rows x cols) row-major matrix.
  MatrixMap<Scalar> matrix(Index offset, Index rows, Index cols) {
    return MatrixMap<Scalar>(data_.data() + offset, rows, cols);
  }
  ConstMatrixMap<Scalar> matrix(Index offset, Index rows, Index cols) const {
    return ConstMatrixMap<Scalar>(data_.data() + offset, rows, cols);
  }
  /// (dim(1) x rest) view of batch item b; the channel-major matrix of a feature map.
  MatrixMap<Scalar> channel_matrix(Index b) { return matrix(b * stride(0), dim(1), stride(1)); }
  ConstMatrixMap<Scalar> channel_matrix(Index b) const { return matrix(b * stride(0), dim(1), stride(1)); }

  template <typename... I>
  Scalar& operator()(I... idx) { return data_[offset_of(idx...)]; }
  template <typename... I>
  const Scalar& operator()(I... idx) const { return data_[offset_of(idx...)]; }
  Scalar& operator[](Index i) { return data_[i]; }
  const Scalar& operator[](Index i) const { return data_[i]; }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }
  void reshape_inplace(Shape shape) {
    if (shape_size(shape) != size())
      throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
  }

  void set_zero() { data_.setZero(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t(shape_);
    t.storage() = data_.template cast<Other>();
    return t;
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o);
    data_ += o.data_;
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o);
    data_ -= o.data_;
    return *this;
  }
  Tensor& operator*=(Scalar s) {
    data_ *= s;
    return *this;
  }
  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, Scalar s) { return a *= s; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  Scalar max_abs_diff(const Tensor& o) const {
    check_same(o);
    if (empty()) return Scalar(0);
    return (data_ - o.data_).cwiseAbs().maxCoeff();
  }
  bool all_finite() const { return data_.allFinite(); }

 private:
  template <typename... I>
  Index offset_of(I... idx) const {
    const Index ids[] = {static_cast<Index>(idx)...};
    Index off = 0;
    for (std::size_t k = 0; k < sizeof...(I); ++k) off = off * shape_[k] + ids[k];
    return off;
  }
  void check_same(const Tensor& o) const {
    if (shape_ != o.shape_) throw ShapeMismatch(shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

  Shape shape_;
  Storage data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// A trainable tensor with its accumulated gradient.
template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool decay = true;

  Parameter() = default;
  Parameter(Tensor<Scalar> v, bool decay_ = true) : value(std::move(v)), grad(value.shape()), decay(decay_) {}

  void zero_grad() { grad.set_zero(); }
};

template <typename Scalar>
using ParamVisitor = std::function<void(const std::string& name, Parameter<Scalar>& p)>;

/// Non-trainable state that still belongs in checkpoints (normalization statistics).
template <typename Scalar>
using BufferVisitor = std::function<void(const std::string& name, Tensor<Scalar>& t)>;

enum class Mode { Train, Eval };

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r)
    throw ShapeMismatch(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

}  // namespace cvvnet
