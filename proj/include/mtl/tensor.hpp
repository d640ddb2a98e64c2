#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mtl {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dimensions of a tensor, outermost first. A rank-0 shape holds one scalar.
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Storage is an Eigen vector so that element-wise work can be written as
/// array expressions and 2-D views can be mapped straight onto Eigen
/// matrices without copying.
class Tensor {
 public:
  Tensor() : shape_{}, data_(Vector::Zero(1)) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Vector data);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }

  const Vector& data() const { return data_; }
  Vector& data() { return data_; }
  std::span<const double> values() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  double operator[](Index i) const { return data_[i]; }
  double& operator[](Index i) { return data_[i]; }

  /// Value of a one-element tensor.
  double item() const;

  /// Row-major 2-D view; requires rank 2.
  Eigen::Map<const RowMatrix> matrix() const;
  Eigen::Map<RowMatrix> matrix();

  bool all_finite() const { return data_.allFinite(); }

  /// Same values under a new shape with the same element count.
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  Vector data_;
};

/// Bitwise equality of shape and payload.
bool bit_equal(const Tensor& a, const Tensor& b);

/// Stacks same-shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);
Tensor stack(std::span<const Tensor* const> items);

}  // namespace mtl
