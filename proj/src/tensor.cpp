#include "mtl/tensor.hpp"

#include <cstring>
#include <sstream>
#include <stdexcept>

namespace mtl {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) {
      throw std::invalid_argument("tensor: non-positive dimension in shape " + to_string(shape));
    }
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(numel(shape_))) {}

Tensor::Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw std::invalid_argument("tensor: shape " + to_string(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : Tensor(std::move(shape), Eigen::Map<const Vector>(values.begin(), static_cast<Index>(values.size()))) {}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.data_.setConstant(value);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.data_[0] = value;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw std::invalid_argument("tensor: item() on shape " + to_string(shape_));
  }
  return data_[0];
}

Eigen::Map<const RowMatrix> Tensor::matrix() const {
  if (rank() != 2) throw std::invalid_argument("tensor: matrix view of shape " + to_string(shape_));
  return {data_.data(), shape_[0], shape_[1]};
}

Eigen::Map<RowMatrix> Tensor::matrix() {
  if (rank() != 2) throw std::invalid_argument("tensor: matrix view of shape " + to_string(shape_));
  return {data_.data(), shape_[0], shape_[1]};
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != size()) {
    throw std::invalid_argument("tensor: cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

Tensor stack(std::span<const Tensor* const> items) {
  if (items.empty()) throw std::invalid_argument("stack: no tensors");
  const Shape& inner = items.front()->shape();
  Shape shape{static_cast<Index>(items.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  const Index stride = items.front()->size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != inner) {
      throw std::invalid_argument("stack: shape " + to_string(items[i]->shape()) + " differs from " +
                                  to_string(inner));
    }
    out.data().segment(static_cast<Index>(i) * stride, stride) = items[i]->data();
  }
  return out;
}

Tensor stack(std::span<const Tensor> items) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(items.size());
  for (const auto& t : items) ptrs.push_back(&t);
  return stack(std::span<const Tensor* const>(ptrs));
}

}  // namespace mtl
