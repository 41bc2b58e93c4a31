#include "gaitstr/tensor.hpp"

#include "gaitstr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace gaitstr {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw InvalidInput("negative tensor dimension in " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(values.begin(), values.end()) {
  if (values_.size() != shape_numel(shape_))
    throw InvalidInput("tensor value count " + std::to_string(values_.size()) + " does not match shape " +
                       shape_string(shape_));
}

int Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw InvalidInput("dimension index out of range for shape " + shape_string(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

int Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

int Tensor::rows() const {
  const int c = cols();
  return c == 0 ? 0 : static_cast<int>(values_.size() / static_cast<std::size_t>(c));
}

MatrixMap Tensor::matrix() { return MatrixMap(values_.data(), rows(), cols()); }

ConstMatrixMap Tensor::matrix() const { return ConstMatrixMap(values_.data(), rows(), cols()); }

Tensor Tensor::reshaped(Shape shape) const {
  Tensor out = *this;
  out.reshape(std::move(shape));
  return out;
}

void Tensor::reshape(Shape shape) {
  if (shape_numel(shape) != values_.size())
    throw InvalidInput("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.size() != size())
    throw InvalidInput("tensor size mismatch in +=: " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw InvalidInput("max_abs_diff on tensors of different size");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace gaitstr
