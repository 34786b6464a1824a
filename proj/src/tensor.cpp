// SPDX-License-Identifier: Apache-2.0

#include "lorkd/tensor.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace lorkd {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, ",")); }

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw ShapeError(fmt::format("tensor shape {} has zero-size dimension {}", shape_string(shape), i));
    }
  }
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", what, shape_string(a.shape()),
                                 shape_string(b.shape())));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError(fmt::format("shape {} needs {} elements, got {}", shape_string(shape_),
                                 shape_size(shape_), data_.size()));
  }
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError(fmt::format("axis {} out of range for shape {}", axis, shape_string(shape_)));
  }
  return shape_[axis];
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError(fmt::format("index of rank {} into tensor of rank {}", index.size(), shape_.size()));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) {
      throw ShapeError(fmt::format("index {} out of range on axis {} (size {})", i, axis, shape_[axis]));
    }
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
  check_same_shape(*this, other, "add");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

template <typename T>
Tensor<T>& Tensor<T>::operator-=(const Tensor& other) {
  check_same_shape(*this, other, "subtract");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

template <typename T>
Tensor<T>& Tensor<T>::operator*=(T scale) {
  for (T& v : data_) v *= scale;
  return *this;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
  T m = 0;
  for (T v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError(fmt::format("transpose needs rank 2, got {}", shape_string(a.shape())));
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor<T> out({cols, rows});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

#define LORKD_INSTANTIATE(T)                                         \
  template T max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);    \
  template T max_abs<T>(const Tensor<T>&);                           \
  template bool all_finite<T>(const Tensor<T>&);                     \
  template Tensor<T> transpose<T>(const Tensor<T>&);

LORKD_INSTANTIATE(float)
LORKD_INSTANTIATE(double)
#undef LORKD_INSTANTIATE

}  // namespace lorkd
