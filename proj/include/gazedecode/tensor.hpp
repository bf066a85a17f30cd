#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gazedecode/errors.hpp"

namespace gazedecode {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor. The scalar type is a template parameter so the
// gradient checker can re-run any network in double precision; everything
// else in the project uses the `Tensor` (float) alias.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  BasicTensor(Shape shape, std::initializer_list<T> data)
      : BasicTensor(std::move(shape), std::vector<T>(data)) {}

  template <typename U>
  static BasicTensor cast(const BasicTensor<U>& other) {
    std::vector<T> data(other.size());
    std::transform(other.data().begin(), other.data().end(), data.begin(),
                   [](U v) { return static_cast<T>(v); });
    return BasicTensor(other.shape(), std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& vec() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  // Same data, new shape of equal size.
  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " +
                           shape_str(shape));
    return BasicTensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

inline void require_shape(const Shape& actual, const Shape& expected,
                          const std::string& what) {
  if (actual != expected)
    throw DimensionError(what + ": expected " + shape_str(expected) + ", got " +
                         shape_str(actual));
}

inline void require_rank(const Shape& actual, std::size_t rank, const std::string& what) {
  if (actual.size() != rank)
    throw DimensionError(what + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(actual));
}

}  // namespace gazedecode
