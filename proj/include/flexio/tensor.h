#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "flexio/errors.h"

namespace flexio {

using Shape = std::vector<std::size_t>;

inline std::size_t NumElements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string ShapeString(const Shape& shape);

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

// Dense row-major tensor with value semantics. Feature maps use the
// channels-last layout [batch, time, freq, channels].
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(NumElements(shape_), fill) {}
  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != NumElements(shape_)) {
      throw InvalidInput("tensor data size does not match shape " + ShapeString(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Views the tensor as a matrix whose columns are the last dimension.
  MatrixMap<T> matrix() {
    const auto cols = static_cast<Eigen::Index>(shape_.empty() ? 1 : shape_.back());
    return MatrixMap<T>(data_.data(), static_cast<Eigen::Index>(size()) / std::max<Eigen::Index>(cols, 1), cols);
  }
  ConstMatrixMap<T> matrix() const {
    const auto cols = static_cast<Eigen::Index>(shape_.empty() ? 1 : shape_.back());
    return ConstMatrixMap<T>(data_.data(), static_cast<Eigen::Index>(size()) / std::max<Eigen::Index>(cols, 1), cols);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(Shape shape) {
    if (NumElements(shape) != data_.size()) {
      throw InvalidInput("cannot reshape " + ShapeString(shape_) + " to " + ShapeString(shape));
    }
    shape_ = std::move(shape);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

 private:
  Shape shape_;
  // Fixed alignment keeps vectorised reductions independent of heap addresses.
  std::vector<T, Eigen::aligned_allocator<T>> data_;
};

template <typename T>
bool AllFinite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](T v) { return std::isfinite(v); });
}

}  // namespace flexio
