#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "icl_lab/errors.hpp"

namespace icl {

using TokenId = std::int32_t;

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array. Model weights and activations use Tensor<float>;
/// spectral code and metrics use Tensor<double>.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T{}) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeMismatch("tensor shape " + shape_string(shape_) + " does not match " +
                          std::to_string(data_.size()) + " values");
    }
  }
  Tensor(std::size_t rows, std::size_t cols, std::initializer_list<T> values)
      : Tensor(Shape{rows, cols}, std::vector<T>(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor from_matrix(const RowMatrix<T>& m) {
    Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    Eigen::Map<RowMatrix<T>>(t.data_.data(), m.rows(), m.cols()) = m;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * shape_[1], shape_[1]}; }

  /// Views a rank-1 or rank-2 tensor as an Eigen matrix without copying.
  Eigen::Map<RowMatrix<T>> mat() {
    require_matrix();
    return {data_.data(), rows(), cols()};
  }
  Eigen::Map<const RowMatrix<T>> mat() const {
    require_matrix();
    return {data_.data(), rows(), cols()};
  }

  bool all_finite() const;
  void require_finite(const char* what) const;

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Eigen::Index rows() const { return shape_.size() == 1 ? 1 : static_cast<Eigen::Index>(shape_[0]); }
  Eigen::Index cols() const {
    return static_cast<Eigen::Index>(shape_.size() == 1 ? shape_[0] : shape_[1]);
  }
  void require_matrix() const {
    if (shape_.size() != 1 && shape_.size() != 2) {
      throw ShapeMismatch("expected a 1-D or 2-D tensor, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace icl
