#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "layerskip/errors.hpp"

namespace layerskip {

/// Dense row-major tensor. Training and inference run on `float`; `double`
/// instantiations exist for gradient checking.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<std::size_t> shape, T fill = T{0})
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  BasicTensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape product " + std::to_string(element_count(shape_)));
    }
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 helpers.
  std::size_t rows() const { return shape_.empty() ? 0 : shape_.front(); }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : data_.size() / std::max<std::size_t>(1, rows()); }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
void require_finite(const BasicTensor<T>& t, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value in ") + what);
  }
}

/// A trainable tensor and its gradient accumulator.
template <typename T>
struct BasicParameter {
  BasicTensor<T> value;
  BasicTensor<T> grad;

  BasicParameter() = default;
  explicit BasicParameter(std::vector<std::size_t> shape, T fill = T{0})
      : value(shape, fill), grad(shape, T{0}) {}

  void zero_grad() { grad.fill(T{0}); }

  template <typename U>
  BasicParameter<U> cast() const {
    BasicParameter<U> out;
    out.value = value.template cast<U>();
    out.grad = grad.template cast<U>();
    return out;
  }
};

using Parameter = BasicParameter<float>;

}  // namespace layerskip
