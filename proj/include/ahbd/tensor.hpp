#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ahbd/error.hpp"

namespace ahbd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Dense row-major array with an optional gradient buffer of the same length.
// Rank 0 (shape {}) holds a single scalar.
template <class Real>
class BasicTensor {
 public:
  using value_type = Real;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape)
      : shape_(std::move(shape)), values_(shape_numel(shape_), Real{0}) {}

  BasicTensor(Shape shape, std::vector<Real> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_numel(shape_) != values_.size()) {
      throw DimensionError("tensor: shape " + shape_string(shape_) + " does not match " +
                           std::to_string(values_.size()) + " values");
    }
  }

  static BasicTensor scalar(Real v) { return BasicTensor(Shape{}, {v}); }

  static BasicTensor matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<Real> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("tensor: ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return BasicTensor({r, c}, std::move(values));
  }

  static BasicTensor vector(std::initializer_list<Real> v) {
    return BasicTensor({v.size()}, std::vector<Real>(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }

  // 2-D helpers; a rank-1 tensor is treated as a single row.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  std::span<Real> values() { return values_; }
  std::span<const Real> values() const { return values_; }
  Real* data() { return values_.data(); }
  const Real* data() const { return values_.data(); }

  Real& operator[](std::size_t i) { return values_[i]; }
  const Real& operator[](std::size_t i) const { return values_[i]; }
  Real& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  const Real& at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  Real item() const {
    if (values_.size() != 1) throw DimensionError("tensor: item() on non-scalar " + shape_string(shape_));
    return values_[0];
  }

  bool has_grad() const { return !grad_.empty(); }
  // Allocates a zeroed gradient buffer if none is present.
  std::span<Real> grad() {
    if (grad_.empty()) grad_.assign(values_.size(), Real{0});
    return grad_;
  }
  std::span<const Real> grad() const { return grad_; }
  void clear_grad() { grad_.clear(); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](Real v) { return std::isfinite(v); });
  }

  template <class Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(shape_, std::vector<Other>(values_.begin(), values_.end()));
  }

  bool operator==(const BasicTensor& o) const { return shape_ == o.shape_ && values_ == o.values_; }

 private:
  Shape shape_;
  std::vector<Real> values_;
  std::vector<Real> grad_;
};

using Tensor = BasicTensor<float>;

// values <- values - lr * grad, then the gradient buffer is released.
template <class Real>
void apply_gradient(BasicTensor<Real>& param, double lr) {
  if (!param.has_grad()) throw ContractError("apply_gradient: parameter has no gradient");
  auto values = param.values();
  auto grad = std::as_const(param).grad();
  const Real step = static_cast<Real>(lr);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] -= step * grad[i];
  param.clear_grad();
}

}  // namespace ahbd
