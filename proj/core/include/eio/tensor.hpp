#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "eio/error.hpp"

namespace eio {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& s);
std::string shape_string(const Shape& s);

// Dense row-major tensor. Image batches are NCHW.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_size(shape_), ErrorCategory::shape, "tensor data does not match shape");
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Elements per leading-dimension entry (per sample for batches).
  std::size_t stride0() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / static_cast<std::size_t>(shape_[0]); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(Shape s) {
    require(shape_size(s) == data_.size(), ErrorCategory::shape,
            "cannot reshape " + shape_string(shape_) + " to " + shape_string(s));
    shape_ = std::move(s);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Rows [begin, begin + count) along dimension 0.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t count) {
  Shape s = t.shape();
  s[0] = static_cast<int>(count);
  const std::size_t stride = t.stride0();
  std::vector<T> data(t.data() + begin * stride, t.data() + (begin + count) * stride);
  return Tensor<T>(std::move(s), std::move(data));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, std::span<const std::size_t> rows) {
  Shape s = t.shape();
  s[0] = static_cast<int>(rows.size());
  Tensor<T> out(std::move(s));
  const std::size_t stride = t.stride0();
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(t.data() + rows[r] * stride, stride, out.data() + r * stride);
  return out;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCategory::shape, "max_abs_diff: shape mismatch");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace eio
