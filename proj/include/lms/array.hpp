#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lms/errors.hpp"

namespace lms {

using cdouble = std::complex<double>;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline void require_shape(const Shape& got, const Shape& expected, const char* what) {
  if (got != expected) {
    throw ShapeError(std::string(what) + ": expected shape " + shape_string(expected) + ", got " +
                     shape_string(got));
  }
}

/// Dense row-major array with a runtime shape.
template <typename T>
class Array {
 public:
  using value_type = T;

  Array() = default;
  explicit Array(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("array data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& operator()(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  const T& operator()(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  Array reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Array(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](const T& v) {
      if constexpr (std::is_same_v<T, cdouble>) {
        return std::isfinite(v.real()) && std::isfinite(v.imag());
      } else if constexpr (std::is_floating_point_v<T>) {
        return std::isfinite(v);
      } else {
        return true;
      }
    });
  }

  friend bool operator==(const Array& a, const Array& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using RealArray = Array<double>;
using ComplexArray = Array<cdouble>;
using MaskArray = Array<std::uint8_t>;

// ---- elementwise helpers -------------------------------------------------

template <typename T>
Array<T> operator+(const Array<T>& a, const Array<T>& b) {
  require_shape(b.shape(), a.shape(), "operator+");
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Array<T> operator-(const Array<T>& a, const Array<T>& b) {
  require_shape(b.shape(), a.shape(), "operator-");
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <typename T, typename S>
Array<T> operator*(S s, const Array<T>& a) {
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<T>(s) * a[i];
  return out;
}

/// y += alpha * x
template <typename T, typename S>
void axpy(S alpha, const Array<T>& x, Array<T>& y) {
  require_shape(x.shape(), y.shape(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += static_cast<T>(alpha) * x[i];
}

/// <a, b> = sum conj(a_i) b_i
inline cdouble inner(const ComplexArray& a, const ComplexArray& b) {
  require_shape(b.shape(), a.shape(), "inner");
  cdouble acc{0.0, 0.0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::conj(a[i]) * b[i];
  return acc;
}

inline double inner(const RealArray& a, const RealArray& b) {
  require_shape(b.shape(), a.shape(), "inner");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm(const ComplexArray& a) {
  double acc = 0.0;
  for (const auto& v : a.data()) acc += std::norm(v);
  return std::sqrt(acc);
}

inline double norm(const RealArray& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v * v;
  return std::sqrt(acc);
}

inline ComplexArray to_complex(const RealArray& a) {
  ComplexArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = cdouble(a[i], 0.0);
  return out;
}

inline RealArray real_part(const ComplexArray& a) {
  RealArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i].real();
  return out;
}

inline RealArray magnitude(const ComplexArray& a) {
  RealArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::abs(a[i]);
  return out;
}

}  // namespace lms
