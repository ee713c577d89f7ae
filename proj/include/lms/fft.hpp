#pragma once

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

#include "lms/array.hpp"

namespace lms {

namespace detail {

/// Process-wide cache of FFTW plans keyed by (rows, cols, sign). Planning goes
/// through a mutex because the FFTW planner is not thread-safe; executing a
/// plan on new arrays is.
class FftPlanCache {
 public:
  static FftPlanCache& instance() {
    static FftPlanCache cache;
    return cache;
  }

  fftw_plan get(std::size_t rows, std::size_t cols, int sign) {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto key = std::make_tuple(rows, cols, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    std::vector<cdouble> in(rows * cols), out(rows * cols);
    fftw_plan plan = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols),
                                      reinterpret_cast<fftw_complex*>(in.data()),
                                      reinterpret_cast<fftw_complex*>(out.data()), sign,
                                      FFTW_ESTIMATE | FFTW_UNALIGNED);
    plans_.emplace(key, plan);
    return plan;
  }

  ~FftPlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

 private:
  FftPlanCache() = default;
  std::mutex mutex_;
  std::map<std::tuple<std::size_t, std::size_t, int>, fftw_plan> plans_;
};

// out[k] = sum_j in[j] exp(sign 2 pi i (k - c)(j - c) / n) / sqrt(n), c = n / 2,
// evaluated as fftshift(fft(ifftshift(in))).
inline void centered_transform_slice(const cdouble* in, cdouble* out, std::size_t rows,
                                     std::size_t cols, int sign, std::vector<cdouble>& buf_in,
                                     std::vector<cdouble>& buf_out) {
  const std::size_t n = rows * cols;
  buf_in.resize(n);
  buf_out.resize(n);
  const std::size_t hr = rows / 2, hc = cols / 2;
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t si = (i + hr) % rows;
    for (std::size_t j = 0; j < cols; ++j) {
      buf_in[i * cols + j] = in[si * cols + (j + hc) % cols];
    }
  }
  fftw_execute_dft(FftPlanCache::instance().get(rows, cols, sign),
                   reinterpret_cast<fftw_complex*>(buf_in.data()),
                   reinterpret_cast<fftw_complex*>(buf_out.data()));
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  const std::size_t sr = rows - hr, sc = cols - hc;
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t si = (i + sr) % rows;
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = scale * buf_out[si * cols + (j + sc) % cols];
    }
  }
}

inline ComplexArray centered_transform(const ComplexArray& x, int sign) {
  if (x.rank() < 2) {
    throw ShapeError("centered 2D transform needs rank >= 2, got " + shape_string(x.shape()));
  }
  const std::size_t rows = x.dim(x.rank() - 2);
  const std::size_t cols = x.dim(x.rank() - 1);
  const std::size_t slice = rows * cols;
  ComplexArray out(x.shape());
  if (slice == 0) return out;
  std::vector<cdouble> buf_in, buf_out;
  for (std::size_t off = 0; off < x.size(); off += slice) {
    centered_transform_slice(x.data().data() + off, out.data().data() + off, rows, cols, sign,
                             buf_in, buf_out);
  }
  return out;
}

}  // namespace detail

/// Unitary, center-shifted 2D DFT over the two trailing axes (leading axes
/// are treated as independent slices, e.g. coils).
inline ComplexArray fft2_centered(const ComplexArray& x) { return detail::centered_transform(x, FFTW_FORWARD); }

/// Inverse of fft2_centered.
inline ComplexArray ifft2_centered(const ComplexArray& k) { return detail::centered_transform(k, FFTW_BACKWARD); }

}  // namespace lms
