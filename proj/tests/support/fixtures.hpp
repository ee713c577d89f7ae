#pragma once

#include <cmath>
#include <numbers>

#include "lms/encoding.hpp"
#include "lms/random.hpp"

namespace lms::testing {

/// Random acquisition model with padding, several coils, smooth-ish bias and
/// random unit-modulus phase.
inline AcquisitionModel random_model(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t coils,
                                     std::size_t pad_rows, std::size_t pad_cols, double r,
                                     std::size_t central_lines = 2) {
  Philox rng(seed, 77);
  AcquisitionModel m;
  const std::size_t hp = h + pad_rows, wp = w + pad_cols;
  m.pattern = generate_pattern(hp, r, 4, seed, central_lines);
  m.coils = normalize_coils(rng.complex_normal_array({coils, hp, wp}));
  m.bias = RealArray({h, w});
  for (auto& b : m.bias.data()) b = 0.8 + 0.4 * rng.uniform();
  m.phase = ComplexArray({h, w});
  for (auto& p : m.phase.data()) p = std::polar(1.0, 2.0 * std::numbers::pi * rng.uniform());
  if (pad_rows || pad_cols) m.pad = PadSpec{hp, wp, pad_rows / 2, pad_cols / 2};
  m.scale = 0.5 + rng.uniform();
  return m;
}

/// Trivial single-coil, unpadded, fully sampled model.
inline AcquisitionModel identity_model(std::size_t h, std::size_t w) {
  AcquisitionModel m;
  m.pattern = generate_pattern(h, 1.0, 1, 0, 0);
  m.coils = ComplexArray({1, h, w}, cdouble(1.0));
  m.bias = RealArray({h, w}, 1.0);
  m.phase = ComplexArray({h, w}, cdouble(1.0));
  return m;
}

/// Random Hermitian positive definite matrix with unit-ish diagonal.
inline Eigen::MatrixXcd random_covariance(Philox& rng, Eigen::Index n, double strength) {
  Eigen::MatrixXcd g(n, n);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = cdouble(rng.normal(), rng.normal());
  return Eigen::MatrixXcd::Identity(n, n) + strength * g * g.adjoint() / static_cast<double>(n);
}

}  // namespace lms::testing
