#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "lms/array.hpp"
#include "lms/encoding.hpp"
#include "lms/errors.hpp"
#include "lms/pattern.hpp"
#include "lms/random.hpp"

namespace lms {

struct PhantomSpec {
  std::size_t size = 32;
  std::size_t ellipses = 6;
  std::size_t coils = 4;
  std::uint64_t seed = 1;
  /// Edge width of each ellipse in pixels; keeps the k-space periphery quiet.
  double edge_width = 0.6;

  void validate() const {
    if (size < 16) throw ConfigError("phantom size must be at least 16");
    if (coils < 1) throw ConfigError("phantom needs at least one coil");
  }
};

struct Phantom {
  RealArray image;
  ComplexArray coils;
  RealArray bias;
  ComplexArray phase;
};

namespace detail {

inline double soft_inside(double r2, double edge) {
  // r2 is the squared normalized radius; the ramp is measured in radius units.
  return 1.0 / (1.0 + std::exp((std::sqrt(r2) - 1.0) / edge));
}

}  // namespace detail

/// Random soft-edged ellipses inside an outer "head" ellipse, values in [0, 1].
inline RealArray ellipse_image(std::size_t n, std::size_t count, double edge_px, Philox& rng) {
  RealArray img({n, n});
  const double half = 0.5 * static_cast<double>(n);
  struct Ellipse {
    double cy, cx, ay, ax, angle, value;
  };
  std::vector<Ellipse> shapes;
  const double head_ay = 0.72 + 0.14 * rng.uniform(), head_ax = 0.62 + 0.14 * rng.uniform();
  shapes.push_back({0.04 * (rng.uniform() - 0.5), 0.04 * (rng.uniform() - 0.5), head_ay, head_ax,
                    0.3 * (rng.uniform() - 0.5), 0.55 + 0.2 * rng.uniform()});
  for (std::size_t k = 0; k < count; ++k) {
    const double ay = 0.08 + 0.3 * rng.uniform(), ax = 0.08 + 0.3 * rng.uniform();
    const double rad = 0.45 * rng.uniform(), theta = 2.0 * std::numbers::pi * rng.uniform();
    shapes.push_back({rad * head_ay * std::sin(theta), rad * head_ax * std::cos(theta), ay, ax,
                      std::numbers::pi * rng.uniform(), 0.5 * (rng.uniform() - 0.4)});
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double y = (static_cast<double>(i) + 0.5 - half) / half;
      const double x = (static_cast<double>(j) + 0.5 - half) / half;
      double v = 0.0;
      for (const auto& e : shapes) {
        const double c = std::cos(e.angle), s = std::sin(e.angle);
        const double u = ((y - e.cy) * c + (x - e.cx) * s) / e.ay;
        const double w = (-(y - e.cy) * s + (x - e.cx) * c) / e.ax;
        const double edge = edge_px / (half * std::min(e.ay, e.ax));
        v += e.value * detail::soft_inside(u * u + w * w, edge);
      }
      img(i, j) = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

/// Gaussian-profile coil maps centred on a ring around the image, with a
/// per-coil phase ramp, normalized so that sum_c |S_c|^2 = 1 everywhere.
inline ComplexArray gaussian_coils(std::size_t n, std::size_t count, Philox& rng) {
  ComplexArray coils({count, n, n});
  const double half = 0.5 * static_cast<double>(n);
  const double offset = 2.0 * std::numbers::pi * rng.uniform();
  for (std::size_t c = 0; c < count; ++c) {
    const double theta = offset + 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(count);
    const double cy = 1.1 * std::sin(theta), cx = 1.1 * std::cos(theta);
    const double width = 0.8 + 0.3 * rng.uniform();
    const double ky = 1.5 * (rng.uniform() - 0.5), kx = 1.5 * (rng.uniform() - 0.5), p0 = 2.0 * std::numbers::pi * rng.uniform();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double y = (static_cast<double>(i) + 0.5 - half) / half;
        const double x = (static_cast<double>(j) + 0.5 - half) / half;
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        coils(c, i, j) = std::polar(std::exp(-d2 / (2.0 * width * width)), p0 + ky * y + kx * x);
      }
  }
  return normalize_coils(coils);
}

/// Second-order polynomial field rescaled into [1 - amplitude, 1 + amplitude].
inline RealArray polynomial_bias(std::size_t n, double amplitude, Philox& rng) {
  RealArray b({n, n});
  double coef[5];
  for (double& c : coef) c = rng.uniform() - 0.5;
  const double half = 0.5 * static_cast<double>(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double y = (static_cast<double>(i) + 0.5 - half) / half;
      const double x = (static_cast<double>(j) + 0.5 - half) / half;
      b(i, j) = coef[0] * y + coef[1] * x + coef[2] * x * y + coef[3] * y * y + coef[4] * x * x;
      peak = std::max(peak, std::abs(b(i, j)));
    }
  for (auto& v : b.data()) v = 1.0 + (peak > 0.0 ? amplitude * v / peak : 0.0);
  return b;
}

/// exp(i phi) with phi a sum of two low-frequency sinusoids.
inline ComplexArray smooth_phase(std::size_t n, Philox& rng) {
  ComplexArray p({n, n});
  const double a = 0.3 + 0.5 * rng.uniform(), b = 0.3 + 0.5 * rng.uniform();
  const double fy = 0.5 + rng.uniform(), fx = 0.5 + rng.uniform();
  const double py = 2.0 * std::numbers::pi * rng.uniform(), px = 2.0 * std::numbers::pi * rng.uniform();
  const double half = 0.5 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double y = (static_cast<double>(i) + 0.5 - half) / half;
      const double x = (static_cast<double>(j) + 0.5 - half) / half;
      p(i, j) = std::polar(1.0, a * std::sin(std::numbers::pi * fy * y + py) + b * std::cos(std::numbers::pi * fx * x + px));
    }
  return p;
}

inline Phantom make_phantom(const PhantomSpec& spec) {
  spec.validate();
  Philox rng(spec.seed, 0x9a47);
  Phantom out;
  out.image = ellipse_image(spec.size, spec.ellipses, spec.edge_width, rng);
  out.coils = gaussian_coils(spec.size, spec.coils, rng);
  out.bias = polynomial_bias(spec.size, 0.2, rng);
  out.phase = smooth_phase(spec.size, rng);
  return out;
}

/// Magnitude images only, for VAE training: phantoms with seeds first_seed, first_seed + 1, ...
inline std::vector<RealArray> phantom_dataset(std::size_t count, std::size_t size, std::size_t ellipses,
                                              std::uint64_t first_seed) {
  std::vector<RealArray> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Philox rng(first_seed + k, 0x9a47);
    out.push_back(ellipse_image(size, ellipses, PhantomSpec{}.edge_width, rng));
  }
  return out;
}

/// Base noise standard deviation per k-space sample and coil (unitary FFT
/// units, image values in [0, 1]).
inline constexpr double kBaseNoiseStd = 0.01;

/// Fixed coil noise correlation: unit diagonal, neighbouring coils correlated.
inline Eigen::MatrixXcd coil_noise_correlation(std::size_t coils, double rho = 0.2) {
  const auto n = static_cast<Eigen::Index>(coils);
  Eigen::MatrixXcd c = Eigen::MatrixXcd::Identity(n, n);
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    c(i, i + 1) = cdouble(rho, 0.5 * rho);
    c(i + 1, i) = std::conj(c(i, i + 1));
  }
  return c;
}

struct Acquisition {
  KSpaceData data;
  /// Forward model used to simulate (ground-truth coils, bias, phase).
  AcquisitionModel model;
  RealArray truth;
  /// Coil noise covariance actually applied.
  Eigen::MatrixXcd noise_cov;
  double noise_std = 0.0;
};

/// y = E x_true + eta, eta complex Gaussian with covariance
/// (noise_scale * sigma0)^2 * coil_noise_correlation across coils.
inline Acquisition simulate_acquisition(const Phantom& ph, const UndersamplingPattern& pattern, double noise_scale,
                                        std::uint64_t seed, double base_std = kBaseNoiseStd) {
  if (!(noise_scale >= 0.0)) throw ConfigError("noise scale must be non-negative");
  require_shape(ph.bias.shape(), ph.image.shape(), "phantom bias");
  require_shape(ph.phase.shape(), ph.image.shape(), "phantom phase");
  if (pattern.height() != ph.coils.dim(1)) throw ShapeError("pattern height does not match the phantom");
  Acquisition out;
  out.model.pattern = pattern;
  out.model.coils = ph.coils;
  out.model.bias = ph.bias;
  out.model.phase = ph.phase;
  out.truth = ph.image;
  out.noise_std = noise_scale * base_std;
  const std::size_t c = ph.coils.dim(0);
  out.noise_cov = out.noise_std * out.noise_std * coil_noise_correlation(c);

  const Encoding enc = build_encoding(out.model);
  out.data.samples = enc.encode.apply(to_complex(ph.image));
  out.data.pattern = pattern;
  if (out.noise_std > 0.0) {
    const Eigen::MatrixXcd l = Eigen::LLT<Eigen::MatrixXcd>(out.noise_cov).matrixL();
    Philox rng(seed, 0xacc0);
    const ComplexArray white = rng.complex_normal_array(out.data.samples.shape());
    const ComplexArray eta = mix_coils(l, white);
    for (std::size_t i = 0; i < eta.size(); ++i) out.data.samples[i] += eta[i];
  }
  return out;
}

}  // namespace lms
