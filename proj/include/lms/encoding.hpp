#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "lms/array.hpp"
#include "lms/errors.hpp"
#include "lms/fft.hpp"
#include "lms/linear_operator.hpp"
#include "lms/pattern.hpp"

namespace lms {

/// Placement of the H x W image inside the Hp x Wp acquisition grid. A zero
/// height or width means no padding.
struct PadSpec {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t row_offset = 0;
  std::size_t col_offset = 0;
};

/// Everything that defines the forward model of one acquisition.
///
/// coils live on the padded grid (C x Hp x Wp); bias and phase live on the
/// image grid (H x W). Padding only inserts zeros, so multiplying by bias and
/// phase before or after it gives the same operator.
struct AcquisitionModel {
  UndersamplingPattern pattern;
  ComplexArray coils;
  RealArray bias;
  ComplexArray phase;
  PadSpec pad;
  double scale = 1.0;
  /// Coil noise covariance; an empty matrix means identity.
  Eigen::MatrixXcd noise_cov;

  const Shape& image_shape() const { return bias.shape(); }
  std::size_t coil_count() const { return coils.dim(0); }
  std::size_t grid_height() const { return coils.dim(1); }
  std::size_t grid_width() const { return coils.dim(2); }
};

/// Measured multi-coil samples, C x M x Wp, with M the sampled line count.
struct KSpaceData {
  ComplexArray samples;
  UndersamplingPattern pattern;
  /// Coil noise covariance; an empty matrix means identity.
  Eigen::MatrixXcd noise_cov;
};

/// Apply a coil-mixing matrix across the leading (coil) axis.
inline ComplexArray mix_coils(const Eigen::MatrixXcd& m, const ComplexArray& a) {
  const std::size_t c = a.dim(0);
  if (static_cast<std::size_t>(m.cols()) != c) throw ShapeError("coil mixing matrix does not match coil count");
  const std::size_t rest = a.size() / c;
  Shape out_shape = a.shape();
  out_shape[0] = static_cast<std::size_t>(m.rows());
  ComplexArray out(out_shape);
  for (std::size_t r = 0; r < out_shape[0]; ++r)
    for (std::size_t d = 0; d < c; ++d) {
      const cdouble w = m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d));
      if (w == cdouble(0.0)) continue;
      for (std::size_t i = 0; i < rest; ++i) out[r * rest + i] += w * a[d * rest + i];
    }
  return out;
}

inline LinearOperator coil_mixing_operator(Eigen::MatrixXcd m, const Shape& shape) {
  auto mp = std::make_shared<const Eigen::MatrixXcd>(std::move(m));
  auto ma = std::make_shared<const Eigen::MatrixXcd>(mp->adjoint());
  return LinearOperator(
      shape, shape, [mp](const ComplexArray& x) { return mix_coils(*mp, x); },
      [ma](const ComplexArray& y) { return mix_coils(*ma, y); }, "coil-mix");
}

/// Scale coil maps so that sum_c |S_c|^2 = 1 wherever any coil is nonzero.
inline ComplexArray normalize_coils(const ComplexArray& coils) {
  const std::size_t c = coils.dim(0), n = coils.size() / c;
  ComplexArray out = coils;
  for (std::size_t p = 0; p < n; ++p) {
    double energy = 0.0;
    for (std::size_t k = 0; k < c; ++k) energy += std::norm(coils[k * n + p]);
    if (energy == 0.0) continue;
    const double inv = 1.0 / std::sqrt(energy);
    for (std::size_t k = 0; k < c; ++k) out[k * n + p] *= inv;
  }
  return out;
}

/// max over supported pixels of |sum_c |S_c|^2 - 1|.
inline double coil_normalization_error(const ComplexArray& coils) {
  const std::size_t c = coils.dim(0), n = coils.size() / c;
  double worst = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    double energy = 0.0;
    for (std::size_t k = 0; k < c; ++k) energy += std::norm(coils[k * n + p]);
    if (energy > 0.0) worst = std::max(worst, std::abs(energy - 1.0));
  }
  return worst;
}

/// The operators of one acquisition model.
struct Encoding {
  /// E: image (H x W) -> measured samples (C x M x Wp).
  LinearOperator encode;
  /// E_F: image -> full k-space (C x Hp x Wp), i.e. E without undersampling.
  LinearOperator encode_full;
  /// U: full k-space -> measured samples.
  LinearOperator undersample;
  /// Inverse noise covariance on the measured samples.
  LinearOperator noise_precision;
  /// Diagonal of E_F^H E_F on the image grid.
  RealArray gram_diagonal;
  /// Bias field of the model, kept for display of bias-reapplied images.
  RealArray bias;

  /// (E_F^H E_F)^{-1} E_F^H k, zero where no coil covers a pixel.
  ComplexArray left_inverse(const ComplexArray& k) const {
    ComplexArray x = encode_full.adjoint(k);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = gram_diagonal[i] > 0.0 ? x[i] / gram_diagonal[i] : cdouble(0.0);
    return x;
  }
};

namespace detail {

inline void validate_model(const AcquisitionModel& m) {
  if (m.coils.rank() != 3) throw ShapeError("coil maps must be C x Hp x Wp, got " + shape_string(m.coils.shape()));
  if (m.bias.rank() != 2) throw ShapeError("bias must be H x W, got " + shape_string(m.bias.shape()));
  require_shape(m.phase.shape(), m.bias.shape(), "phase");
  if (m.pattern.height() != m.grid_height()) {
    throw ShapeError("pattern height " + std::to_string(m.pattern.height()) + " does not match grid height " +
                     std::to_string(m.grid_height()));
  }
  const std::size_t h = m.bias.dim(0), w = m.bias.dim(1);
  if (m.pad.row_offset + h > m.grid_height() || m.pad.col_offset + w > m.grid_width()) {
    throw ShapeError("image does not fit inside the acquisition grid");
  }
  const bool padded = m.pad.height != 0 || m.pad.width != 0;
  if (padded && (m.pad.height != m.grid_height() || m.pad.width != m.grid_width())) {
    throw ShapeError("pad target does not match coil grid");
  }
  if (!padded && (h != m.grid_height() || w != m.grid_width())) {
    throw ShapeError("image and coil grid differ but no padding is given");
  }
  for (const auto& p : m.phase.data()) {
    if (std::abs(std::abs(p) - 1.0) > 1e-8) throw ConfigError("phase map is not unit modulus");
  }
  for (double b : m.bias.data()) {
    if (!(b > 0.0)) throw ConfigError("bias field must be positive");
  }
  if (!(m.scale > 0.0) || !std::isfinite(m.scale)) throw ConfigError("scale must be positive");
  if (m.noise_cov.size() != 0 && (static_cast<std::size_t>(m.noise_cov.rows()) != m.coil_count() ||
                                  m.noise_cov.rows() != m.noise_cov.cols())) {
    throw ShapeError("noise covariance does not match coil count");
  }
  if (!m.coils.all_finite()) throw ConfigError("coil maps contain non-finite values");
}

}  // namespace detail

inline LinearOperator undersampling_operator(const UndersamplingPattern& pattern, std::size_t coils,
                                             std::size_t width) {
  auto lines = std::make_shared<const std::vector<std::size_t>>(pattern.measured_lines());
  const std::size_t hp = pattern.height();
  const Shape full{coils, hp, width};
  const Shape measured{coils, lines->size(), width};
  return LinearOperator(
      full, measured,
      [lines, measured, hp, width](const ComplexArray& k) {
        ComplexArray out(measured);
        const std::size_t m = lines->size();
        for (std::size_t c = 0; c < measured[0]; ++c)
          for (std::size_t l = 0; l < m; ++l)
            std::copy_n(k.data().begin() + static_cast<std::ptrdiff_t>((c * hp + (*lines)[l]) * width), width,
                        out.data().begin() + static_cast<std::ptrdiff_t>((c * m + l) * width));
        return out;
      },
      [lines, full, hp, width](const ComplexArray& y) {
        ComplexArray out(full);
        const std::size_t m = lines->size();
        for (std::size_t c = 0; c < full[0]; ++c)
          for (std::size_t l = 0; l < m; ++l)
            std::copy_n(y.data().begin() + static_cast<std::ptrdiff_t>((c * m + l) * width), width,
                        out.data().begin() + static_cast<std::ptrdiff_t>((c * hp + (*lines)[l]) * width));
        return out;
      },
      "U");
}

/// Inverse coil covariance applied across coils at every sample.
inline LinearOperator noise_precision_operator(const Eigen::MatrixXcd& noise_cov, const Shape& measured) {
  if (noise_cov.size() == 0) return identity_operator(measured);
  const Eigen::MatrixXcd inv = noise_cov.llt().solve(Eigen::MatrixXcd::Identity(noise_cov.rows(), noise_cov.cols()));
  const Eigen::MatrixXcd herm = 0.5 * (inv + inv.adjoint());
  auto op = coil_mixing_operator(herm, measured);
  return LinearOperator(
      measured, measured, [op](const ComplexArray& x) { return op.apply(x); },
      [op](const ComplexArray& y) { return op.apply(y); }, "noise-precision");
}

/// Build E = U F S B phi P s, its fully sampled variant and the noise weighting.
inline Encoding build_encoding(const AcquisitionModel& model) {
  detail::validate_model(model);
  struct State {
    ComplexArray coils;
    ComplexArray weight;  // s * bias * phase on the image grid
    std::size_t h, w, hp, wp, r0, c0, nc;
  };
  auto st = std::make_shared<State>();
  st->coils = model.coils;
  st->h = model.bias.dim(0);
  st->w = model.bias.dim(1);
  st->hp = model.grid_height();
  st->wp = model.grid_width();
  st->r0 = model.pad.row_offset;
  st->c0 = model.pad.col_offset;
  st->nc = model.coil_count();
  st->weight = ComplexArray(model.bias.shape());
  for (std::size_t i = 0; i < st->weight.size(); ++i) st->weight[i] = model.scale * model.bias[i] * model.phase[i];

  const Shape image = model.image_shape();
  const Shape full{st->nc, st->hp, st->wp};

  auto apply_full = [st, full](const ComplexArray& x) {
    ComplexArray coil_images(full);
    const std::size_t plane = st->hp * st->wp;
    for (std::size_t i = 0; i < st->h; ++i)
      for (std::size_t j = 0; j < st->w; ++j) {
        const cdouble v = st->weight[i * st->w + j] * x[i * st->w + j];
        const std::size_t p = (i + st->r0) * st->wp + (j + st->c0);
        for (std::size_t c = 0; c < st->nc; ++c) coil_images[c * plane + p] = st->coils[c * plane + p] * v;
      }
    return fft2_centered(coil_images);
  };
  auto adjoint_full = [st, image](const ComplexArray& k) {
    const ComplexArray coil_images = ifft2_centered(k);
    ComplexArray out(image);
    const std::size_t plane = st->hp * st->wp;
    for (std::size_t i = 0; i < st->h; ++i)
      for (std::size_t j = 0; j < st->w; ++j) {
        const std::size_t p = (i + st->r0) * st->wp + (j + st->c0);
        cdouble acc = 0.0;
        for (std::size_t c = 0; c < st->nc; ++c) acc += std::conj(st->coils[c * plane + p]) * coil_images[c * plane + p];
        out[i * st->w + j] = std::conj(st->weight[i * st->w + j]) * acc;
      }
    return out;
  };

  Encoding enc;
  enc.encode_full = LinearOperator(image, full, apply_full, adjoint_full, "E_F");
  enc.undersample = undersampling_operator(model.pattern, st->nc, st->wp);
  enc.encode = compose(enc.undersample, enc.encode_full);
  enc.noise_precision = noise_precision_operator(model.noise_cov, enc.undersample.codomain_shape());
  enc.bias = model.bias;
  enc.gram_diagonal = RealArray(image);
  const std::size_t plane = st->hp * st->wp;
  for (std::size_t i = 0; i < st->h; ++i)
    for (std::size_t j = 0; j < st->w; ++j) {
      const std::size_t p = (i + st->r0) * st->wp + (j + st->c0);
      double energy = 0.0;
      for (std::size_t c = 0; c < st->nc; ++c) energy += std::norm(st->coils[c * plane + p]);
      enc.gram_diagonal[i * st->w + j] = std::norm(st->weight[i * st->w + j]) * energy;
    }
  return enc;
}

/// argmin_s |s E mu - y|^2 = Re<E mu, y> / |E mu|^2.
inline double estimate_scale(const ComplexArray& mu, const LinearOperator& e, const ComplexArray& y) {
  const ComplexArray emu = e.apply(mu);
  const double energy = inner(emu, emu).real();
  if (energy == 0.0) throw DegenerateError("scale estimate undefined: encoded mean is zero");
  return inner(emu, y).real() / energy;
}

}  // namespace lms
