#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "lms/encoding.hpp"
#include "lms/errors.hpp"

namespace lms {

/// Samples used for noise estimation: the measured lines of the fully sampled
/// central block, restricted to the outermost readout columns on both sides.
struct NoiseRegion {
  /// Fraction of the readout width taken from each edge (at least one column).
  double edge_fraction = 0.1;
  /// Use every measured line instead of only the central block.
  bool all_lines = false;
};

struct PrewhitenResult {
  KSpaceData data;
  ComplexArray coils;
  /// Estimated coil covariance of the raw data.
  Eigen::MatrixXcd noise_cov;
  /// W with W C W^H = I; applied across coils to data and coil maps.
  Eigen::MatrixXcd whitening;
  std::size_t region_samples = 0;
};

/// Per-coil sample vectors at the noise region, one column per sample.
inline Eigen::MatrixXcd noise_region_samples(const KSpaceData& raw, const NoiseRegion& region) {
  const auto& s = raw.samples;
  if (s.rank() != 3) throw ShapeError("k-space samples must be C x M x Wp");
  const std::size_t nc = s.dim(0), m = s.dim(1), wp = s.dim(2);
  const auto lines = raw.pattern.measured_lines();
  if (lines.size() != m) throw ShapeError("sample line count does not match the pattern");
  const std::size_t edge = std::min<std::size_t>(
      wp, std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(region.edge_fraction * static_cast<double>(wp)))));
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < wp; ++j)
    if (j < edge || j + edge >= wp) cols.push_back(j);
  std::vector<std::size_t> rows;
  for (std::size_t l = 0; l < m; ++l)
    if (region.all_lines || raw.pattern.is_central(lines[l])) rows.push_back(l);
  if (rows.empty() || cols.empty()) throw ConfigError("noise estimation region is empty");
  Eigen::MatrixXcd v(static_cast<Eigen::Index>(nc), static_cast<Eigen::Index>(rows.size() * cols.size()));
  Eigen::Index col = 0;
  for (std::size_t l : rows)
    for (std::size_t j : cols) {
      for (std::size_t c = 0; c < nc; ++c) v(static_cast<Eigen::Index>(c), col) = s(c, l, j);
      ++col;
    }
  return v;
}

/// Zero-mean sample covariance (1/n) sum v v^H over the region.
inline Eigen::MatrixXcd estimate_noise_covariance(const KSpaceData& raw, const NoiseRegion& region = {}) {
  const Eigen::MatrixXcd v = noise_region_samples(raw, region);
  return v * v.adjoint() / static_cast<double>(v.cols());
}

/// Estimate the coil noise covariance and transform data and coil maps so the
/// residual noise is white with unit variance.
inline PrewhitenResult estimate_noise_and_prewhiten(const KSpaceData& raw, const ComplexArray& coils,
                                                    const NoiseRegion& region = {}) {
  if (coils.rank() != 3 || coils.dim(0) != raw.samples.dim(0)) {
    throw ShapeError("coil maps do not match the k-space coil count");
  }
  PrewhitenResult out;
  out.region_samples = static_cast<std::size_t>(noise_region_samples(raw, region).cols());
  out.noise_cov = estimate_noise_covariance(raw, region);
  Eigen::LLT<Eigen::MatrixXcd> llt(out.noise_cov);
  if (llt.info() != Eigen::Success) throw RankError("noise covariance is not positive definite");
  const Eigen::Index nc = out.noise_cov.rows();
  out.whitening = llt.matrixL().solve(Eigen::MatrixXcd::Identity(nc, nc));
  out.data.samples = mix_coils(out.whitening, raw.samples);
  out.data.pattern = raw.pattern;
  out.data.noise_cov = Eigen::MatrixXcd::Identity(nc, nc);
  out.coils = mix_coils(out.whitening, coils);
  return out;
}

}  // namespace lms
