#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

#include "lms/errors.hpp"
#include "lms/random.hpp"

namespace lms {

/// Cartesian line mask over the phase-encode axis.
struct UndersamplingPattern {
  std::vector<std::uint8_t> mask;
  double acceleration = 1.0;
  std::size_t central_lines = 0;
  std::uint64_t seed = 0;
  /// Peak-to-side ratio of the mask's point spread function.
  double psf_ratio = 0.0;

  std::size_t height() const noexcept { return mask.size(); }

  /// Indices of sampled lines in increasing order.
  std::vector<std::size_t> measured_lines() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) out.push_back(i);
    return out;
  }

  std::size_t measured_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }

  /// First index of the always-sampled block around the k-space center.
  std::size_t central_start() const { return mask.size() / 2 - central_lines / 2; }

  bool is_central(std::size_t line) const {
    return line >= central_start() && line < central_start() + central_lines;
  }
};

/// |PSF(0)| / max_{j != 0} |PSF(j)| with PSF the inverse DFT of the mask.
/// Infinite when every sidelobe vanishes (full sampling).
inline double psf_peak_to_side(const std::vector<std::uint8_t>& mask) {
  const std::size_t n = mask.size();
  std::vector<double> psf(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::complex<double> acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (!mask[k]) continue;
      acc += std::polar(1.0, 2.0 * std::numbers::pi * static_cast<double>((j * k) % n) / static_cast<double>(n));
    }
    psf[j] = std::abs(acc);
  }
  double side = 0.0;
  for (std::size_t j = 1; j < n; ++j) side = std::max(side, psf[j]);
  if (side < 1e-12 * psf[0]) return std::numeric_limits<double>::infinity();
  return psf[0] / side;
}

/// Number of lines sampled for acceleration r on `height` lines.
inline std::size_t line_budget(std::size_t height, double r) {
  return static_cast<std::size_t>(std::lround(static_cast<double>(height) / r));
}

/// Best of `candidates` random masks by PSF peak-to-side ratio. The central
/// block is always sampled; the remaining budget is drawn uniformly without
/// replacement from the other lines. Candidates come from one Philox stream in
/// order, so a smaller candidate count yields a prefix of a larger one.
inline UndersamplingPattern generate_pattern(std::size_t height, double r, std::size_t candidates,
                                             std::uint64_t seed, std::size_t central_lines = 15) {
  if (!(r >= 1.0)) throw ConfigError("acceleration must be >= 1");
  if (candidates < 1) throw ConfigError("need at least one candidate pattern");
  if (height < central_lines || height == 0) {
    throw ConfigError("height " + std::to_string(height) + " is smaller than the central block");
  }
  const std::size_t budget = line_budget(height, r);
  if (central_lines > budget) {
    throw InfeasibleError("central block of " + std::to_string(central_lines) + " lines exceeds the budget of " +
                          std::to_string(budget) + " lines at R=" + std::to_string(r));
  }

  UndersamplingPattern base;
  base.acceleration = r;
  base.central_lines = central_lines;
  base.seed = seed;
  base.mask.assign(height, 0);
  for (std::size_t i = 0; i < central_lines; ++i) base.mask[base.central_start() + i] = 1;

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < height; ++i)
    if (!base.mask[i]) pool.push_back(i);
  const std::size_t extra = std::min(budget - central_lines, pool.size());

  Philox rng(seed, 0x9a77e5u);
  UndersamplingPattern best;
  best.psf_ratio = -1.0;
  for (std::size_t c = 0; c < candidates; ++c) {
    std::vector<std::size_t> order = pool;
    for (std::size_t i = 0; i < extra; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(order.size() - i));
      std::swap(order[i], order[j]);
    }
    UndersamplingPattern cand = base;
    for (std::size_t i = 0; i < extra; ++i) cand.mask[order[i]] = 1;
    cand.psf_ratio = psf_peak_to_side(cand.mask);
    if (cand.psf_ratio > best.psf_ratio) best = std::move(cand);
  }
  return best;
}

}  // namespace lms
