#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "lms/array.hpp"
#include "lms/errors.hpp"
#include "lms/linear_operator.hpp"
#include "lms/random.hpp"

namespace lms {

using Mask = Array<std::uint8_t>;

inline Mask full_mask(const Shape& shape) { return Mask(shape, 1); }

/// Mean |E x - y| over all measured samples of all coils.
inline double kspace_abs_error(const ComplexArray& x, const LinearOperator& encode, const ComplexArray& y) {
  const ComplexArray ex = encode.apply(x);
  require_shape(y.shape(), ex.shape(), "k-space data");
  if (y.size() == 0) throw ShapeError("no measured samples");
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += std::abs(ex[i] - y[i]);
  return acc / static_cast<double>(y.size());
}

struct ImageMetrics {
  double rmse_percent = 0.0;
  double nmse = 0.0;
  double psnr = 0.0;
};

/// Masked RMSE% = 100 |m (x - ref)| / |m ref|; full-frame NMSE = |x - ref|^2 / |ref|^2 and
/// pSNR = 20 log10(max(ref) / sqrt(MSE)), capped at psnr_cap.
inline ImageMetrics image_metrics(const RealArray& x, const RealArray& reference, const Mask& mask,
                                  double psnr_cap = 99.0) {
  require_shape(x.shape(), reference.shape(), "image metrics");
  require_shape(mask.shape(), reference.shape(), "metrics mask");
  double num = 0.0, den = 0.0, sq = 0.0, ref_sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - reference[i];
    sq += d * d;
    ref_sq += reference[i] * reference[i];
    if (mask[i]) {
      num += d * d;
      den += reference[i] * reference[i];
    }
  }
  if (den == 0.0 || ref_sq == 0.0) throw DegenerateError("reference image has zero norm");
  ImageMetrics m;
  m.rmse_percent = 100.0 * std::sqrt(num / den);
  m.nmse = sq / ref_sq;
  const double mse = sq / static_cast<double>(x.size());
  const double peak = *std::max_element(reference.data().begin(), reference.data().end());
  m.psnr = mse == 0.0 ? psnr_cap : std::min(psnr_cap, 20.0 * std::log10(peak / std::sqrt(mse)));
  return m;
}

/// Masked RMSE% between two samples, normalized by the reference.
inline double pair_rmse_percent(const RealArray& a, const RealArray& b, const RealArray& reference, const Mask& mask) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask[i]) continue;
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += reference[i] * reference[i];
  }
  if (den == 0.0) throw DegenerateError("reference image has zero norm under the mask");
  return 100.0 * std::sqrt(num / den);
}

struct PairwiseRmse {
  double mean = 0.0;
  /// Sample standard deviation over pairs (zero for a single pair).
  double std = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> values;
};

/// `count` random pairs (i < j, drawn with replacement among pairs).
inline std::vector<std::pair<std::size_t, std::size_t>> draw_pairs(std::size_t n, std::size_t count, Philox& rng) {
  if (n < 2) throw ConfigError("pairwise metrics need at least two samples");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto i = static_cast<std::size_t>(rng.uniform_index(n));
    auto j = static_cast<std::size_t>(rng.uniform_index(n - 1));
    if (j >= i) ++j;
    out.emplace_back(std::min(i, j), std::max(i, j));
  }
  return out;
}

inline PairwiseRmse pairwise_rmse(const std::vector<RealArray>& samples, const RealArray& reference, const Mask& mask,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  if (samples.size() < 2) throw ConfigError("pairwise RMSE needs at least two samples");
  if (pairs.empty()) throw ConfigError("pairwise RMSE needs at least one pair");
  for (const auto& s : samples) require_shape(s.shape(), reference.shape(), "pairwise sample");
  require_shape(mask.shape(), reference.shape(), "pairwise mask");
  PairwiseRmse out;
  out.pairs = pairs;
  for (const auto& [i, j] : pairs) {
    if (i >= samples.size() || j >= samples.size() || i == j) throw ConfigError("invalid sample pair");
    out.values.push_back(pair_rmse_percent(samples[i], samples[j], reference, mask));
  }
  const double n = static_cast<double>(out.values.size());
  out.mean = std::accumulate(out.values.begin(), out.values.end(), 0.0) / n;
  if (out.values.size() > 1) {
    double ss = 0.0;
    for (double v : out.values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / (n - 1.0));
  }
  return out;
}

inline PairwiseRmse pairwise_rmse(const std::vector<RealArray>& samples, const RealArray& reference, const Mask& mask,
                                  std::size_t count, Philox& rng) {
  return pairwise_rmse(samples, reference, mask, draw_pairs(samples.size(), count, rng));
}

/// Welford running mean and unbiased variance per pixel.
class RunningMoments {
 public:
  explicit RunningMoments(const Shape& shape) : mean_(shape), m2_(shape) {}

  void add(const RealArray& x) {
    require_shape(x.shape(), mean_.shape(), "running moments");
    ++count_;
    const double n = static_cast<double>(count_);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - mean_[i];
      mean_[i] += d / n;
      m2_[i] += d * (x[i] - mean_[i]);
    }
  }

  std::size_t count() const { return count_; }
  const RealArray& mean() const { return mean_; }
  RealArray std() const {
    RealArray s(mean_.shape());
    if (count_ < 2) return s;
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(std::max(0.0, m2_[i] / static_cast<double>(count_ - 1)));
    return s;
  }

 private:
  RealArray mean_, m2_;
  std::size_t count_ = 0;
};

struct PixelHistogram {
  std::size_t row = 0, col = 0;
  std::vector<double> values;
  double lo = 0.0, hi = 0.0;
  std::vector<std::size_t> counts;
};

struct SampleStatistics {
  RealArray mean;
  RealArray std;
  std::vector<PixelHistogram> histograms;
};

/// Pixelwise mean and unbiased std over samples, plus value histograms at the
/// query pixels (bins spanning the observed range).
inline SampleStatistics sample_statistics(const std::vector<RealArray>& samples,
                                          const std::vector<std::pair<std::size_t, std::size_t>>& query = {},
                                          std::size_t bins = 20) {
  if (samples.size() < 2) throw ConfigError("sample statistics need at least two samples");
  if (samples.front().rank() != 2) throw ShapeError("sample statistics expect 2D images");
  RunningMoments acc(samples.front().shape());
  for (const auto& s : samples) acc.add(s);
  SampleStatistics out{acc.mean(), acc.std(), {}};
  const std::size_t w = samples.front().dim(1);
  for (const auto& [r, c] : query) {
    if (r >= samples.front().dim(0) || c >= w) throw ShapeError("histogram pixel outside the image");
    PixelHistogram h{r, c, {}, 0.0, 0.0, std::vector<std::size_t>(std::max<std::size_t>(bins, 1), 0)};
    for (const auto& s : samples) h.values.push_back(s[r * w + c]);
    const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
    h.lo = *lo;
    h.hi = *hi;
    const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
    for (double v : h.values) {
      std::size_t b = width > 0.0 ? static_cast<std::size_t>((v - h.lo) / width) : 0;
      ++h.counts[std::min(b, h.counts.size() - 1)];
    }
    out.histograms.push_back(std::move(h));
  }
  return out;
}

/// Ratio of the std map's mean squared finite difference along the
/// undersampled axis to that along the other axis, over neighbour pairs inside
/// the mask. Values above 1 mean uncertainty structure is elongated across the
/// undersampled direction. A zero map gives 1.
inline double directionality_statistic(const RealArray& std_map, const Mask& mask, std::size_t undersampled_axis = 0) {
  if (std_map.rank() != 2) throw ShapeError("directionality needs a 2D std map");
  require_shape(mask.shape(), std_map.shape(), "directionality mask");
  if (undersampled_axis > 1) throw ConfigError("undersampled axis must be 0 or 1");
  const std::size_t h = std_map.dim(0), w = std_map.dim(1);
  double e[2] = {0.0, 0.0};
  std::size_t n[2] = {0, 0};
  bool any = false;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t p = i * w + j;
      if (!mask[p]) continue;
      any = true;
      if (i + 1 < h && mask[p + w]) {
        const double d = std_map[p + w] - std_map[p];
        e[0] += d * d;
        ++n[0];
      }
      if (j + 1 < w && mask[p + 1]) {
        const double d = std_map[p + 1] - std_map[p];
        e[1] += d * d;
        ++n[1];
      }
    }
  if (!any) throw ConfigError("directionality mask is empty");
  const double along = n[undersampled_axis] ? e[undersampled_axis] / static_cast<double>(n[undersampled_axis]) : 0.0;
  const double across = n[1 - undersampled_axis] ? e[1 - undersampled_axis] / static_cast<double>(n[1 - undersampled_axis]) : 0.0;
  if (along == 0.0 && across == 0.0) return 1.0;
  if (across == 0.0) return std::numeric_limits<double>::infinity();
  return along / across;
}

/// Pixels above `fraction` of the reference's 99th-percentile magnitude,
/// followed by a 3x3 morphological closing.
inline Mask foreground_mask(const RealArray& reference, double fraction = 0.1) {
  if (reference.rank() != 2) throw ShapeError("foreground mask needs a 2D image");
  std::vector<double> mags(reference.size());
  for (std::size_t i = 0; i < mags.size(); ++i) mags[i] = std::abs(reference[i]);
  std::vector<double> sorted = mags;
  const auto k = static_cast<std::size_t>(std::floor(0.99 * static_cast<double>(sorted.size() - 1)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
  const double threshold = fraction * sorted[k];
  const std::size_t h = reference.dim(0), w = reference.dim(1);
  Mask m(reference.shape());
  for (std::size_t i = 0; i < mags.size(); ++i) m[i] = mags[i] > threshold ? 1 : 0;
  auto morph = [&](const Mask& in, bool dilate) {
    Mask out(in.shape());
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        bool v = !dilate;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<long>(h) && jj < static_cast<long>(w);
            const bool px = inside && in[static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj)];
            // Outside the frame counts as background for dilation and as
            // foreground for erosion, so closing never shrinks at the border.
            v = dilate ? (v || px) : (v && (px || !inside));
          }
        out[i * w + j] = v ? 1 : 0;
      }
    return out;
  };
  return morph(morph(m, true), false);
}

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sample std of a list of values.
inline Aggregate aggregate(const std::vector<double>& v) {
  Aggregate a;
  if (v.empty()) return a;
  a.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return a;
}

struct MetricsReport {
  std::vector<double> kspace_error;
  std::vector<double> rmse_percent;
  std::vector<double> nmse;
  std::vector<double> psnr;
  Aggregate kspace_error_agg, rmse_agg, nmse_agg, psnr_agg;
  PairwiseRmse pairwise;
  RealArray mean_map;
  RealArray std_map;
  double directionality = 1.0;
};

/// Metrics of a set of magnitude samples against the reference. Per-sample
/// k-space errors need the encoding, so the caller supplies them (or nothing).
inline MetricsReport evaluate_samples(const std::vector<RealArray>& samples, const RealArray& reference,
                                      const Mask& mask, std::size_t pair_count, std::uint64_t seed,
                                      const std::vector<double>& kspace_errors = {}) {
  MetricsReport r;
  for (const auto& s : samples) {
    const auto m = image_metrics(s, reference, mask);
    r.rmse_percent.push_back(m.rmse_percent);
    r.nmse.push_back(m.nmse);
    r.psnr.push_back(m.psnr);
  }
  r.kspace_error = kspace_errors;
  r.kspace_error_agg = aggregate(r.kspace_error);
  r.rmse_agg = aggregate(r.rmse_percent);
  r.nmse_agg = aggregate(r.nmse);
  r.psnr_agg = aggregate(r.psnr);
  if (samples.size() >= 2) {
    Philox rng(seed, 0x9a1e);
    r.pairwise = pairwise_rmse(samples, reference, mask, pair_count, rng);
    const auto stats = sample_statistics(samples);
    r.mean_map = stats.mean;
    r.std_map = stats.std;
    r.directionality = directionality_statistic(r.std_map, mask, 0);
  }
  return r;
}

}  // namespace lms
