#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "lms/array.hpp"
#include "lms/decoder.hpp"
#include "lms/errors.hpp"
#include "lms/random.hpp"

namespace lms {

// ---- Kolmogorov-Smirnov against N(0, 1) ------------------------------------

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// sup |F_n - Phi| of the sample.
inline double ks_statistic(std::vector<double> sample) {
  if (sample.empty()) throw ConfigError("KS statistic of an empty sample");
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double f = standard_normal_cdf(sample[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

/// Asymptotic two-sided p-value: Q(sqrt(n) D) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2),
/// truncated at 100 terms.
inline double ks_p_value(double d, std::size_t n) {
  const double lambda = std::sqrt(static_cast<double>(n)) * d;
  if (lambda < 0.2) return 1.0;
  double q = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    q += (k % 2 == 1 ? 2.0 : -2.0) * term;
  }
  return std::clamp(q, 0.0, 1.0);
}

/// Per-channel KS statistics of latent samples [D, L1, L2], pooled over
/// spatial positions and samples.
inline std::vector<double> channel_ks_statistics(const std::vector<RealArray>& samples) {
  if (samples.empty()) throw ConfigError("no latent samples");
  const Shape& s = samples.front().shape();
  if (s.size() != 3) throw ShapeError("latent samples must be D x L1 x L2");
  const std::size_t d = s[0], plane = s[1] * s[2];
  std::vector<double> out(d);
  for (std::size_t c = 0; c < d; ++c) {
    std::vector<double> pooled;
    pooled.reserve(samples.size() * plane);
    for (const auto& z : samples) {
      require_shape(z.shape(), s, "latent sample");
      pooled.insert(pooled.end(), z.data().begin() + static_cast<std::ptrdiff_t>(c * plane),
                    z.data().begin() + static_cast<std::ptrdiff_t>((c + 1) * plane));
    }
    out[c] = ks_statistic(std::move(pooled));
  }
  return out;
}

/// Channels ordered from least to most unit-Gaussian. Sorting by decreasing
/// statistic is the same as by increasing p-value at a common sample size, and
/// stays strict where the p-values underflow to zero.
inline std::vector<std::size_t> rank_channels(const std::vector<double>& ks_stats) {
  std::vector<std::size_t> order(ks_stats.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ks_stats[a] > ks_stats[b]; });
  return order;
}

// ---- block-diagonal Gaussian prior -----------------------------------------

struct PriorBlock {
  /// Flat latent indices covered by the block.
  std::vector<std::size_t> indices;
  Eigen::MatrixXd cov;
  Eigen::MatrixXd chol;  // lower factor L with cov = L L^T
  Eigen::MatrixXd precision;
};

inline PriorBlock make_block(std::vector<std::size_t> indices, Eigen::MatrixXd cov) {
  PriorBlock b;
  b.indices = std::move(indices);
  b.cov = 0.5 * (cov + cov.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(b.cov);
  if (llt.info() != Eigen::Success) throw RankError("prior block is not positive definite");
  b.chol = llt.matrixL();
  b.precision = llt.solve(Eigen::MatrixXd::Identity(b.cov.rows(), b.cov.cols()));
  b.precision = 0.5 * (b.precision + b.precision.transpose());
  return b;
}

/// N(mean, Sigma) with Sigma block diagonal over latent indices.
class EmpiricalPrior {
 public:
  EmpiricalPrior() = default;
  EmpiricalPrior(RealArray mean, std::vector<PriorBlock> blocks, std::vector<std::size_t> channel_rank = {},
                 std::size_t joint_channels = 0)
      : mean_(std::move(mean)),
        blocks_(std::move(blocks)),
        channel_rank_(std::move(channel_rank)),
        joint_channels_(joint_channels) {
    std::vector<int> seen(mean_.size(), 0);
    for (const auto& b : blocks_)
      for (auto i : b.indices) {
        if (i >= seen.size()) throw ShapeError("prior block index out of range");
        ++seen[i];
      }
    for (int s : seen)
      if (s != 1) throw ShapeError("prior blocks must partition the latent indices");
  }

  /// N(0, I) over a latent shape, one block per channel.
  static EmpiricalPrior standard_normal(const Shape& latent) {
    const std::size_t plane = latent.size() == 3 ? latent[1] * latent[2] : shape_size(latent);
    const std::size_t d = shape_size(latent) / plane;
    std::vector<PriorBlock> blocks;
    std::vector<std::size_t> rank(d);
    for (std::size_t c = 0; c < d; ++c) {
      std::vector<std::size_t> idx(plane);
      std::iota(idx.begin(), idx.end(), c * plane);
      blocks.push_back(make_block(std::move(idx), Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(plane),
                                                                            static_cast<Eigen::Index>(plane))));
      rank[c] = c;
    }
    return EmpiricalPrior(RealArray(latent), std::move(blocks), rank, 0);
  }

  const RealArray& mean() const { return mean_; }
  const Shape& latent_shape() const { return mean_.shape(); }
  const std::vector<PriorBlock>& blocks() const { return blocks_; }
  const std::vector<std::size_t>& channel_rank() const { return channel_rank_; }
  std::size_t joint_channels() const { return joint_channels_; }

  /// -1/2 (z - mean)^T P (z - mean); drops the normalizing constant.
  double logpdf(const RealArray& z) const {
    require_shape(z.shape(), mean_.shape(), "prior logpdf");
    double acc = 0.0;
    for (const auto& b : blocks_) {
      const Eigen::VectorXd r = residual(b, z);
      acc += r.dot(b.precision * r);
    }
    return -0.5 * acc;
  }

  /// Fully normalized log density.
  double log_density(const RealArray& z) const {
    double log_det = 0.0;
    for (const auto& b : blocks_) log_det += 2.0 * b.chol.diagonal().array().log().sum();
    return logpdf(z) - 0.5 * log_det - 0.5 * static_cast<double>(mean_.size()) * std::log(2.0 * std::numbers::pi);
  }

  /// -P (z - mean).
  RealArray grad(const RealArray& z) const {
    require_shape(z.shape(), mean_.shape(), "prior gradient");
    RealArray g(z.shape());
    for (const auto& b : blocks_) {
      const Eigen::VectorXd v = -(b.precision * residual(b, z));
      scatter(b, v, g);
    }
    return g;
  }

  RealArray apply_covariance(const RealArray& v) const { return apply(v, [](const PriorBlock& b) -> const Eigen::MatrixXd& { return b.cov; }); }
  RealArray apply_precision(const RealArray& v) const {
    return apply(v, [](const PriorBlock& b) -> const Eigen::MatrixXd& { return b.precision; });
  }

  RealArray sample(Philox& rng) const {
    RealArray z = mean_;
    for (const auto& b : blocks_) {
      Eigen::VectorXd e(static_cast<Eigen::Index>(b.indices.size()));
      for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = rng.normal();
      const Eigen::VectorXd v = b.chol * e;
      for (std::size_t i = 0; i < b.indices.size(); ++i) z[b.indices[i]] += v(static_cast<Eigen::Index>(i));
    }
    return z;
  }

  /// Dense covariance over the flattened latent (for tests and small problems).
  Eigen::MatrixXd dense_covariance() const {
    const auto n = static_cast<Eigen::Index>(mean_.size());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
    for (const auto& b : blocks_)
      for (std::size_t i = 0; i < b.indices.size(); ++i)
        for (std::size_t j = 0; j < b.indices.size(); ++j)
          out(static_cast<Eigen::Index>(b.indices[i]), static_cast<Eigen::Index>(b.indices[j])) =
              b.cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return out;
  }

  Eigen::MatrixXd dense_precision() const {
    const auto n = static_cast<Eigen::Index>(mean_.size());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
    for (const auto& b : blocks_)
      for (std::size_t i = 0; i < b.indices.size(); ++i)
        for (std::size_t j = 0; j < b.indices.size(); ++j)
          out(static_cast<Eigen::Index>(b.indices[i]), static_cast<Eigen::Index>(b.indices[j])) =
              b.precision(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return out;
  }

  /// True when every block re-factorizes as symmetric positive definite.
  bool blocks_spd() const {
    for (const auto& b : blocks_) {
      if ((b.cov - b.cov.transpose()).norm() > 1e-12 * b.cov.norm()) return false;
      Eigen::LLT<Eigen::MatrixXd> llt(b.cov);
      if (llt.info() != Eigen::Success) return false;
    }
    return true;
  }

 private:
  Eigen::VectorXd residual(const PriorBlock& b, const RealArray& z) const {
    Eigen::VectorXd r(static_cast<Eigen::Index>(b.indices.size()));
    for (std::size_t i = 0; i < b.indices.size(); ++i) r(static_cast<Eigen::Index>(i)) = z[b.indices[i]] - mean_[b.indices[i]];
    return r;
  }

  static void scatter(const PriorBlock& b, const Eigen::VectorXd& v, RealArray& out) {
    for (std::size_t i = 0; i < b.indices.size(); ++i) out[b.indices[i]] = v(static_cast<Eigen::Index>(i));
  }

  template <typename Pick>
  RealArray apply(const RealArray& v, Pick pick) const {
    require_shape(v.shape(), mean_.shape(), "prior apply");
    RealArray out(v.shape());
    for (const auto& b : blocks_) {
      Eigen::VectorXd x(static_cast<Eigen::Index>(b.indices.size()));
      for (std::size_t i = 0; i < b.indices.size(); ++i) x(static_cast<Eigen::Index>(i)) = v[b.indices[i]];
      scatter(b, pick(b) * x, out);
    }
    return out;
  }

  RealArray mean_;
  std::vector<PriorBlock> blocks_;
  std::vector<std::size_t> channel_rank_;
  std::size_t joint_channels_ = 0;
};

/// Fit the block-diagonal prior to latent samples [D, L1, L2]: one joint block
/// over the `joint_channels` least Gaussian channels, one spatial block per
/// remaining channel. Each block gets eps * I added, eps = 1e-6 * mean diagonal.
inline EmpiricalPrior fit_empirical_prior(const std::vector<RealArray>& samples, std::size_t joint_channels) {
  if (samples.empty()) throw ConfigError("no latent samples");
  const Shape shape = samples.front().shape();
  if (shape.size() != 3) throw ShapeError("latent samples must be D x L1 x L2");
  const std::size_t d = shape[0], plane = shape[1] * shape[2];
  if (joint_channels > d) throw ConfigError("joint channel count exceeds latent channels");
  const std::size_t largest = std::max(joint_channels * plane, plane);
  if (samples.size() < largest) {
    throw RankError("need at least " + std::to_string(largest) + " samples for full-rank blocks, got " +
                    std::to_string(samples.size()));
  }

  RealArray mean(shape);
  for (const auto& z : samples) {
    require_shape(z.shape(), shape, "latent sample");
    axpy(1.0, z, mean);
  }
  mean = (1.0 / static_cast<double>(samples.size())) * mean;

  const std::vector<std::size_t> rank = rank_channels(channel_ks_statistics(samples));

  auto estimate = [&](std::vector<std::size_t> idx) {
    const auto k = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd r(k);
    for (const auto& z : samples) {
      for (Eigen::Index i = 0; i < k; ++i) r(i) = z[idx[static_cast<std::size_t>(i)]] - mean[idx[static_cast<std::size_t>(i)]];
      cov.selfadjointView<Eigen::Lower>().rankUpdate(r);
    }
    cov = cov.selfadjointView<Eigen::Lower>();
    cov /= static_cast<double>(samples.size() > 1 ? samples.size() - 1 : 1);
    const double eps = 1e-6 * cov.diagonal().mean();
    cov.diagonal().array() += eps > 0.0 ? eps : 1e-12;
    return make_block(std::move(idx), cov);
  };

  std::vector<PriorBlock> blocks;
  if (joint_channels > 0) {
    std::vector<std::size_t> idx;
    for (std::size_t r = 0; r < joint_channels; ++r)
      for (std::size_t p = 0; p < plane; ++p) idx.push_back(rank[r] * plane + p);
    blocks.push_back(estimate(std::move(idx)));
  }
  for (std::size_t r = joint_channels; r < d; ++r) {
    std::vector<std::size_t> idx(plane);
    std::iota(idx.begin(), idx.end(), rank[r] * plane);
    blocks.push_back(estimate(std::move(idx)));
  }
  return EmpiricalPrior(std::move(mean), std::move(blocks), rank, joint_channels);
}

/// Draw `count` samples z ~ q(z|x_i), cycling through the dataset, and fit the
/// empirical prior to them.
inline EmpiricalPrior estimate_empirical_prior(const EncoderModel& encoder, const std::vector<RealArray>& dataset,
                                               std::size_t count, std::size_t joint_channels, std::uint64_t seed) {
  if (dataset.empty()) throw ConfigError("dataset is empty");
  std::vector<EncoderOutput> encoded;
  encoded.reserve(dataset.size());
  for (const auto& x : dataset) encoded.push_back(encoder.encode(x));
  Philox rng(seed, 0x9e1);
  std::vector<RealArray> samples;
  samples.reserve(count);
  for (std::size_t t = 0; t < count; ++t) {
    const auto& q = encoded[t % encoded.size()];
    RealArray z = q.mean;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += std::exp(q.log_std[i]) * rng.normal();
    samples.push_back(std::move(z));
  }
  return fit_empirical_prior(samples, joint_channels);
}

}  // namespace lms
