#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "lms/autodiff.hpp"
#include "lms/decoder.hpp"
#include "lms/errors.hpp"
#include "lms/random.hpp"

namespace lms {

struct TrainingConfig {
  int iterations = 2000;
  int batch_size = 8;
  double learning_rate = 0.002;
  /// Random translations are drawn from [-shift_range, shift_range] per axis.
  int shift_range = 4;
  double kl_weight = 1.0;
  std::uint64_t seed = 1;
  /// Images used for the fixed ELBO / reconstruction evaluation.
  int eval_images = 32;
  /// Record an evaluation every this many iterations (0: only first and last).
  int eval_every = 0;

  void validate() const {
    if (iterations < 1 || batch_size < 1 || !(learning_rate > 0.0) || shift_range < 0 || !(kl_weight > 0.0) ||
        eval_images < 1 || eval_every < 0) {
      throw ConfigError("invalid training configuration");
    }
  }
};

struct TrainingReport {
  double initial_elbo = 0.0;
  double final_elbo = 0.0;
  double initial_rmse = 0.0;
  double final_rmse = 0.0;
  /// (iteration, mean ELBO per image on the evaluation set).
  std::vector<std::pair<int, double>> elbo_trace;
};

struct TrainedVae {
  ConvEncoder encoder;
  ConvDecoder decoder;
  TrainingReport report;
};

/// KL[N(mean, diag(exp(log_std)^2)) || N(0, I)].
inline ad::Var gaussian_kl(ad::Var mean, ad::Var log_std) {
  ad::Tape& t = *mean.tape();
  const double n = static_cast<double>(mean.value().size());
  auto two_ls = ad::scale(log_std, 2.0);
  auto total = ad::add(ad::dot(mean, mean), ad::sum(ad::exp(two_ls)));
  total = ad::sub(total, ad::sum(two_ls));
  total = ad::sub(total, t.constant(RealArray({}, n)));
  return ad::scale(total, 0.5);
}

/// log N(x; mean, variance * I) for real images, constants included.
inline ad::Var gaussian_log_likelihood(ad::Var x, ad::Var mean, double variance) {
  ad::Tape& t = *x.tape();
  const double n = static_cast<double>(x.value().size());
  auto r = ad::sub(x, mean);
  auto quad = ad::scale(ad::dot(r, r), -0.5 / variance);
  return ad::add(quad, t.constant(RealArray({}, -0.5 * n * std::log(2.0 * std::numbers::pi * variance))));
}

/// Translate an image by (dy, dx) with zero fill.
inline RealArray shift_image(const RealArray& x, int dy, int dx) {
  const int h = static_cast<int>(x.dim(0)), w = static_cast<int>(x.dim(1));
  RealArray out(x.shape());
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const int si = i - dy, sj = j - dx;
      if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
      out[static_cast<std::size_t>(i * w + j)] = x[static_cast<std::size_t>(si * w + sj)];
    }
  return out;
}

namespace detail {

struct VaeGraph {
  std::vector<ad::Var> enc_w;
  std::vector<ad::Var> dec_w;
};

inline std::vector<ad::Var> as_variables(ad::Tape& tape, const ParameterList& params) {
  std::vector<ad::Var> out;
  for (const auto& p : params) out.push_back(tape.variable(p.second));
  return out;
}

/// ELBO of one image with a given reparameterization noise.
inline ad::Var image_elbo(const ConvEncoder& enc, const ConvDecoder& dec, const VaeGraph& g, ad::Var x,
                          const RealArray& eps, double kl_weight) {
  ad::Tape& t = *x.tape();
  auto [mean, log_std] = enc.forward_with(x, g.enc_w);
  auto z = ad::add(mean, ad::mul(ad::exp(log_std), t.constant(eps)));
  auto recon = gaussian_log_likelihood(x, dec.forward_with(z, g.dec_w), dec.output_variance());
  return ad::sub(recon, ad::scale(gaussian_kl(mean, log_std), kl_weight));
}

struct Evaluation {
  double elbo = 0.0;
  double rmse = 0.0;
};

inline Evaluation evaluate_vae(const ConvEncoder& enc, const ConvDecoder& dec, const std::vector<RealArray>& eval,
                               const std::vector<RealArray>& eps, double kl_weight) {
  Evaluation out;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    ad::Tape t;
    VaeGraph g{as_constants(t, enc.parameters()), as_constants(t, dec.parameters())};
    out.elbo += image_elbo(enc, dec, g, t.constant(eval[i]), eps[i], kl_weight).scalar();
    const RealArray recon = dec.decode_real(enc.encode(eval[i]).mean);
    out.rmse += norm(recon - eval[i]) / std::sqrt(static_cast<double>(eval[i].size()));
  }
  out.elbo /= static_cast<double>(eval.size());
  out.rmse /= static_cast<double>(eval.size());
  return out;
}

}  // namespace detail

/// Stochastic gradient ascent on the ELBO with the reparameterization trick
/// and random translations. The step uses the batch-mean ELBO per pixel.
inline TrainedVae train_toy_vae(const std::vector<RealArray>& dataset, const ConvArchitecture& arch,
                                const TrainingConfig& cfg, double output_variance = 0.02) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training set is empty");
  for (const auto& x : dataset) require_shape(x.shape(), arch.image_shape(), "training image");

  ConvEncoder enc = ConvEncoder::initialize(arch, cfg.seed);
  ConvDecoder dec = ConvDecoder::initialize(arch, cfg.seed);
  dec.set_output_variance(output_variance);

  const std::size_t n_eval = std::min<std::size_t>(static_cast<std::size_t>(cfg.eval_images), dataset.size());
  const std::vector<RealArray> eval(dataset.begin(), dataset.begin() + static_cast<std::ptrdiff_t>(n_eval));
  std::vector<RealArray> eval_eps;
  Philox eval_rng(cfg.seed, 0xe7a1);
  for (std::size_t i = 0; i < n_eval; ++i) eval_eps.push_back(eval_rng.normal_array(arch.latent_shape()));

  TrainedVae out{enc, dec, {}};
  const auto first = detail::evaluate_vae(enc, dec, eval, eval_eps, cfg.kl_weight);
  out.report.initial_elbo = first.elbo;
  out.report.initial_rmse = first.rmse;
  out.report.elbo_trace.emplace_back(0, first.elbo);

  Philox rng(cfg.seed, 0x7a1);
  const double pixels = static_cast<double>(shape_size(arch.image_shape()));
  const double step = cfg.learning_rate / (pixels * cfg.batch_size);
  for (int it = 1; it <= cfg.iterations; ++it) {
    ad::Tape t;
    detail::VaeGraph g{detail::as_variables(t, enc.parameters()), detail::as_variables(t, dec.parameters())};
    ad::Var total = t.constant(RealArray({}, 0.0));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto idx = static_cast<std::size_t>(rng.uniform_index(dataset.size()));
      const int span = 2 * cfg.shift_range + 1;
      const int dy = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(span))) - cfg.shift_range;
      const int dx = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(span))) - cfg.shift_range;
      const RealArray x = shift_image(dataset[idx], dy, dx);
      const RealArray eps = rng.normal_array(arch.latent_shape());
      total = ad::add(total, detail::image_elbo(enc, dec, g, t.constant(x), eps, cfg.kl_weight));
    }
    if (!std::isfinite(total.scalar())) throw TrainingError("ELBO diverged", static_cast<std::size_t>(it));
    std::vector<ad::Var> all = g.enc_w;
    all.insert(all.end(), g.dec_w.begin(), g.dec_w.end());
    const auto grads = t.gradients(total, all);
    auto& ep = enc.mutable_parameters();
    auto& dp = dec.mutable_parameters();
    for (std::size_t k = 0; k < grads.size(); ++k) {
      RealArray& target = k < ep.size() ? ep[k].second : dp[k - ep.size()].second;
      for (std::size_t i = 0; i < target.size(); ++i) {
        const double gi = grads[k][i];
        if (!std::isfinite(gi)) throw TrainingError("non-finite gradient", static_cast<std::size_t>(it));
        target[i] += step * gi;
      }
    }
    if (cfg.eval_every > 0 && it % cfg.eval_every == 0 && it != cfg.iterations) {
      out.report.elbo_trace.emplace_back(it, detail::evaluate_vae(enc, dec, eval, eval_eps, cfg.kl_weight).elbo);
    }
  }

  const auto last = detail::evaluate_vae(enc, dec, eval, eval_eps, cfg.kl_weight);
  if (!std::isfinite(last.elbo)) throw TrainingError("ELBO diverged", static_cast<std::size_t>(cfg.iterations));
  out.report.final_elbo = last.elbo;
  out.report.final_rmse = last.rmse;
  out.report.elbo_trace.emplace_back(cfg.iterations, last.elbo);
  out.encoder = std::move(enc);
  out.decoder = std::move(dec);
  return out;
}

}  // namespace lms
