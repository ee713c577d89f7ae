#pragma once

#include <cmath>
#include <vector>

#include "lms/cg.hpp"
#include "lms/decoder.hpp"
#include "lms/posterior.hpp"
#include "lms/random.hpp"

namespace lms {

struct ImageSample {
  /// Complex image on the decoder intensity scale (scale and bias removed).
  ComplexArray image;
  RealArray magnitude;
  /// bias * magnitude.
  RealArray biased;
  double scale = 1.0;
  std::size_t step = 0;
  double log_post = 0.0;
  double cg_residual = 0.0;
};

/// Mean of p(x | z, y) for the decoder mean `mu` at scale s:
///   (I / v + s^2 E^H Sn^-1 E) x = mu / v + s E^H Sn^-1 y,
/// the k-space posterior restricted to k = E_F x. Where E_F is unitary this is
/// the same as solving for k over the whole grid and mapping back.
inline ImageSample image_from_mean(const PosteriorTarget& target, const ComplexArray& mu, double scale,
                                   const CgConfig& cg) {
  const double v = target.decoder->output_variance();
  ComplexArray rhs = scale * target.backprojected_data();
  axpy(1.0 / v, mu, rhs);
  const auto solve = cg_solve(marginal_system(target, scale), rhs, cg);
  ImageSample out;
  out.image = solve.solution;
  if (!out.image.all_finite()) throw NumericalError("image step produced non-finite values", 0);
  out.magnitude = magnitude(out.image);
  out.biased = out.magnitude;
  const RealArray& bias = target.encoding.bias;
  if (bias.size() == out.biased.size())
    for (std::size_t i = 0; i < out.biased.size(); ++i) out.biased[i] *= bias[i];
  out.scale = scale;
  out.cg_residual = solve.relative_residual;
  return out;
}

inline ImageSample latent_to_image(const PosteriorTarget& target, const RealArray& z, const CgConfig& cg = {100}) {
  const ComplexArray mu = target.decoder->decode(z);
  return image_from_mean(target, mu, resolve_scale(target, mu), cg);
}

/// Image samples for every retained latent of a chain.
inline std::vector<ImageSample> latents_to_images(const PosteriorTarget& target, const std::vector<RealArray>& zs,
                                                  const std::vector<std::size_t>& steps = {},
                                                  const std::vector<double>& log_post = {},
                                                  const CgConfig& cg = {100}) {
  std::vector<ImageSample> out;
  out.reserve(zs.size());
  for (std::size_t i = 0; i < zs.size(); ++i) {
    out.push_back(latent_to_image(target, zs[i], cg));
    if (i < steps.size()) out.back().step = steps[i];
    if (i < log_post.size()) out.back().log_post = log_post[i];
  }
  return out;
}

/// Baseline: the decoder mean itself, without any data term.
inline ComplexArray decoder_only_sample(const DecoderModel& decoder, const RealArray& z) { return decoder.decode(z); }

/// Baseline: decode draws from the encoder distribution q(z | x_ref).
inline std::vector<ComplexArray> local_sampler(const EncoderModel& encoder, const DecoderModel& decoder,
                                               const ComplexArray& x_ref, std::size_t count, Philox& rng) {
  if (count < 1) throw ConfigError("local sampler needs count >= 1");
  const EncoderOutput q = encoder.encode(magnitude(x_ref));
  std::vector<ComplexArray> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    RealArray z = q.mean;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += std::exp(q.log_std[i]) * rng.normal();
    out.push_back(decoder.decode(z));
  }
  return out;
}

}  // namespace lms
