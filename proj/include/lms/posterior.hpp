#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "lms/autodiff.hpp"
#include "lms/cg.hpp"
#include "lms/decoder.hpp"
#include "lms/encoding.hpp"
#include "lms/errors.hpp"
#include "lms/prior.hpp"

namespace lms {

enum class ScalePolicy {
  /// Re-estimate s* from the current decoder mean at every evaluation.
  PerEvaluation,
  /// Use PosteriorTarget::fixed_scale throughout.
  Fixed,
};

/// Unnormalized latent posterior log p(y|z) + log p(z).
///
/// `encoding` must be built with unit scale; the scale enters as a scalar on
/// top of it.
struct PosteriorTarget {
  std::shared_ptr<const DecoderModel> decoder;
  EmpiricalPrior prior;
  Encoding encoding;
  ComplexArray data;
  CgConfig cg;
  ScalePolicy scale_policy = ScalePolicy::PerEvaluation;
  double fixed_scale = 1.0;
  double likelihood_weight = 1.0;
  double prior_weight = 1.0;
  /// Relative CG residual above which an evaluation is flagged.
  double residual_threshold = 1e-4;

  /// E^H Sigma_ns^{-1} y for the unit-scale encoding.
  const ComplexArray& backprojected_data() const {
    if (!backprojected_) {
      backprojected_ = std::make_shared<const ComplexArray>(
          encoding.encode.adjoint(encoding.noise_precision.apply(data)));
    }
    return *backprojected_;
  }

  void validate() const {
    if (!decoder) throw ConfigError("posterior target has no decoder");
    require_shape(decoder->output_shape(), encoding.encode.domain_shape(), "decoder output vs encoding domain");
    require_shape(data.shape(), encoding.encode.codomain_shape(), "k-space data");
    if (likelihood_weight != 0.0 || prior_weight != 0.0) {
      require_shape(prior.latent_shape(), decoder->latent_shape(), "prior latent shape");
    }
    if (cg.iterations < 1) throw ConfigError("CG iterations must be >= 1");
    if (scale_policy == ScalePolicy::Fixed && !(fixed_scale > 0.0)) throw ConfigError("fixed scale must be positive");
  }

 private:
  mutable std::shared_ptr<const ComplexArray> backprojected_;
};

struct PosteriorEvaluation {
  double log_post = 0.0;
  double log_likelihood = 0.0;
  double log_prior = 0.0;
  RealArray grad;
  double scale_used = 1.0;
  double cg_residual = 0.0;
  bool residual_warning = false;
};

/// Tape-recorded log p(y|z) and the quantities used to build it.
struct LikelihoodNodes {
  ad::Var value;
  ad::Var mean_image;
  double scale = 1.0;
  double cg_residual = 0.0;
};

/// Scale for the decoder mean `mu` under the target's policy.
inline double resolve_scale(const PosteriorTarget& target, const ComplexArray& mu) {
  if (target.scale_policy == ScalePolicy::Fixed) return target.fixed_scale;
  const double s = estimate_scale(mu, target.encoding.encode, target.data);
  if (!(s > 0.0) || !std::isfinite(s)) {
    throw DegenerateError("estimated scale " + std::to_string(s) + " is not positive");
  }
  return s;
}

/// Normal matrix Sigma_x^{-1} I + s^2 E^H Sigma_ns^{-1} E of the marginal likelihood.
inline LinearOperator marginal_system(const PosteriorTarget& target, double scale) {
  const auto& enc = target.encoding;
  const LinearOperator gram = compose(enc.encode.adjoint_operator(), compose(enc.noise_precision, enc.encode));
  return linear_combination(1.0 / target.decoder->output_variance(), identity_operator(enc.encode.domain_shape()),
                            scale * scale, gram);
}

/// log p(y|z) up to a z-independent constant, for circular complex Gaussian
/// noise and decoder:
///   mu^H Sx^-1 g + 2 Re{y^H Sn^-1 E g} - mu^H Sx^-1 mu,
///   g = CG(Sx^-1 + E^H Sn^-1 E, Sx^-1 mu).
inline LikelihoodNodes log_likelihood(const PosteriorTarget& target, ad::Tape& tape, ad::Var z) {
  const double inv_var = 1.0 / target.decoder->output_variance();
  LikelihoodNodes out;
  out.mean_image = ad::to_complex(target.decoder->forward(tape, z));
  out.scale = resolve_scale(target, out.mean_image.complex_value());
  const auto solve = ad::cg_solve(marginal_system(target, out.scale), ad::scale(out.mean_image, inv_var), target.cg);
  out.cg_residual = solve.relative_residual;
  const ad::Var gamma = solve.solution;
  const ad::Var data_term = ad::dot(tape.constant(out.scale * target.backprojected_data()), gamma);
  auto value = ad::scale(ad::dot(out.mean_image, gamma), inv_var);
  value = ad::add(value, ad::scale(data_term, 2.0));
  value = ad::sub(value, ad::scale(ad::dot(out.mean_image, out.mean_image), inv_var));
  out.value = value;
  return out;
}

/// Posterior log density and gradient: taped likelihood plus analytic prior.
inline PosteriorEvaluation log_posterior_and_grad(const PosteriorTarget& target, const RealArray& z) {
  PosteriorEvaluation ev;
  ev.grad = RealArray(z.shape());
  if (target.likelihood_weight != 0.0) {
    ad::Tape tape;
    const ad::Var zv = tape.variable(z);
    const auto lik = log_likelihood(target, tape, zv);
    ev.log_likelihood = lik.value.scalar();
    ev.scale_used = lik.scale;
    ev.cg_residual = lik.cg_residual;
    ev.residual_warning = lik.cg_residual > target.residual_threshold;
    ev.grad = target.likelihood_weight * ad::grad(lik.value, zv);
  }
  if (target.prior_weight != 0.0) {
    ev.log_prior = target.prior.logpdf(z);
    axpy(target.prior_weight, target.prior.grad(z), ev.grad);
  }
  ev.log_post = target.likelihood_weight * ev.log_likelihood + target.prior_weight * ev.log_prior;
  if (!std::isfinite(ev.log_post)) throw NumericalError("log posterior is not finite", 0);
  return ev;
}

/// Copy of the target with the scale frozen at s*(z).
inline PosteriorTarget with_fixed_scale(const PosteriorTarget& target, const RealArray& z) {
  PosteriorTarget out = target;
  out.fixed_scale = resolve_scale(target, target.decoder->decode(z));
  out.scale_policy = ScalePolicy::Fixed;
  return out;
}

/// Tape objective of the full log posterior, for gradient checks.
inline ad::Objective log_posterior_objective(const PosteriorTarget& target) {
  auto precision = std::make_shared<const Eigen::MatrixXd>(target.prior.dense_precision());
  return [&target, precision](ad::Tape& tape, ad::Var z) {
    auto value = ad::scale(log_likelihood(target, tape, z).value, target.likelihood_weight);
    const auto r = ad::sub(z, tape.constant(target.prior.mean()));
    const auto prior = ad::scale(ad::dot(r, ad::matvec(precision, r, r.shape())), -0.5);
    return ad::add(value, ad::scale(prior, target.prior_weight));
  };
}

struct MapResult {
  RealArray z;
  double log_post = 0.0;
  /// Log posterior after each accepted step, starting with the initial value.
  std::vector<double> trace;
  bool stagnated = false;
};

/// Gradient ascent on log p(z|y). A step that lowers the objective is retried
/// at half the step size; an accepted step grows the step by 1.2.
inline MapResult map_estimate(const PosteriorTarget& target, const RealArray& z_init, int steps, double step_size,
                              double min_step = 1e-14) {
  if (steps < 1) throw ConfigError("MAP needs at least one step");
  if (!(step_size > 0.0)) throw ConfigError("MAP step size must be positive");
  target.validate();
  MapResult res;
  res.z = z_init;
  PosteriorEvaluation cur = log_posterior_and_grad(target, z_init);
  res.log_post = cur.log_post;
  res.trace.push_back(cur.log_post);
  double eta = step_size;
  for (int it = 0; it < steps; ++it) {
    bool moved = false;
    while (eta >= min_step) {
      RealArray cand = res.z;
      axpy(eta, cur.grad, cand);
      double value = -std::numeric_limits<double>::infinity();
      PosteriorEvaluation ev;
      try {
        ev = log_posterior_and_grad(target, cand);
        value = ev.log_post;
      } catch (const DegenerateError&) {
      } catch (const NumericalError&) {
      }
      if (value >= cur.log_post) {
        if (cand == res.z) break;
        res.z = std::move(cand);
        cur = std::move(ev);
        eta *= 1.2;
        moved = true;
        break;
      }
      eta *= 0.5;
    }
    if (!moved) {
      res.stagnated = eta < min_step;
      break;
    }
    res.trace.push_back(cur.log_post);
  }
  res.log_post = cur.log_post;
  return res;
}

}  // namespace lms
