#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <numeric>
#include <thread>
#include <vector>

#include "lms/decoder.hpp"
#include "lms/errors.hpp"
#include "lms/posterior.hpp"
#include "lms/random.hpp"

namespace lms {

struct ChainConfig {
  double tau = 4e-4;
  int total_steps = 10000;
  int burn_in = 1000;
  int thinning = 1;
  std::uint64_t seed = 1;
  double accept_low = 0.3;
  double accept_high = 0.5;
  bool adapt_tau = true;
  /// Burn-in steps per adaptation decision.
  int adapt_window = 100;
  double adapt_factor = 1.1;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("chain step size tau must be positive");
    if (total_steps < 1) throw ConfigError("chain needs at least one step");
    if (burn_in < 0 || burn_in >= total_steps) throw ConfigError("burn-in must lie in [0, total_steps)");
    if (thinning < 1) throw ConfigError("thinning must be >= 1");
    if (!(accept_low < accept_high) || accept_low < 0.0 || accept_high > 1.0) {
      throw ConfigError("invalid acceptance band");
    }
    if (adapt_window < 1 || !(adapt_factor > 1.0)) throw ConfigError("invalid tau adaptation settings");
  }
};

/// Value and gradient of an unnormalized log density. A value of -inf marks
/// points outside the support; the gradient is then unused.
struct DensityEvaluation {
  double log_density = -std::numeric_limits<double>::infinity();
  RealArray grad;
  double scale = 1.0;

  bool finite() const { return std::isfinite(log_density); }
};

using LogDensity = std::function<DensityEvaluation(const RealArray&)>;

/// Posterior density for the chain; degenerate scales and numerical failures
/// map to -inf so the proposal is rejected.
inline LogDensity posterior_density(const PosteriorTarget& target) {
  target.validate();
  target.backprojected_data();
  return [&target](const RealArray& z) {
    DensityEvaluation out;
    try {
      auto ev = log_posterior_and_grad(target, z);
      out.log_density = ev.log_post;
      out.grad = std::move(ev.grad);
      out.scale = ev.scale_used;
    } catch (const DegenerateError&) {
    } catch (const NumericalError&) {
    }
    return out;
  };
}

struct ChainState {
  RealArray z;
  DensityEvaluation eval;
  std::size_t step_index = 0;
  std::size_t accept_count = 0;
};

/// z + tau grad + sqrt(2 tau) zeta, zeta ~ N(0, I), drawn in storage order.
inline RealArray propose(const ChainState& state, double tau, Philox& rng) {
  RealArray out = state.z;
  const double noise = std::sqrt(2.0 * tau);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tau * state.eval.grad[i] + noise * rng.normal();
  return out;
}

/// log q(to | from) = -|to - from - tau grad(from)|^2 / (4 tau), up to a constant.
inline double log_proposal_density(const RealArray& to, const RealArray& from, const RealArray& from_grad,
                                   double tau) {
  double acc = 0.0;
  for (std::size_t i = 0; i < to.size(); ++i) {
    const double d = to[i] - from[i] - tau * from_grad[i];
    acc += d * d;
  }
  return -acc / (4.0 * tau);
}

/// Metropolis-Hastings log acceptance probability, min(0, log ratio).
inline double log_acceptance(const ChainState& state, const RealArray& candidate, const DensityEvaluation& cand_eval,
                             double tau) {
  if (!cand_eval.finite()) return -std::numeric_limits<double>::infinity();
  const double forward = log_proposal_density(candidate, state.z, state.eval.grad, tau);
  const double reverse = log_proposal_density(state.z, candidate, cand_eval.grad, tau);
  const double ratio = cand_eval.log_density + reverse - state.eval.log_density - forward;
  return std::isnan(ratio) ? -std::numeric_limits<double>::infinity() : std::min(0.0, ratio);
}

/// One accept/reject decision. Consumes exactly one uniform draw. Returns
/// whether the candidate was taken; on rejection the state is left as is.
inline bool accept_reject(ChainState& state, RealArray candidate, DensityEvaluation cand_eval, double tau,
                          Philox& rng) {
  const double log_alpha = log_acceptance(state, candidate, cand_eval, tau);
  const double u = rng.uniform_open();
  ++state.step_index;
  if (std::log(u) < log_alpha) {
    state.z = std::move(candidate);
    state.eval = std::move(cand_eval);
    ++state.accept_count;
    return true;
  }
  return false;
}

struct ChainTrace {
  RealArray initial;
  /// Retained states after burn-in and thinning.
  std::vector<RealArray> samples;
  /// Step index (1-based, counting proposals) of each retained state.
  std::vector<std::size_t> sample_steps;
  std::vector<double> sample_scales;
  std::vector<double> sample_log_post;
  /// Log posterior of the current state after every step.
  std::vector<double> log_post;
  std::vector<std::uint8_t> accepted;
  /// Step size in effect at every step.
  std::vector<double> tau;
  std::size_t accept_count = 0;
  std::size_t proposals = 0;
  std::size_t burn_in = 0;

  double acceptance_rate() const {
    return proposals == 0 ? 0.0 : static_cast<double>(accept_count) / static_cast<double>(proposals);
  }

  /// Acceptance over the steps after burn-in.
  double post_burn_in_acceptance() const {
    if (accepted.size() <= burn_in) return 0.0;
    const auto n = std::count(accepted.begin() + static_cast<std::ptrdiff_t>(burn_in), accepted.end(), 1);
    return static_cast<double>(n) / static_cast<double>(accepted.size() - burn_in);
  }

  double final_tau() const { return tau.empty() ? 0.0 : tau.back(); }
};

/// MALA from z0. During burn-in, tau is multiplied or divided by the adaptation
/// factor after each window whose acceptance rate is above or below the band,
/// and stays fixed afterwards.
inline ChainTrace run_mala(const LogDensity& density, const RealArray& z0, const ChainConfig& cfg) {
  cfg.validate();
  Philox rng(cfg.seed, 0x3a1a);
  ChainState state{z0, density(z0), 0, 0};
  if (!state.eval.finite()) throw DegenerateError("chain initial point has no finite log posterior");

  ChainTrace trace;
  trace.initial = z0;
  trace.burn_in = static_cast<std::size_t>(cfg.burn_in);
  trace.log_post.reserve(static_cast<std::size_t>(cfg.total_steps));
  trace.accepted.reserve(static_cast<std::size_t>(cfg.total_steps));
  trace.tau.reserve(static_cast<std::size_t>(cfg.total_steps));
  double tau = cfg.tau;
  int window_accepts = 0, window_steps = 0;
  for (int t = 0; t < cfg.total_steps; ++t) {
    RealArray cand = propose(state, tau, rng);
    DensityEvaluation cand_eval = density(cand);
    const bool ok = accept_reject(state, std::move(cand), std::move(cand_eval), tau, rng);
    trace.accepted.push_back(ok ? 1 : 0);
    trace.log_post.push_back(state.eval.log_density);
    trace.tau.push_back(tau);

    if (t < cfg.burn_in && cfg.adapt_tau) {
      window_accepts += ok ? 1 : 0;
      if (++window_steps == cfg.adapt_window) {
        const double rate = static_cast<double>(window_accepts) / cfg.adapt_window;
        if (rate < cfg.accept_low) tau /= cfg.adapt_factor;
        if (rate > cfg.accept_high) tau *= cfg.adapt_factor;
        window_accepts = window_steps = 0;
      }
      if (t + 1 == cfg.burn_in && state.accept_count == 0) {
        throw StuckChainError("no proposal accepted during " + std::to_string(cfg.burn_in) + " burn-in steps");
      }
    }
    if (t >= cfg.burn_in && (t - cfg.burn_in) % cfg.thinning == 0) {
      trace.samples.push_back(state.z);
      trace.sample_steps.push_back(state.step_index);
      trace.sample_scales.push_back(state.eval.scale);
      trace.sample_log_post.push_back(state.eval.log_density);
    }
  }
  trace.accept_count = state.accept_count;
  trace.proposals = state.step_index;
  return trace;
}

/// Chain on the latent posterior started at the encoder mean of the MAP image.
inline ChainTrace run_chain(const PosteriorTarget& target, const ChainConfig& cfg, const ComplexArray& x_map,
                            const EncoderModel& encoder) {
  require_shape(encoder.latent_shape(), target.decoder->latent_shape(), "encoder vs decoder latent");
  return run_mala(posterior_density(target), encoder.mean(x_map), cfg);
}

/// Worker count from LMS_THREADS, else the hardware concurrency.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("LMS_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Run fn(i) for i in [0, n) on up to `threads` workers. The first exception
/// thrown by any task is rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Independent chains with seeds cfg.seed + k, sharing one target.
inline std::vector<ChainTrace> run_chains(const PosteriorTarget& target, const ChainConfig& cfg, const RealArray& z0,
                                          std::size_t count, std::size_t threads = worker_threads()) {
  const LogDensity density = posterior_density(target);
  std::vector<ChainTrace> out(count);
  parallel_for(count, threads, [&](std::size_t k) {
    ChainConfig c = cfg;
    c.seed = cfg.seed + k;
    out[k] = run_mala(density, z0, c);
  });
  return out;
}

// ---- diagnostics ------------------------------------------------------------

/// Lag-k autocorrelation with the biased (1/n) autocovariance estimator. A
/// constant series has autocorrelation 1 at every lag.
inline double autocorrelation(const std::vector<double>& x, std::size_t lag) {
  const std::size_t n = x.size();
  if (n == 0) throw ConfigError("autocorrelation of an empty series");
  if (lag >= n) return 0.0;
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double c0 = 0.0, ck = 0.0;
  for (std::size_t i = 0; i < n; ++i) c0 += (x[i] - mean) * (x[i] - mean);
  if (c0 == 0.0) return 1.0;
  for (std::size_t i = 0; i + lag < n; ++i) ck += (x[i] - mean) * (x[i + lag] - mean);
  return ck / c0;
}

/// Effective sample size by the initial positive sequence estimator: sum
/// consecutive autocorrelation pairs while their sum stays positive. A
/// constant series has ESS 1.
inline double effective_sample_size(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n == 0) throw ConfigError("effective sample size of an empty series");
  if (n < 3) return static_cast<double>(n);
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - mean;
  double c0 = 0.0;
  for (double v : d) c0 += v * v;
  if (c0 == 0.0) return 1.0;
  auto rho = [&](std::size_t lag) {
    double acc = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) acc += d[i] * d[i + lag];
    return acc / c0;
  };
  double sum_pairs = 0.0;
  for (std::size_t m = 0; 2 * m + 1 < n; ++m) {
    const double pair = rho(2 * m) + rho(2 * m + 1);
    if (pair <= 0.0) break;
    sum_pairs += pair;
  }
  const double tau_int = std::max(1.0 / static_cast<double>(n), 2.0 * sum_pairs - 1.0);
  return std::clamp(static_cast<double>(n) / tau_int, 1.0, static_cast<double>(n));
}

struct ChainDiagnostics {
  double acceptance_rate = 0.0;
  double post_burn_in_acceptance = 0.0;
  double final_tau = 0.0;
  /// Autocorrelation of the post-burn-in log posterior at lags 0..max_lag.
  std::vector<double> log_post_autocorrelation;
  double log_post_ess = 0.0;
  /// Masked mean image intensity of every retained sample.
  std::vector<double> intensity;
  double intensity_ess = 0.0;
};

/// Summary of a chain. `intensity_of` maps a retained latent to its masked mean
/// image intensity; pass an empty function to skip the series.
inline ChainDiagnostics chain_diagnostics(const ChainTrace& trace, std::size_t max_lag = 50,
                                          const std::function<double(const RealArray&, double)>& intensity_of = {}) {
  if (trace.log_post.empty()) throw ConfigError("chain trace is empty");
  ChainDiagnostics d;
  d.acceptance_rate = trace.acceptance_rate();
  d.post_burn_in_acceptance = trace.post_burn_in_acceptance();
  d.final_tau = trace.final_tau();
  const std::size_t start = std::min(trace.burn_in, trace.log_post.size() - 1);
  const std::vector<double> lp(trace.log_post.begin() + static_cast<std::ptrdiff_t>(start), trace.log_post.end());
  for (std::size_t k = 0; k <= max_lag; ++k) d.log_post_autocorrelation.push_back(autocorrelation(lp, k));
  d.log_post_ess = effective_sample_size(lp);
  if (intensity_of) {
    for (std::size_t i = 0; i < trace.samples.size(); ++i)
      d.intensity.push_back(intensity_of(trace.samples[i], trace.sample_scales[i]));
    if (!d.intensity.empty()) d.intensity_ess = effective_sample_size(d.intensity);
  }
  return d;
}

}  // namespace lms
