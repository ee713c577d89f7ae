#pragma once

#include <filesystem>
#include <optional>
#include <tuple>
#include <string>
#include <vector>

#include "lms/bundle.hpp"
#include "lms/encoding.hpp"
#include "lms/image_step.hpp"
#include "lms/io.hpp"
#include "lms/mala.hpp"
#include "lms/metrics.hpp"
#include "lms/noise.hpp"
#include "lms/pattern.hpp"
#include "lms/phantom.hpp"
#include "lms/posterior.hpp"
#include "lms/prior.hpp"

namespace lms {

/// Failure of one pipeline stage; `exit_code` identifies the stage.
class StageError : public Error {
 public:
  StageError(std::string stage, int exit_code, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)), exit_code_(exit_code) {}
  const std::string& stage() const noexcept { return stage_; }
  int exit_code() const noexcept { return exit_code_; }

 private:
  std::string stage_;
  int exit_code_;
};

/// Exit code of each named stage; 1 is reserved for unclassified failures.
inline int stage_exit_code(const std::string& stage) {
  static const std::vector<std::string> order{"config", "model-load", "phantom", "pattern", "acquisition",
                                              "prewhiten", "map", "chain", "image", "metrics", "write", "train", "prior"};
  for (std::size_t i = 0; i < order.size(); ++i)
    if (order[i] == stage) return static_cast<int>(i) + 2;
  return 1;
}

/// Run `fn`, rethrowing any library error as a StageError for `stage`.
template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, stage_exit_code(stage), e.what());
  }
}

struct ExperimentConfig {
  PhantomSpec phantom;
  double r = 3.0;
  double noise_scale = 1.0;
  double base_noise_std = kBaseNoiseStd;
  std::size_t pattern_candidates = 8;
  std::uint64_t pattern_seed = 1;
  /// 0 picks min(15, height / 8).
  std::size_t central_lines = 0;
  std::uint64_t acquisition_seed = 1;
  bool noise_region_all_lines = true;
  std::string model_path;
  /// Empty means a standard normal prior.
  std::string prior_path;
  ChainConfig chain;
  std::size_t chains = 1;
  int map_steps = 100;
  double map_step_size = 1e-4;
  int cg_iterations = 25;
  int image_cg_iterations = 100;
  std::size_t pair_count = 100;
  std::uint64_t metrics_seed = 1;
  /// Local-sampler draws for the baseline; 0 matches the chain sample count.
  std::size_t local_samples = 0;
  std::string out_dir;

  std::size_t resolved_central_lines() const {
    return central_lines > 0 ? central_lines : std::min<std::size_t>(15, phantom.size / 8);
  }

  void validate() const {
    phantom.validate();
    chain.validate();
    if (!(r >= 1.0)) throw ConfigError("R must be >= 1");
    if (!(noise_scale >= 0.0)) throw ConfigError("noise scale must be non-negative");
    if (chains < 1) throw ConfigError("need at least one chain");
    if (cg_iterations < 1 || image_cg_iterations < 1) throw ConfigError("CG iterations must be >= 1");
    if (map_steps < 1 || !(map_step_size > 0.0)) throw ConfigError("invalid MAP settings");
    if (pair_count < 1) throw ConfigError("pair count must be >= 1");
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"phantom", {{"size", c.phantom.size}, {"ellipses", c.phantom.ellipses}, {"coils", c.phantom.coils},
                       {"seed", c.phantom.seed}}},
          {"r", c.r},
          {"noise_scale", c.noise_scale},
          {"base_noise_std", c.base_noise_std},
          {"pattern", {{"candidates", c.pattern_candidates}, {"seed", c.pattern_seed}, {"central_lines", c.central_lines}}},
          {"acquisition_seed", c.acquisition_seed},
          {"noise_region_all_lines", c.noise_region_all_lines},
          {"model_path", c.model_path},
          {"prior_path", c.prior_path},
          {"chain", {{"tau", c.chain.tau}, {"steps", c.chain.total_steps}, {"burn_in", c.chain.burn_in},
                     {"thinning", c.chain.thinning}, {"seed", c.chain.seed}, {"adapt_tau", c.chain.adapt_tau},
                     {"accept_low", c.chain.accept_low}, {"accept_high", c.chain.accept_high},
                     {"adapt_window", c.chain.adapt_window}, {"adapt_factor", c.chain.adapt_factor},
                     {"chains", c.chains}}},
          {"map", {{"steps", c.map_steps}, {"step_size", c.map_step_size}}},
          {"cg_iterations", c.cg_iterations},
          {"image_cg_iterations", c.image_cg_iterations},
          {"metrics", {{"pairs", c.pair_count}, {"seed", c.metrics_seed}, {"local_samples", c.local_samples}}},
          {"out_dir", c.out_dir}};
}

/// Fields present in `j` override `base`; unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {}) {
  static const std::vector<std::string> known{
      "phantom", "r", "noise_scale", "base_noise_std", "pattern", "acquisition_seed", "noise_region_all_lines",
      "model_path", "prior_path", "chain", "map", "cg_iterations", "image_cg_iterations", "metrics", "out_dir"};
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
  auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
    if (!obj.contains(key)) return;
    try {
      field = obj.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  };
  ExperimentConfig c = std::move(base);
  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    get(p, "size", c.phantom.size);
    get(p, "ellipses", c.phantom.ellipses);
    get(p, "coils", c.phantom.coils);
    get(p, "seed", c.phantom.seed);
  }
  get(j, "r", c.r);
  get(j, "noise_scale", c.noise_scale);
  get(j, "base_noise_std", c.base_noise_std);
  if (j.contains("pattern")) {
    const auto& p = j.at("pattern");
    get(p, "candidates", c.pattern_candidates);
    get(p, "seed", c.pattern_seed);
    get(p, "central_lines", c.central_lines);
  }
  get(j, "acquisition_seed", c.acquisition_seed);
  get(j, "noise_region_all_lines", c.noise_region_all_lines);
  get(j, "model_path", c.model_path);
  get(j, "prior_path", c.prior_path);
  if (j.contains("chain")) {
    const auto& ch = j.at("chain");
    get(ch, "tau", c.chain.tau);
    get(ch, "steps", c.chain.total_steps);
    get(ch, "burn_in", c.chain.burn_in);
    get(ch, "thinning", c.chain.thinning);
    get(ch, "seed", c.chain.seed);
    get(ch, "adapt_tau", c.chain.adapt_tau);
    get(ch, "accept_low", c.chain.accept_low);
    get(ch, "accept_high", c.chain.accept_high);
    get(ch, "adapt_window", c.chain.adapt_window);
    get(ch, "adapt_factor", c.chain.adapt_factor);
    get(ch, "chains", c.chains);
  }
  if (j.contains("map")) {
    get(j.at("map"), "steps", c.map_steps);
    get(j.at("map"), "step_size", c.map_step_size);
  }
  get(j, "cg_iterations", c.cg_iterations);
  get(j, "image_cg_iterations", c.image_cg_iterations);
  if (j.contains("metrics")) {
    get(j.at("metrics"), "pairs", c.pair_count);
    get(j.at("metrics"), "seed", c.metrics_seed);
    get(j.at("metrics"), "local_samples", c.local_samples);
  }
  get(j, "out_dir", c.out_dir);
  return c;
}

/// Reads a config file; relative model, prior and output paths resolve against the
/// file's directory.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
  ExperimentConfig c = config_from_json(read_json(path));
  const auto dir = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (dir / p).lexically_normal().string();
  };
  resolve(c.model_path);
  resolve(c.prior_path);
  resolve(c.out_dir);
  return c;
}

struct ExperimentResult {
  Phantom phantom;
  Acquisition acquisition;
  PrewhitenResult whitened;
  RealArray reference;
  Mask mask;
  MapResult map;
  ImageSample map_image;
  std::vector<ChainTrace> traces;
  std::vector<ImageSample> samples;
  /// Per-sample s * |x| on the acquisition intensity scale.
  std::vector<RealArray> sample_images;
  MetricsReport metrics;
  /// Decoder mean of the same latents, with no data step.
  std::vector<double> decoder_only_kspace_error;
  /// Decoded draws from q(z | x_map), on the acquisition intensity scale.
  std::vector<RealArray> local_images;
  MetricsReport local_metrics;
  ChainDiagnostics diagnostics;
};

/// The posterior target for a prewhitened acquisition.
inline PosteriorTarget make_target(const PrewhitenResult& w, const Acquisition& acq,
                                   std::shared_ptr<const DecoderModel> decoder, EmpiricalPrior prior, int cg_iterations) {
  AcquisitionModel model = acq.model;
  model.coils = w.coils;
  model.noise_cov = Eigen::MatrixXcd();
  model.scale = 1.0;
  PosteriorTarget t;
  t.decoder = std::move(decoder);
  t.prior = std::move(prior);
  t.encoding = build_encoding(model);
  t.data = w.data.samples;
  t.cg.iterations = cg_iterations;
  return t;
}

inline PrewhitenResult prewhiten_acquisition(const Acquisition& acq, bool all_lines) {
  NoiseRegion region;
  region.all_lines = all_lines;
  return estimate_noise_and_prewhiten(KSpaceData{acq.data.samples, acq.data.pattern, {}}, acq.model.coils, region);
}

/// MAP latent by gradient ascent from the encoder mean of the zero-filled
/// reconstruction, and its image.
inline std::pair<MapResult, ImageSample> map_from_zero_filled(const PosteriorTarget& target, const EncoderModel& encoder,
                                                              int steps, double step_size, const CgConfig& image_cg) {
  const ComplexArray zero_filled = target.encoding.left_inverse(target.encoding.undersample.adjoint(target.data));
  MapResult map = map_estimate(target, encoder.mean(zero_filled), steps, step_size);
  ImageSample image = latent_to_image(target, map.z, image_cg);
  return {std::move(map), std::move(image)};
}

/// s * |x| per sample, the intensity scale of the acquisition.
inline std::vector<RealArray> acquisition_scale_images(const std::vector<ImageSample>& samples) {
  std::vector<RealArray> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.scale * s.magnitude);
  return out;
}

inline std::vector<double> sample_kspace_errors(const PosteriorTarget& target, const std::vector<ImageSample>& samples) {
  std::vector<double> out;
  for (const auto& s : samples) out.push_back(kspace_abs_error(s.scale * s.image, target.encoding.encode, target.data));
  return out;
}

inline double decoder_only_kspace_error(const PosteriorTarget& target, const RealArray& z) {
  const ComplexArray mu = decoder_only_sample(*target.decoder, z);
  return kspace_abs_error(resolve_scale(target, mu) * mu, target.encoding.encode, target.data);
}

/// The whole pipeline in memory: phantom, pattern, acquisition, prewhitening,
/// MAP, chains, image samples, metrics and baselines.
inline ExperimentResult run_pipeline(const ExperimentConfig& cfg, const VaeModels& models,
                                     const std::optional<EmpiricalPrior>& prior_in = std::nullopt) {
  run_stage("config", [&] {
    cfg.validate();
    require_shape(models.decoder.output_shape(), Shape{cfg.phantom.size, cfg.phantom.size}, "decoder output vs phantom");
    return 0;
  });
  ExperimentResult res;
  res.phantom = run_stage("phantom", [&] { return make_phantom(cfg.phantom); });
  const auto pattern = run_stage("pattern", [&] {
    return generate_pattern(cfg.phantom.size, cfg.r, cfg.pattern_candidates, cfg.pattern_seed,
                            cfg.resolved_central_lines());
  });
  res.acquisition = run_stage("acquisition", [&] {
    return simulate_acquisition(res.phantom, pattern, cfg.noise_scale, cfg.acquisition_seed, cfg.base_noise_std);
  });
  res.whitened = run_stage("prewhiten", [&] { return prewhiten_acquisition(res.acquisition, cfg.noise_region_all_lines); });
  res.reference = res.phantom.image;
  res.mask = foreground_mask(res.reference);

  auto decoder = std::make_shared<const ConvDecoder>(models.decoder);
  const EmpiricalPrior prior = prior_in ? *prior_in : EmpiricalPrior::standard_normal(decoder->latent_shape());
  const PosteriorTarget target = run_stage("map", [&] {
    auto t = make_target(res.whitened, res.acquisition, decoder, prior, cfg.cg_iterations);
    t.validate();
    return t;
  });

  const CgConfig image_cg{cfg.image_cg_iterations};
  run_stage("map", [&] {
    std::tie(res.map, res.map_image) = map_from_zero_filled(target, models.encoder, cfg.map_steps, cfg.map_step_size, image_cg);
    return 0;
  });

  res.traces = run_stage("chain", [&] {
    return run_chains(target, cfg.chain, models.encoder.mean(res.map_image.image), cfg.chains);
  });

  run_stage("image", [&] {
    for (const auto& t : res.traces) {
      auto imgs = latents_to_images(target, t.samples, t.sample_steps, t.sample_log_post, image_cg);
      for (auto& s : imgs) res.samples.push_back(std::move(s));
    }
    return 0;
  });

  run_stage("metrics", [&] {
    res.sample_images = acquisition_scale_images(res.samples);
    for (const auto& t : res.traces)
      for (const auto& z : t.samples) res.decoder_only_kspace_error.push_back(decoder_only_kspace_error(target, z));
    res.metrics = evaluate_samples(res.sample_images, res.reference, res.mask, cfg.pair_count, cfg.metrics_seed,
                                   sample_kspace_errors(target, res.samples));

    const std::size_t n_local = cfg.local_samples > 0 ? cfg.local_samples : std::max<std::size_t>(res.samples.size(), 2);
    Philox rng(cfg.metrics_seed, 0x10ca1);
    for (auto& x : local_sampler(models.encoder, *decoder, res.map_image.image, n_local, rng))
      res.local_images.push_back(res.map_image.scale * magnitude(x));
    res.local_metrics = evaluate_samples(res.local_images, res.reference, res.mask, cfg.pair_count, cfg.metrics_seed);

    const double mask_count = static_cast<double>(std::count(res.mask.vec().begin(), res.mask.vec().end(), 1));
    res.diagnostics = chain_diagnostics(res.traces.front(), 50, [&](const RealArray& z, double s) {
      const RealArray m = magnitude(latent_to_image(target, z, image_cg).image);
      double acc = 0.0;
      for (std::size_t i = 0; i < m.size(); ++i)
        if (res.mask[i]) acc += m[i];
      return s * acc / std::max(1.0, mask_count);
    });
    return 0;
  });
  return res;
}

inline VaeModels load_models(const ExperimentConfig& cfg) {
  return run_stage("model-load", [&] {
    if (cfg.model_path.empty()) throw IoError("no model path configured");
    if (!std::filesystem::exists(cfg.model_path)) throw IoError("model path " + cfg.model_path + " does not exist");
    return vae_from_bundle(read_bundle(cfg.model_path));
  });
}

inline std::optional<EmpiricalPrior> load_prior(const ExperimentConfig& cfg) {
  if (cfg.prior_path.empty()) return std::nullopt;
  return run_stage("model-load", [&] { return std::optional<EmpiricalPrior>(prior_from_bundle(read_bundle(cfg.prior_path))); });
}

inline nlohmann::json metrics_json(const ExperimentResult& r) {
  return {{"lmala", to_json(r.metrics)},
          {"decoder_only_kspace_error", to_json(aggregate(r.decoder_only_kspace_error))},
          {"local_sampler", to_json(r.local_metrics)},
          {"map_log_post", r.map.log_post},
          {"samples", r.samples.size()}};
}

inline void write_experiment(const std::filesystem::path& out, const ExperimentConfig& cfg, const ExperimentResult& r) {
  run_stage("write", [&] {
    write_json(out / "config.json", to_json(cfg));
    write_bundle(out / "phantom", to_bundle(r.phantom));
    write_bundle(out / "pattern", to_bundle(r.acquisition.data.pattern));
    write_bundle(out / "acquisition", to_bundle(r.acquisition));
    ArrayBundle map;
    map.put("z", r.map.z);
    map.put("image", r.map_image.image);
    map.put("trace", RealArray({r.map.trace.size()}, r.map.trace));
    map.attributes = {{"kind", "map"}, {"log_post", r.map.log_post}, {"scale", r.map_image.scale}};
    write_bundle(out / "map", map);
    for (std::size_t k = 0; k < r.traces.size(); ++k) write_bundle(out / ("chain" + std::to_string(k)), to_bundle(r.traces[k]));
    if (!r.samples.empty()) write_bundle(out / "samples", to_bundle(r.samples));
    ArrayBundle stats;
    if (!r.metrics.std_map.empty()) {
      stats.put("mean", r.metrics.mean_map);
      stats.put("std", r.metrics.std_map);
    }
    stats.put_bool("mask", r.mask);
    write_bundle(out / "statistics", stats);
    write_json(out / "metrics.json", metrics_json(r));
    nlohmann::json diag = to_json(r.diagnostics);
    diag["chains"] = nlohmann::json::array();
    for (const auto& t : r.traces)
      diag["chains"].push_back({{"acceptance_rate", t.acceptance_rate()},
                                {"post_burn_in_acceptance", t.post_burn_in_acceptance()},
                                {"final_tau", t.final_tau()}});
    write_json(out / "diagnostics.json", diag);
    return 0;
  });
}

/// Load models, run the pipeline and write everything under cfg.out_dir.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  run_stage("config", [&] {
    cfg.validate();
    if (cfg.out_dir.empty()) throw ConfigError("no output directory configured");
    return 0;
  });
  const VaeModels models = load_models(cfg);
  const auto prior = load_prior(cfg);
  ExperimentResult r = run_pipeline(cfg, models, prior);
  write_experiment(cfg.out_dir, cfg, r);
  return r;
}

}  // namespace lms
