#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "lms/lms.hpp"

namespace fs = std::filesystem;
using namespace lms;

namespace {

// Flags shared by every subcommand; unset optionals leave the config untouched.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> r;
  std::optional<double> noise_scale;
  std::optional<int> steps;
  std::optional<double> tau;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "JSON experiment config; flags override its fields")->check(CLI::ExistingFile);
  app->add_option("--seed", f.seed, "Seed for this command's random stream");
  app->add_option("--out", f.out, "Output directory");
  app->add_option("--r", f.r, "Undersampling factor R");
  app->add_option("--noise-scale", f.noise_scale, "Noise multiplier on the base level");
  app->add_option("--steps", f.steps, "Iteration count (chain steps, MAP steps or training iterations)");
  app->add_option("--tau", f.tau, "Initial MALA step size");
}

// Precedence: defaults < config file < flags.
ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig c = run_stage("config", [&] { return f.config.empty() ? ExperimentConfig{} : load_config(f.config); });
  if (f.r) c.r = *f.r;
  if (f.noise_scale) c.noise_scale = *f.noise_scale;
  if (f.steps) c.chain.total_steps = *f.steps;
  if (f.tau) c.chain.tau = *f.tau;
  if (!f.out.empty()) c.out_dir = f.out;
  return c;
}

std::string require_out(const CommonFlags& f, const ExperimentConfig& c) {
  const std::string out = f.out.empty() ? c.out_dir : f.out;
  if (out.empty()) throw StageError("config", stage_exit_code("config"), "--out is required");
  return out;
}

Acquisition load_acquisition(const std::string& dir) {
  return run_stage("acquisition", [&] { return acquisition_from_bundle(read_bundle(dir)); });
}

struct Posterior {
  Acquisition acquisition;
  VaeModels models;
  PosteriorTarget target;
};

Posterior load_posterior(const std::string& acquisition_dir, ExperimentConfig cfg, const std::string& model,
                         const std::string& prior) {
  if (!model.empty()) cfg.model_path = model;
  if (!prior.empty()) cfg.prior_path = prior;
  Posterior p{load_acquisition(acquisition_dir), load_models(cfg), {}};
  const auto pr = load_prior(cfg);
  const auto w = run_stage("prewhiten", [&] { return prewhiten_acquisition(p.acquisition, cfg.noise_region_all_lines); });
  p.target = run_stage("map", [&] {
    auto decoder = std::make_shared<const ConvDecoder>(p.models.decoder);
    auto t = make_target(w, p.acquisition, decoder, pr ? *pr : EmpiricalPrior::standard_normal(decoder->latent_shape()),
                         cfg.cg_iterations);
    t.validate();
    return t;
  });
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-space MALA posterior sampling for undersampled multi-coil MRI"};
  app.require_subcommand(1);
  app.footer("Environment: LMS_THREADS caps worker threads for parallel chains.");

  // make-phantom
  CommonFlags phantom_flags;
  PhantomSpec phantom_spec;
  auto* make_phantom_cmd = app.add_subcommand("make-phantom", "Write a synthetic phantom bundle (image, coils, bias, phase)");
  add_common(make_phantom_cmd, phantom_flags);
  make_phantom_cmd->add_option("--size", phantom_spec.size, "Image size (>= 16)");
  make_phantom_cmd->add_option("--ellipses", phantom_spec.ellipses, "Number of inner ellipses");
  make_phantom_cmd->add_option("--coils", phantom_spec.coils, "Coil count");

  // make-pattern
  CommonFlags pattern_flags;
  std::size_t pattern_height = 32, candidates = 8, central = 0;
  auto* make_pattern_cmd = app.add_subcommand("make-pattern", "Write a Cartesian undersampling pattern bundle");
  add_common(make_pattern_cmd, pattern_flags);
  make_pattern_cmd->add_option("--height", pattern_height, "Number of phase-encode lines");
  make_pattern_cmd->add_option("--candidates", candidates, "Random masks tried; the best PSF ratio wins");
  make_pattern_cmd->add_option("--central", central, "Fully sampled central lines (0: min(15, height/8))");

  // simulate
  CommonFlags sim_flags;
  std::string sim_phantom, sim_pattern;
  auto* simulate_cmd = app.add_subcommand("simulate", "Simulate noisy multi-coil k-space from a phantom and a pattern");
  add_common(simulate_cmd, sim_flags);
  simulate_cmd->add_option("--phantom", sim_phantom, "Phantom bundle")->required();
  simulate_cmd->add_option("--pattern", sim_pattern, "Pattern bundle")->required();

  // train-vae
  CommonFlags train_flags;
  std::size_t train_size = 32, train_count = 200, train_ellipses = 6, latent_channels = 8, hidden = 8;
  TrainingConfig train_cfg;
  auto* train_cmd = app.add_subcommand("train-vae", "Train the toy convolutional VAE on random phantoms");
  add_common(train_cmd, train_flags);
  train_cmd->add_option("--size", train_size, "Image size (multiple of 8)");
  train_cmd->add_option("--count", train_count, "Training phantoms");
  train_cmd->add_option("--ellipses", train_ellipses, "Inner ellipses per phantom");
  train_cmd->add_option("--latent-channels", latent_channels, "Latent channels");
  train_cmd->add_option("--hidden", hidden, "Hidden channels");
  train_cmd->add_option("--batch", train_cfg.batch_size, "Batch size");
  train_cmd->add_option("--lr", train_cfg.learning_rate, "Learning rate per pixel");

  // estimate-prior
  CommonFlags prior_flags;
  std::string prior_model;
  std::size_t prior_samples = 2000, joint_channels = 0, prior_images = 200, prior_ellipses = 6;
  auto* prior_cmd = app.add_subcommand("estimate-prior", "Fit the empirical latent prior from encoder samples");
  add_common(prior_cmd, prior_flags);
  prior_cmd->add_option("--model", prior_model, "VAE bundle")->required();
  prior_cmd->add_option("--samples", prior_samples, "Latent samples drawn from the encoder");
  prior_cmd->add_option("--joint-channels", joint_channels, "Least Gaussian channels modelled jointly");
  prior_cmd->add_option("--images", prior_images, "Phantoms encoded");
  prior_cmd->add_option("--ellipses", prior_ellipses, "Inner ellipses per phantom");

  // map
  CommonFlags map_flags;
  std::string map_acq, map_model, map_prior;
  auto* map_cmd = app.add_subcommand("map", "MAP latent and image for an acquisition");
  add_common(map_cmd, map_flags);
  map_cmd->add_option("--acquisition", map_acq, "Acquisition bundle")->required();
  map_cmd->add_option("--model", map_model, "VAE bundle (overrides the config)");
  map_cmd->add_option("--prior", map_prior, "Prior bundle (default standard normal)");

  // sample
  CommonFlags sample_flags;
  std::string sample_acq, sample_model, sample_prior, sample_map;
  std::optional<int> burn_in, thinning;
  std::optional<std::size_t> chains;
  auto* sample_cmd = app.add_subcommand("sample", "Run MALA chains and map the latents to image samples");
  add_common(sample_cmd, sample_flags);
  sample_cmd->add_option("--acquisition", sample_acq, "Acquisition bundle")->required();
  sample_cmd->add_option("--model", sample_model, "VAE bundle (overrides the config)");
  sample_cmd->add_option("--prior", sample_prior, "Prior bundle (default standard normal)");
  sample_cmd->add_option("--map", sample_map, "MAP bundle to start from (computed when absent)");
  sample_cmd->add_option("--burn-in", burn_in, "Burn-in steps");
  sample_cmd->add_option("--thinning", thinning, "Keep every n-th post-burn-in state");
  sample_cmd->add_option("--chains", chains, "Independent chains (seeds seed, seed+1, ...)");

  // metrics
  CommonFlags metrics_flags;
  std::string metrics_samples, metrics_acq, metrics_model, metrics_prior;
  std::size_t pairs = 100;
  auto* metrics_cmd = app.add_subcommand("metrics", "Evaluate image samples against the stored ground truth");
  add_common(metrics_cmd, metrics_flags);
  metrics_cmd->add_option("--samples", metrics_samples, "Samples bundle")->required();
  metrics_cmd->add_option("--acquisition", metrics_acq, "Acquisition bundle")->required();
  metrics_cmd->add_option("--pairs", pairs, "Random pairs for the pairwise RMSE");

  // run
  CommonFlags run_flags;
  auto* run_cmd = app.add_subcommand("run", "Full pipeline: pattern, acquisition, prewhitening, MAP, chain, images, metrics");
  add_common(run_cmd, run_flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*make_phantom_cmd) {
      const auto cfg = resolve_config(phantom_flags);
      PhantomSpec spec = phantom_spec;
      if (!phantom_flags.config.empty()) spec = cfg.phantom;
      if (make_phantom_cmd->count("--size")) spec.size = phantom_spec.size;
      if (make_phantom_cmd->count("--ellipses")) spec.ellipses = phantom_spec.ellipses;
      if (make_phantom_cmd->count("--coils")) spec.coils = phantom_spec.coils;
      if (phantom_flags.seed) spec.seed = *phantom_flags.seed;
      const auto out = require_out(phantom_flags, cfg);
      const Phantom p = run_stage("phantom", [&] { return make_phantom(spec); });
      run_stage("write", [&] { write_bundle(out, to_bundle(p)); return 0; });
    } else if (*make_pattern_cmd) {
      const auto cfg = resolve_config(pattern_flags);
      const std::size_t c = central > 0 ? central : std::min<std::size_t>(15, pattern_height / 8);
      const auto p = run_stage("pattern", [&] {
        return generate_pattern(pattern_height, cfg.r, candidates, pattern_flags.seed.value_or(cfg.pattern_seed), c);
      });
      const auto out = require_out(pattern_flags, cfg);
      run_stage("write", [&] { write_bundle(out, to_bundle(p)); return 0; });
      std::cout << "lines " << p.measured_count() << " / " << p.height() << ", PSF peak-to-side " << p.psf_ratio << '\n';
    } else if (*simulate_cmd) {
      const auto cfg = resolve_config(sim_flags);
      const auto out = require_out(sim_flags, cfg);
      const auto acq = run_stage("acquisition", [&] {
        const Phantom ph = phantom_from_bundle(read_bundle(sim_phantom));
        const auto pattern = pattern_from_bundle(read_bundle(sim_pattern));
        return simulate_acquisition(ph, pattern, cfg.noise_scale, sim_flags.seed.value_or(cfg.acquisition_seed),
                                    cfg.base_noise_std);
      });
      run_stage("write", [&] { write_bundle(out, to_bundle(acq)); return 0; });
    } else if (*train_cmd) {
      const auto cfg = resolve_config(train_flags);
      const auto out = require_out(train_flags, cfg);
      TrainingConfig tc = train_cfg;
      if (train_flags.steps) tc.iterations = *train_flags.steps;
      if (train_flags.seed) tc.seed = *train_flags.seed;
      const auto data = phantom_dataset(train_count, train_size, train_ellipses, tc.seed * 100000);
      const ConvArchitecture arch{train_size, latent_channels, hidden};
      const TrainedVae vae = run_stage("train", [&] { return train_toy_vae(data, arch, tc); });
      run_stage("write", [&] {
        write_bundle(out, to_bundle(vae.encoder, vae.decoder));
        nlohmann::json trace = nlohmann::json::array();
        for (const auto& [it, elbo] : vae.report.elbo_trace) trace.push_back({it, elbo});
        write_json(fs::path(out) / "training.json", {{"initial_elbo", vae.report.initial_elbo},
                                                    {"final_elbo", vae.report.final_elbo},
                                                    {"initial_rmse", vae.report.initial_rmse},
                                                    {"final_rmse", vae.report.final_rmse},
                                                    {"elbo_trace", trace}});
        return 0;
      });
      std::cout << "ELBO " << vae.report.initial_elbo << " -> " << vae.report.final_elbo << '\n';
    } else if (*prior_cmd) {
      auto cfg = resolve_config(prior_flags);
      cfg.model_path = prior_model;
      const auto out = require_out(prior_flags, cfg);
      const VaeModels m = load_models(cfg);
      const std::uint64_t seed = prior_flags.seed.value_or(1);
      const auto data = phantom_dataset(prior_images, m.decoder.architecture().image_size, prior_ellipses, seed * 100000);
      const auto prior = run_stage("prior", [&] {
        return estimate_empirical_prior(m.encoder, data, prior_samples, joint_channels, seed);
      });
      run_stage("write", [&] {
        write_bundle(out, to_bundle(prior));
        write_json(fs::path(out) / "prior.json", {{"channel_rank", prior.channel_rank()}, {"spd", prior.blocks_spd()}});
        return 0;
      });
    } else if (*map_cmd) {
      auto cfg = resolve_config(map_flags);
      if (map_flags.steps) cfg.map_steps = *map_flags.steps;
      const auto out = require_out(map_flags, cfg);
      const Posterior p = load_posterior(map_acq, cfg, map_model, map_prior);
      const auto [map, image] = run_stage("map", [&] {
        return map_from_zero_filled(p.target, p.models.encoder, cfg.map_steps, cfg.map_step_size,
                                    CgConfig{cfg.image_cg_iterations});
      });
      run_stage("write", [&] {
        ArrayBundle b;
        b.put("z", map.z);
        b.put("image", image.image);
        b.put("trace", RealArray({map.trace.size()}, map.trace));
        b.attributes = {{"kind", "map"}, {"log_post", map.log_post}, {"scale", image.scale}};
        write_bundle(out, b);
        return 0;
      });
      std::cout << "MAP log posterior " << map.log_post << '\n';
    } else if (*sample_cmd) {
      auto cfg = resolve_config(sample_flags);
      if (sample_flags.seed) cfg.chain.seed = *sample_flags.seed;
      if (burn_in) cfg.chain.burn_in = *burn_in;
      if (thinning) cfg.chain.thinning = *thinning;
      if (chains) cfg.chains = *chains;
      run_stage("config", [&] { cfg.validate(); return 0; });
      const auto out = require_out(sample_flags, cfg);
      const Posterior p = load_posterior(sample_acq, cfg, sample_model, sample_prior);
      const CgConfig image_cg{cfg.image_cg_iterations};
      const ComplexArray x_map = run_stage("map", [&] {
        if (!sample_map.empty()) return read_bundle(sample_map).complex("image");
        return map_from_zero_filled(p.target, p.models.encoder, cfg.map_steps, cfg.map_step_size, image_cg).second.image;
      });
      const auto traces = run_stage("chain", [&] {
        return run_chains(p.target, cfg.chain, p.models.encoder.mean(x_map), cfg.chains);
      });
      std::vector<ImageSample> samples;
      run_stage("image", [&] {
        for (const auto& t : traces)
          for (auto& s : latents_to_images(p.target, t.samples, t.sample_steps, t.sample_log_post, image_cg))
            samples.push_back(std::move(s));
        return 0;
      });
      run_stage("write", [&] {
        for (std::size_t k = 0; k < traces.size(); ++k)
          write_bundle(fs::path(out) / ("chain" + std::to_string(k)), to_bundle(traces[k]));
        if (!samples.empty()) write_bundle(fs::path(out) / "samples", to_bundle(samples));
        nlohmann::json diag = nlohmann::json::array();
        for (const auto& t : traces) diag.push_back(to_json(chain_diagnostics(t)));
        write_json(fs::path(out) / "diagnostics.json", diag);
        return 0;
      });
      for (std::size_t k = 0; k < traces.size(); ++k)
        std::cout << "chain " << k << ": acceptance " << traces[k].post_burn_in_acceptance() << ", tau "
                  << traces[k].final_tau() << ", samples " << traces[k].samples.size() << '\n';
    } else if (*metrics_cmd) {
      const auto cfg = resolve_config(metrics_flags);
      const auto out = require_out(metrics_flags, cfg);
      const Acquisition acq = load_acquisition(metrics_acq);
      const auto report = run_stage("metrics", [&] {
        const auto samples = samples_from_bundle(read_bundle(metrics_samples));
        const auto w = prewhiten_acquisition(acq, cfg.noise_region_all_lines);
        AcquisitionModel model = acq.model;
        model.coils = w.coils;
        const Encoding enc = build_encoding(model);
        std::vector<double> kerr;
        for (const auto& s : samples) kerr.push_back(kspace_abs_error(s.scale * s.image, enc.encode, w.data.samples));
        return evaluate_samples(acquisition_scale_images(samples), acq.truth, foreground_mask(acq.truth), pairs,
                                metrics_flags.seed.value_or(cfg.metrics_seed), kerr);
      });
      run_stage("write", [&] {
        fs::create_directories(out);
        write_json(fs::path(out) / "metrics.json", to_json(report));
        if (!report.std_map.empty()) {
          ArrayBundle b;
          b.put("mean", report.mean_map);
          b.put("std", report.std_map);
          write_bundle(fs::path(out) / "statistics", b);
        }
        return 0;
      });
      std::cout << "RMSE% " << report.rmse_agg.mean << ", pairwise RMSE% " << report.pairwise.mean
                << ", directionality " << report.directionality << '\n';
    } else if (*run_cmd) {
      auto cfg = resolve_config(run_flags);
      if (run_flags.seed) cfg.chain.seed = *run_flags.seed;
      const auto r = run_experiment(cfg);
      std::cout << "samples " << r.samples.size() << ", acceptance " << r.diagnostics.post_burn_in_acceptance
                << ", pairwise RMSE% " << r.metrics.pairwise.mean << ", output " << cfg.out_dir << '\n';
    }
  } catch (const StageError& e) {
    std::cerr << "error [" << e.stage() << "]: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
