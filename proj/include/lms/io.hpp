#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lms/bundle.hpp"
#include "lms/decoder.hpp"
#include "lms/image_step.hpp"
#include "lms/mala.hpp"
#include "lms/metrics.hpp"
#include "lms/pattern.hpp"
#include "lms/phantom.hpp"
#include "lms/prior.hpp"

namespace lms {

namespace detail {

inline RealArray vector_array(const std::vector<double>& v) { return RealArray({v.size()}, v); }

template <typename T>
RealArray index_array(const std::vector<T>& v) {
  RealArray a({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) a[i] = static_cast<double>(v[i]);
  return a;
}

inline std::vector<std::size_t> to_indices(const RealArray& a) {
  std::vector<std::size_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] >= 0.0) || a[i] != std::floor(a[i])) throw IoError("index array holds a non-index value");
    out[i] = static_cast<std::size_t>(a[i]);
  }
  return out;
}

inline ComplexArray matrix_array(const Eigen::MatrixXcd& m) {
  ComplexArray a({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) a(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return a;
}

inline Eigen::MatrixXcd array_matrix(const ComplexArray& a) {
  if (a.rank() != 2) throw IoError("expected a matrix");
  Eigen::MatrixXcd m(static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(i, j);
  return m;
}

inline RealArray real_matrix_array(const Eigen::MatrixXd& m) {
  RealArray a({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) a(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return a;
}

inline Eigen::MatrixXd array_real_matrix(const RealArray& a) {
  if (a.rank() != 2) throw IoError("expected a matrix");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(i, j);
  return m;
}

template <typename T>
T attribute(const ArrayBundle& b, const std::string& key) {
  if (!b.attributes.contains(key)) throw IoError("bundle attribute '" + key + "' is missing");
  try {
    return b.attributes.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bundle attribute '" + key + "' has the wrong type: " + e.what());
  }
}

}  // namespace detail

// ---- phantom ----

inline ArrayBundle to_bundle(const Phantom& p) {
  ArrayBundle b;
  b.put("image", p.image);
  b.put("coils", p.coils);
  b.put("bias", p.bias);
  b.put("phase", p.phase);
  b.attributes["kind"] = "phantom";
  return b;
}

inline Phantom phantom_from_bundle(const ArrayBundle& b) {
  return Phantom{b.real("image"), b.complex("coils"), b.real("bias"), b.complex("phase")};
}

// ---- pattern ----

inline ArrayBundle to_bundle(const UndersamplingPattern& p) {
  ArrayBundle b;
  b.put_bool("mask", BoolArray({p.mask.size()}, p.mask));
  b.attributes = {{"kind", "pattern"},
                  {"acceleration", p.acceleration},
                  {"central_lines", p.central_lines},
                  {"seed", p.seed},
                  {"psf_ratio", p.psf_ratio}};
  return b;
}

inline UndersamplingPattern pattern_from_bundle(const ArrayBundle& b) {
  UndersamplingPattern p;
  p.mask = b.boolean("mask").vec();
  p.acceleration = detail::attribute<double>(b, "acceleration");
  p.central_lines = detail::attribute<std::size_t>(b, "central_lines");
  p.seed = detail::attribute<std::uint64_t>(b, "seed");
  // JSON cannot hold infinity; a pattern without sidelobes is stored as null.
  p.psf_ratio = b.attributes.at("psf_ratio").is_null() ? std::numeric_limits<double>::infinity()
                                                       : detail::attribute<double>(b, "psf_ratio");
  return p;
}

// ---- acquisition ----

/// K-space data with its forward model and the ground truth image.
inline ArrayBundle to_bundle(const Acquisition& a) {
  ArrayBundle b;
  b.put("kspace", a.data.samples);
  b.put_bool("mask", BoolArray({a.data.pattern.mask.size()}, a.data.pattern.mask));
  b.put("coils", a.model.coils);
  b.put("bias", a.model.bias);
  b.put("phase", a.model.phase);
  b.put("truth", a.truth);
  b.put("noise_cov", detail::matrix_array(a.noise_cov));
  const ArrayBundle pb = to_bundle(a.data.pattern);
  b.attributes = {{"kind", "acquisition"}, {"noise_std", a.noise_std}, {"pattern", pb.attributes}};
  return b;
}

inline Acquisition acquisition_from_bundle(const ArrayBundle& b) {
  ArrayBundle pb;
  pb.put_bool("mask", b.boolean("mask"));
  pb.attributes = detail::attribute<nlohmann::json>(b, "pattern");
  Acquisition a;
  a.data.pattern = pattern_from_bundle(pb);
  a.data.samples = b.complex("kspace");
  a.model.pattern = a.data.pattern;
  a.model.coils = b.complex("coils");
  a.model.bias = b.real("bias");
  a.model.phase = b.complex("phase");
  a.truth = b.real("truth");
  a.noise_cov = detail::array_matrix(b.complex("noise_cov"));
  a.noise_std = detail::attribute<double>(b, "noise_std");
  return a;
}

// ---- VAE ----

struct VaeModels {
  ConvEncoder encoder;
  ConvDecoder decoder;
};

inline ArrayBundle to_bundle(const ConvEncoder& enc, const ConvDecoder& dec) {
  ArrayBundle b;
  for (const auto& [name, w] : enc.parameters()) b.put("encoder." + name, w);
  for (const auto& [name, w] : dec.parameters()) b.put("decoder." + name, w);
  const auto& arch = dec.architecture();
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [name, w] : enc.parameters()) layers.push_back({{"name", "encoder." + name}, {"shape", w.shape()}});
  for (const auto& [name, w] : dec.parameters()) layers.push_back({{"name", "decoder." + name}, {"shape", w.shape()}});
  b.attributes = {{"kind", "vae"},
                  {"image_size", arch.image_size},
                  {"latent_channels", arch.latent_channels},
                  {"hidden", arch.hidden},
                  {"output_variance", dec.output_variance()},
                  {"layers", layers}};
  return b;
}

inline VaeModels vae_from_bundle(const ArrayBundle& b) {
  const ConvArchitecture arch{detail::attribute<std::size_t>(b, "image_size"),
                              detail::attribute<std::size_t>(b, "latent_channels"),
                              detail::attribute<std::size_t>(b, "hidden")};
  arch.validate();
  // Parameter names and order come from a freshly initialized model.
  auto load = [&](ParameterList params, const std::string& prefix) {
    for (auto& [name, w] : params) {
      const RealArray& stored = b.real(prefix + name);
      require_shape(stored.shape(), w.shape(), ("stored parameter " + prefix + name).c_str());
      w = stored;
    }
    return params;
  };
  VaeModels m{ConvEncoder(arch, load(ConvEncoder::initialize(arch, 0).parameters(), "encoder.")),
              ConvDecoder(arch, load(ConvDecoder::initialize(arch, 0).parameters(), "decoder."))};
  m.decoder.set_output_variance(detail::attribute<double>(b, "output_variance"));
  return m;
}

// ---- prior ----

inline ArrayBundle to_bundle(const EmpiricalPrior& p) {
  ArrayBundle b;
  b.put("mean", p.mean());
  for (std::size_t k = 0; k < p.blocks().size(); ++k) {
    b.put("block" + std::to_string(k) + ".indices", detail::index_array(p.blocks()[k].indices));
    b.put("block" + std::to_string(k) + ".cov", detail::real_matrix_array(p.blocks()[k].cov));
  }
  b.attributes = {{"kind", "prior"},
                  {"blocks", p.blocks().size()},
                  {"channel_rank", p.channel_rank()},
                  {"joint_channels", p.joint_channels()}};
  return b;
}

inline EmpiricalPrior prior_from_bundle(const ArrayBundle& b) {
  std::vector<PriorBlock> blocks;
  const auto n = detail::attribute<std::size_t>(b, "blocks");
  for (std::size_t k = 0; k < n; ++k) {
    blocks.push_back(make_block(detail::to_indices(b.real("block" + std::to_string(k) + ".indices")),
                                detail::array_real_matrix(b.real("block" + std::to_string(k) + ".cov"))));
  }
  return EmpiricalPrior(b.real("mean"), std::move(blocks),
                        detail::attribute<std::vector<std::size_t>>(b, "channel_rank"),
                        detail::attribute<std::size_t>(b, "joint_channels"));
}

// ---- chain and samples ----

inline ArrayBundle to_bundle(const ChainTrace& t) {
  ArrayBundle b;
  b.put("initial", t.initial);
  if (!t.samples.empty()) {
    Shape shape{t.samples.size()};
    for (auto d : t.samples.front().shape()) shape.push_back(d);
    RealArray all(shape);
    const std::size_t n = t.samples.front().size();
    for (std::size_t k = 0; k < t.samples.size(); ++k)
      std::copy(t.samples[k].vec().begin(), t.samples[k].vec().end(), all.vec().begin() + static_cast<std::ptrdiff_t>(k * n));
    b.put("samples", std::move(all));
  }
  b.put("sample_steps", detail::index_array(t.sample_steps));
  b.put("sample_scales", detail::vector_array(t.sample_scales));
  b.put("sample_log_post", detail::vector_array(t.sample_log_post));
  b.put("log_post", detail::vector_array(t.log_post));
  b.put_bool("accepted", BoolArray({t.accepted.size()}, t.accepted));
  b.put("tau", detail::vector_array(t.tau));
  b.attributes = {{"kind", "chain"}, {"accept_count", t.accept_count}, {"proposals", t.proposals}, {"burn_in", t.burn_in}};
  return b;
}

inline ChainTrace trace_from_bundle(const ArrayBundle& b) {
  ChainTrace t;
  t.initial = b.real("initial");
  if (b.contains("samples")) {
    const RealArray& all = b.real("samples");
    const std::size_t n = t.initial.size();
    for (std::size_t k = 0; k < all.dim(0); ++k) {
      std::vector<double> v(all.vec().begin() + static_cast<std::ptrdiff_t>(k * n),
                            all.vec().begin() + static_cast<std::ptrdiff_t>((k + 1) * n));
      t.samples.emplace_back(t.initial.shape(), std::move(v));
    }
  }
  t.sample_steps = detail::to_indices(b.real("sample_steps"));
  t.sample_scales = b.real("sample_scales").vec();
  t.sample_log_post = b.real("sample_log_post").vec();
  t.log_post = b.real("log_post").vec();
  t.accepted = b.boolean("accepted").vec();
  t.tau = b.real("tau").vec();
  t.accept_count = detail::attribute<std::size_t>(b, "accept_count");
  t.proposals = detail::attribute<std::size_t>(b, "proposals");
  t.burn_in = detail::attribute<std::size_t>(b, "burn_in");
  return t;
}

/// Image samples as stacked complex images and magnitudes plus per-sample
/// step index, scale and log posterior.
inline ArrayBundle to_bundle(const std::vector<ImageSample>& samples) {
  if (samples.empty()) throw ConfigError("no image samples to store");
  ArrayBundle b;
  const Shape& s = samples.front().image.shape();
  ComplexArray images({samples.size(), s[0], s[1]});
  RealArray mags({samples.size(), s[0], s[1]});
  const std::size_t n = samples.front().image.size();
  std::vector<double> steps, scales, lp, res;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    std::copy(samples[k].image.vec().begin(), samples[k].image.vec().end(), images.vec().begin() + static_cast<std::ptrdiff_t>(k * n));
    std::copy(samples[k].magnitude.vec().begin(), samples[k].magnitude.vec().end(), mags.vec().begin() + static_cast<std::ptrdiff_t>(k * n));
    steps.push_back(static_cast<double>(samples[k].step));
    scales.push_back(samples[k].scale);
    lp.push_back(samples[k].log_post);
    res.push_back(samples[k].cg_residual);
  }
  b.put("images", std::move(images));
  b.put("magnitudes", std::move(mags));
  b.put("step", detail::vector_array(steps));
  b.put("scale", detail::vector_array(scales));
  b.put("log_post", detail::vector_array(lp));
  b.put("cg_residual", detail::vector_array(res));
  b.attributes = {{"kind", "samples"}, {"count", samples.size()}};
  return b;
}

inline std::vector<ImageSample> samples_from_bundle(const ArrayBundle& b) {
  const ComplexArray& images = b.complex("images");
  if (images.rank() != 3) throw IoError("sample images must be stacked 2D arrays");
  const std::size_t count = images.dim(0), n = images.dim(1) * images.dim(2);
  const auto steps = detail::to_indices(b.real("step"));
  const auto& scales = b.real("scale");
  const auto& lp = b.real("log_post");
  const auto& res = b.real("cg_residual");
  const auto& mags = b.real("magnitudes");
  std::vector<ImageSample> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    auto& s = out[k];
    s.image = ComplexArray({images.dim(1), images.dim(2)},
                           std::vector<cdouble>(images.vec().begin() + static_cast<std::ptrdiff_t>(k * n),
                                                images.vec().begin() + static_cast<std::ptrdiff_t>((k + 1) * n)));
    s.magnitude = RealArray({images.dim(1), images.dim(2)},
                            std::vector<double>(mags.vec().begin() + static_cast<std::ptrdiff_t>(k * n),
                                                mags.vec().begin() + static_cast<std::ptrdiff_t>((k + 1) * n)));
    s.step = steps.at(k);
    s.scale = scales[k];
    s.log_post = lp[k];
    s.cg_residual = res[k];
  }
  return out;
}

// ---- JSON reports ----

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json to_json(const Aggregate& a) { return {{"mean", finite_or_null(a.mean)}, {"std", finite_or_null(a.std)}}; }

inline nlohmann::json to_json(const MetricsReport& r) {
  auto list = [](const std::vector<double>& v) {
    nlohmann::json j = nlohmann::json::array();
    for (double x : v) j.push_back(finite_or_null(x));
    return j;
  };
  return {{"kspace_error", list(r.kspace_error)},
          {"rmse_percent", list(r.rmse_percent)},
          {"nmse", list(r.nmse)},
          {"psnr", list(r.psnr)},
          {"kspace_error_agg", to_json(r.kspace_error_agg)},
          {"rmse_agg", to_json(r.rmse_agg)},
          {"nmse_agg", to_json(r.nmse_agg)},
          {"psnr_agg", to_json(r.psnr_agg)},
          {"pairwise_rmse", {{"mean", finite_or_null(r.pairwise.mean)}, {"std", finite_or_null(r.pairwise.std)},
                             {"pairs", r.pairwise.values.size()}}},
          {"directionality", finite_or_null(r.directionality)}};
}

inline nlohmann::json to_json(const ChainDiagnostics& d) {
  return {{"acceptance_rate", d.acceptance_rate},
          {"post_burn_in_acceptance", d.post_burn_in_acceptance},
          {"final_tau", d.final_tau},
          {"log_post_ess", d.log_post_ess},
          {"intensity_ess", d.intensity_ess},
          {"log_post_autocorrelation", d.log_post_autocorrelation}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace lms
