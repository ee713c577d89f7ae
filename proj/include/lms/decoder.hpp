#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lms/array.hpp"
#include "lms/autodiff.hpp"
#include "lms/errors.hpp"
#include "lms/random.hpp"

namespace lms {

/// Named weight arrays of a network, in a fixed order.
using ParameterList = std::vector<std::pair<std::string, RealArray>>;

inline const RealArray& find_parameter(const ParameterList& params, const std::string& name) {
  for (const auto& [n, a] : params)
    if (n == name) return a;
  throw ConfigError("missing parameter '" + name + "'");
}

/// Gaussian decoder p(x|z) = N(mean(z), output_variance * I).
class DecoderModel {
 public:
  virtual ~DecoderModel() = default;

  virtual Shape latent_shape() const = 0;
  virtual Shape output_shape() const = 0;
  /// Real image mean, shape output_shape(), recorded on the tape of z.
  virtual ad::Var forward(ad::Tape& tape, ad::Var z) const = 0;

  double output_variance() const noexcept { return output_variance_; }
  void set_output_variance(double v) {
    if (!(v > 0.0)) throw ConfigError("decoder output variance must be positive");
    output_variance_ = v;
  }

  RealArray decode_real(const RealArray& z) const {
    require_shape(z.shape(), latent_shape(), "decode");
    ad::Tape tape;
    return forward(tape, tape.constant(z)).real_value();
  }

  /// Mean image embedded as complex with zero imaginary part.
  ComplexArray decode(const RealArray& z) const { return to_complex(decode_real(z)); }

 protected:
  double output_variance_ = 0.02;
};

/// mean(z) = W vec(z) + b. Makes the whole posterior Gaussian.
class LinearDecoder final : public DecoderModel {
 public:
  LinearDecoder(Eigen::MatrixXd weight, RealArray offset, Shape latent_shape)
      : weight_(std::make_shared<const Eigen::MatrixXd>(std::move(weight))),
        offset_(std::move(offset)),
        latent_shape_(std::move(latent_shape)) {
    if (static_cast<std::size_t>(weight_->rows()) != offset_.size() ||
        static_cast<std::size_t>(weight_->cols()) != shape_size(latent_shape_)) {
      throw ShapeError("linear decoder weight does not match latent/output shapes");
    }
  }

  Shape latent_shape() const override { return latent_shape_; }
  Shape output_shape() const override { return offset_.shape(); }
  const Eigen::MatrixXd& weight() const { return *weight_; }
  const RealArray& offset() const { return offset_; }

  ad::Var forward(ad::Tape& tape, ad::Var z) const override {
    require_shape(z.shape(), latent_shape_, "linear decoder input");
    return ad::add(ad::matvec(weight_, z, offset_.shape()), tape.constant(offset_));
  }

 private:
  std::shared_ptr<const Eigen::MatrixXd> weight_;
  RealArray offset_;
  Shape latent_shape_;
};

/// Sizes of the fully convolutional encoder/decoder pair. The latent grid is
/// the image grid downsampled by 8.
struct ConvArchitecture {
  std::size_t image_size = 32;
  std::size_t latent_channels = 8;
  std::size_t hidden = 8;

  std::size_t latent_size() const { return image_size / 8; }
  Shape latent_shape() const { return {latent_channels, latent_size(), latent_size()}; }
  Shape image_shape() const { return {image_size, image_size}; }

  void validate() const {
    if (image_size < 8 || image_size % 8 != 0) throw ConfigError("conv image size must be a positive multiple of 8");
    if (latent_channels == 0 || hidden == 0) throw ConfigError("conv channel counts must be positive");
  }
};

namespace detail {

inline RealArray he_normal(Philox& rng, const Shape& shape, std::size_t fan_in) {
  RealArray w = rng.normal_array(shape);
  const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : w.data()) v *= s;
  return w;
}

inline std::vector<ad::Var> as_constants(ad::Tape& tape, const ParameterList& params) {
  std::vector<ad::Var> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(tape.constant(p.second));
  return out;
}

}  // namespace detail

/// Transposed-convolution decoder:
/// tconv 2x2/2 -> ReLU -> tconv 4x4/2 -> ReLU -> tconv 4x4/2 -> ReLU -> conv 3x3 -> 1 channel.
class ConvDecoder final : public DecoderModel {
 public:
  ConvDecoder(ConvArchitecture arch, ParameterList params) : arch_(arch), params_(std::move(params)) {
    arch_.validate();
    const std::size_t d = arch_.latent_channels, c = arch_.hidden;
    const std::vector<std::pair<std::string, Shape>> expected = {
        {"dec.up1.w", {d, c, 2, 2}}, {"dec.up1.b", {c}},          {"dec.up2.w", {c, c, 4, 4}},
        {"dec.up2.b", {c}},          {"dec.up3.w", {c, c, 4, 4}}, {"dec.up3.b", {c}},
        {"dec.out.w", {1, c, 3, 3}}, {"dec.out.b", {1}}};
    ParameterList ordered;
    for (const auto& [name, shape] : expected) {
      const RealArray& a = find_parameter(params_, name);
      require_shape(a.shape(), shape, name.c_str());
      ordered.emplace_back(name, a);
    }
    params_ = std::move(ordered);
  }

  static ConvDecoder initialize(const ConvArchitecture& arch, std::uint64_t seed) {
    arch.validate();
    Philox rng(seed, 0xdec);
    const std::size_t d = arch.latent_channels, c = arch.hidden;
    ParameterList p;
    p.emplace_back("dec.up1.w", detail::he_normal(rng, {d, c, 2, 2}, d));
    p.emplace_back("dec.up1.b", RealArray({c}));
    p.emplace_back("dec.up2.w", detail::he_normal(rng, {c, c, 4, 4}, c * 4));
    p.emplace_back("dec.up2.b", RealArray({c}));
    p.emplace_back("dec.up3.w", detail::he_normal(rng, {c, c, 4, 4}, c * 4));
    p.emplace_back("dec.up3.b", RealArray({c}));
    p.emplace_back("dec.out.w", detail::he_normal(rng, {1, c, 3, 3}, c * 9));
    p.emplace_back("dec.out.b", RealArray({1}, 0.0));
    return ConvDecoder(arch, std::move(p));
  }

  Shape latent_shape() const override { return arch_.latent_shape(); }
  Shape output_shape() const override { return arch_.image_shape(); }
  const ConvArchitecture& architecture() const { return arch_; }
  const ParameterList& parameters() const { return params_; }
  ParameterList& mutable_parameters() { return params_; }

  ad::Var forward(ad::Tape& tape, ad::Var z) const override {
    return forward_with(z, detail::as_constants(tape, params_));
  }

  /// Forward pass with the weights supplied as tape nodes (for training).
  ad::Var forward_with(ad::Var z, const std::vector<ad::Var>& w) const {
    require_shape(z.shape(), latent_shape(), "conv decoder input");
    auto h = ad::relu(ad::conv_transpose2d(z, w[0], w[1], {2, 0}));
    h = ad::relu(ad::conv_transpose2d(h, w[2], w[3], {2, 1}));
    h = ad::relu(ad::conv_transpose2d(h, w[4], w[5], {2, 1}));
    h = ad::conv2d(h, w[6], w[7], {1, 1});
    return ad::reshape(h, arch_.image_shape());
  }

 private:
  ConvArchitecture arch_;
  ParameterList params_;
};

/// Diagonal Gaussian q(z|x) = N(mean(x), diag(exp(log_std(x))^2)).
struct EncoderOutput {
  RealArray mean;
  RealArray log_std;
};

class EncoderModel {
 public:
  virtual ~EncoderModel() = default;
  virtual Shape latent_shape() const = 0;
  virtual Shape input_shape() const = 0;
  virtual EncoderOutput encode(const RealArray& x) const = 0;

  /// Encoder mean of the magnitude of a complex image.
  RealArray mean(const ComplexArray& x) const { return encode(magnitude(x)).mean; }
};

/// Least-squares inverse of a linear decoder with a fixed spread.
class LinearEncoder final : public EncoderModel {
 public:
  LinearEncoder(const LinearDecoder& decoder, double log_std)
      : pinv_(decoder.weight().completeOrthogonalDecomposition().pseudoInverse()),
        offset_(decoder.offset()),
        latent_shape_(decoder.latent_shape()),
        log_std_(log_std) {}

  Shape latent_shape() const override { return latent_shape_; }
  Shape input_shape() const override { return offset_.shape(); }

  EncoderOutput encode(const RealArray& x) const override {
    require_shape(x.shape(), offset_.shape(), "linear encoder input");
    Eigen::VectorXd r(static_cast<Eigen::Index>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) r(static_cast<Eigen::Index>(i)) = x[i] - offset_[i];
    const Eigen::VectorXd z = pinv_ * r;
    return {RealArray(latent_shape_, std::vector<double>(z.data(), z.data() + z.size())),
            RealArray(latent_shape_, log_std_)};
  }

 private:
  Eigen::MatrixXd pinv_;
  RealArray offset_;
  Shape latent_shape_;
  double log_std_;
};

/// Convolutional encoder:
/// conv 3x3 -> ReLU -> conv 4x4/2 -> ReLU -> conv 4x4/2 -> ReLU -> two conv 2x2/2 heads.
class ConvEncoder final : public EncoderModel {
 public:
  ConvEncoder(ConvArchitecture arch, ParameterList params) : arch_(arch), params_(std::move(params)) {
    arch_.validate();
    const std::size_t d = arch_.latent_channels, c = arch_.hidden;
    const std::vector<std::pair<std::string, Shape>> expected = {
        {"enc.in.w", {c, 1, 3, 3}},  {"enc.in.b", {c}},          {"enc.down1.w", {c, c, 4, 4}},
        {"enc.down1.b", {c}},        {"enc.down2.w", {c, c, 4, 4}}, {"enc.down2.b", {c}},
        {"enc.mean.w", {d, c, 2, 2}}, {"enc.mean.b", {d}},        {"enc.logstd.w", {d, c, 2, 2}},
        {"enc.logstd.b", {d}}};
    ParameterList ordered;
    for (const auto& [name, shape] : expected) {
      const RealArray& a = find_parameter(params_, name);
      require_shape(a.shape(), shape, name.c_str());
      ordered.emplace_back(name, a);
    }
    params_ = std::move(ordered);
  }

  static ConvEncoder initialize(const ConvArchitecture& arch, std::uint64_t seed) {
    arch.validate();
    Philox rng(seed, 0xe1c);
    const std::size_t d = arch.latent_channels, c = arch.hidden;
    ParameterList p;
    p.emplace_back("enc.in.w", detail::he_normal(rng, {c, 1, 3, 3}, 9));
    p.emplace_back("enc.in.b", RealArray({c}));
    p.emplace_back("enc.down1.w", detail::he_normal(rng, {c, c, 4, 4}, c * 16));
    p.emplace_back("enc.down1.b", RealArray({c}));
    p.emplace_back("enc.down2.w", detail::he_normal(rng, {c, c, 4, 4}, c * 16));
    p.emplace_back("enc.down2.b", RealArray({c}));
    RealArray mean_w = detail::he_normal(rng, {d, c, 2, 2}, c * 4);
    p.emplace_back("enc.mean.w", mean_w);
    p.emplace_back("enc.mean.b", RealArray({d}));
    RealArray logstd_w = detail::he_normal(rng, {d, c, 2, 2}, c * 4);
    for (auto& v : logstd_w.data()) v *= 0.1;
    p.emplace_back("enc.logstd.w", logstd_w);
    p.emplace_back("enc.logstd.b", RealArray({d}));
    return ConvEncoder(arch, std::move(p));
  }

  Shape latent_shape() const override { return arch_.latent_shape(); }
  Shape input_shape() const override { return arch_.image_shape(); }
  const ConvArchitecture& architecture() const { return arch_; }
  const ParameterList& parameters() const { return params_; }
  ParameterList& mutable_parameters() { return params_; }

  std::pair<ad::Var, ad::Var> forward_with(ad::Var x, const std::vector<ad::Var>& w) const {
    require_shape(x.shape(), input_shape(), "conv encoder input");
    auto h = ad::reshape(x, {1, arch_.image_size, arch_.image_size});
    h = ad::relu(ad::conv2d(h, w[0], w[1], {1, 1}));
    h = ad::relu(ad::conv2d(h, w[2], w[3], {2, 1}));
    h = ad::relu(ad::conv2d(h, w[4], w[5], {2, 1}));
    return {ad::conv2d(h, w[6], w[7], {2, 0}), ad::conv2d(h, w[8], w[9], {2, 0})};
  }

  EncoderOutput encode(const RealArray& x) const override {
    ad::Tape tape;
    auto [mean, log_std] = forward_with(tape.constant(x), detail::as_constants(tape, params_));
    return {mean.real_value(), log_std.real_value()};
  }

 private:
  ConvArchitecture arch_;
  ParameterList params_;
};

}  // namespace lms
