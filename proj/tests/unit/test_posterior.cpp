#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>

#include "fixtures.hpp"
#include "linear_gaussian.hpp"
#include "lms/noise.hpp"
#include "lms/posterior.hpp"

using namespace lms;
using lms::testing::flat;
using lms::testing::LinearGaussianOracle;
using lms::testing::unflat;

namespace {

AcquisitionModel unit_scale(AcquisitionModel m) {
  m.scale = 1.0;
  return m;
}

ComplexArray simulate(const Encoding& enc, const ComplexArray& x, double scale, double sigma, std::uint64_t seed) {
  ComplexArray y = enc.encode.apply(x);
  for (auto& v : y.data()) v *= scale;
  Philox rng(seed, 0x5d);
  for (auto& v : y.data()) v += sigma * cdouble(rng.normal(), rng.normal()) / std::sqrt(2.0);
  return y;
}

PosteriorTarget make_target(const AcquisitionModel& model, std::shared_ptr<const DecoderModel> dec,
                            const ComplexArray& data, int cg_iterations, double fixed_scale = 1.0) {
  PosteriorTarget t;
  t.decoder = std::move(dec);
  t.prior = EmpiricalPrior::standard_normal(t.decoder->latent_shape());
  t.encoding = build_encoding(model);
  t.data = data;
  t.cg.iterations = cg_iterations;
  t.scale_policy = ScalePolicy::Fixed;
  t.fixed_scale = fixed_scale;
  return t;
}

/// Linear decoder on an 8x8 image, two coils, padded grid, R = 2.
struct LinearProblem {
  AcquisitionModel model;
  std::shared_ptr<LinearDecoder> decoder;
  RealArray z_true;
  PosteriorTarget target;

  explicit LinearProblem(double sigma, int cg = 200, std::uint64_t seed = 3) {
    model = unit_scale(lms::testing::random_model(seed, 8, 8, 2, 2, 2, 2.0));
    decoder = lms::testing::random_linear_decoder(seed, {8, 8}, {2, 2, 2}, 0.3);
    Philox rng(seed, 0x2);
    z_true = rng.normal_array({2, 2, 2});
    const Encoding enc = build_encoding(model);
    const ComplexArray y = simulate(enc, decoder->decode(z_true), 1.3, sigma, seed);
    target = make_target(model, decoder, y, cg, 1.3);
  }
};

double likelihood_value(const PosteriorTarget& t, const RealArray& z) {
  ad::Tape tape;
  return log_likelihood(t, tape, tape.constant(z)).value.scalar();
}

}  // namespace

TEST(MarginalLikelihoodTest, MatchesDenseMarginalOnTinyProblem) {
  // 2x2 image, one coil, one of two lines: N = 4 pixels, M = 2 samples.
  AcquisitionModel m = lms::testing::identity_model(2, 2);
  m.pattern = generate_pattern(2, 2.0, 1, 5, 0);
  ASSERT_EQ(m.pattern.measured_count(), 1u);
  Philox rng(9);
  m.coils = ComplexArray({1, 2, 2});
  for (auto& c : m.coils.data()) c = cdouble(0.5 + rng.uniform(), rng.normal() * 0.3);
  m.noise_cov = Eigen::MatrixXcd::Constant(1, 1, cdouble(0.3));
  auto dec = lms::testing::random_linear_decoder(4, {2, 2}, {1, 1, 3});
  const Encoding enc = build_encoding(m);
  ASSERT_EQ(enc.encode.codomain_shape(), (Shape{1, 1, 2}));
  const auto t = make_target(m, dec, simulate(enc, dec->decode(rng.normal_array({1, 1, 3})), 0.8, 0.5, 1), 8, 0.8);
  const LinearGaussianOracle oracle(t);
  for (int trial = 0; trial < 5; ++trial) {
    const RealArray z1 = rng.normal_array({1, 1, 3});
    const RealArray z2 = rng.normal_array({1, 1, 3});
    const double got = likelihood_value(t, z1) - likelihood_value(t, z2);
    const double want = oracle.log_likelihood(z1) - oracle.log_likelihood(z2);
    EXPECT_NEAR(got, want, 1e-6 * std::max(1.0, std::abs(want)));
  }
}

TEST(MarginalLikelihoodTest, MatchesDenseMarginalWithCorrelatedNoise) {
  AcquisitionModel m = unit_scale(lms::testing::random_model(11, 6, 6, 3, 2, 0, 2.0));
  Philox rng(12);
  m.noise_cov = lms::testing::random_covariance(rng, 3, 0.8);
  auto dec = lms::testing::random_linear_decoder(5, {6, 6}, {2, 1, 2}, 0.5);
  const Encoding enc = build_encoding(m);
  const auto t = make_target(m, dec, simulate(enc, dec->decode(rng.normal_array({2, 1, 2})), 1.0, 0.2, 2), 300);
  const LinearGaussianOracle oracle(t);
  for (int trial = 0; trial < 5; ++trial) {
    const RealArray z1 = rng.normal_array({2, 1, 2});
    const RealArray z2 = rng.normal_array({2, 1, 2});
    const double want = oracle.log_likelihood(z1) - oracle.log_likelihood(z2);
    EXPECT_NEAR(likelihood_value(t, z1) - likelihood_value(t, z2), want, 1e-6 * std::max(1.0, std::abs(want)));
  }
}

TEST(MarginalLikelihoodTest, GeneratingLatentBeatsRandomLatentsAtLowNoise) {
  LinearProblem p(1e-3);
  const double truth = likelihood_value(p.target, p.z_true);
  Philox rng(21);
  for (int i = 0; i < 10; ++i) EXPECT_GT(truth, likelihood_value(p.target, rng.normal_array({2, 2, 2})));
}

TEST(MarginalLikelihoodTest, HugeNoiseMakesLikelihoodFlat) {
  LinearProblem p(1e-2);
  p.target.encoding = build_encoding([&] {
    AcquisitionModel m = p.model;
    m.noise_cov = 1e12 * Eigen::MatrixXcd::Identity(2, 2);
    return m;
  }());
  Philox rng(22);
  const double base = likelihood_value(p.target, p.z_true);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(likelihood_value(p.target, rng.normal_array({2, 2, 2})), base, 1e-6);
}

TEST(MarginalLikelihoodTest, CgResidualReportedAndSmallWhenConverged) {
  LinearProblem p(1e-2, 200);
  const auto ev = log_posterior_and_grad(p.target, p.z_true);
  EXPECT_LT(ev.cg_residual, 1e-10);
  EXPECT_FALSE(ev.residual_warning);
  p.target.cg.iterations = 1;
  const auto rough = log_posterior_and_grad(p.target, p.z_true);
  EXPECT_GT(rough.cg_residual, 1e-4);
  EXPECT_TRUE(rough.residual_warning);
}

TEST(MarginalLikelihoodTest, DoublingCgIterationsChangesLittle) {
  LinearProblem p(1e-2, 40);
  const auto a = log_posterior_and_grad(p.target, p.z_true);
  p.target.cg.iterations = 80;
  const auto b = log_posterior_and_grad(p.target, p.z_true);
  EXPECT_LE(std::abs(a.log_likelihood - b.log_likelihood), 1e-3 * std::abs(b.log_likelihood));
  EXPECT_LE(norm(a.grad - b.grad), 1e-3 * norm(b.grad));
}

TEST(PosteriorGradientTest, LinearDecoderMatchesClosedForm) {
  LinearProblem p(5e-2);
  const LinearGaussianOracle oracle(p.target);
  Philox rng(31);
  for (int i = 0; i < 3; ++i) {
    const RealArray z = rng.normal_array({2, 2, 2});
    const Eigen::VectorXd want = oracle.grad(z);
    const Eigen::VectorXd got = flat(log_posterior_and_grad(p.target, z).grad);
    EXPECT_LE((got - want).norm(), 1e-6 * want.norm());
  }
}

TEST(PosteriorGradientTest, FiniteDifferencesLinearDecoder) {
  LinearProblem p(5e-2);
  Philox rng(32);
  const RealArray z = rng.normal_array({2, 2, 2});
  EXPECT_LE(ad::finite_difference_check(log_posterior_objective(p.target), z, 1e-5), 1e-4);
}

TEST(PosteriorGradientTest, TapedObjectiveAgreesWithEvaluation) {
  LinearProblem p(5e-2);
  Philox rng(33);
  const RealArray z = rng.normal_array({2, 2, 2});
  const auto ev = log_posterior_and_grad(p.target, z);
  ad::Tape tape;
  const auto zv = tape.variable(z);
  const auto obj = log_posterior_objective(p.target)(tape, zv);
  EXPECT_NEAR(obj.scalar(), ev.log_post, 1e-9 * std::abs(ev.log_post));
  EXPECT_LE(norm(tape.gradient(obj, zv) - ev.grad), 1e-9 * norm(ev.grad));
}

TEST(PosteriorGradientTest, FiniteDifferencesConvDecoder) {
  const ConvArchitecture arch{8, 4, 4};
  auto dec = std::make_shared<ConvDecoder>(ConvDecoder::initialize(arch, 7));
  const AcquisitionModel m = unit_scale(lms::testing::random_model(8, 8, 8, 2, 0, 2, 2.0));
  Philox rng(34);
  const RealArray z0 = rng.normal_array(arch.latent_shape());
  const Encoding enc = build_encoding(m);
  auto t = make_target(m, dec, simulate(enc, dec->decode(z0), 1.0, 0.05, 3), 30);
  t = with_fixed_scale([&] {
    PosteriorTarget p = t;
    p.scale_policy = ScalePolicy::PerEvaluation;
    return p;
  }(), z0);
  EXPECT_GT(t.fixed_scale, 0.0);
  for (int i = 0; i < 3; ++i) {
    const RealArray z = rng.normal_array(arch.latent_shape());
    EXPECT_LE(ad::finite_difference_check(log_posterior_objective(t), z, 1e-6), 1e-4) << "trial " << i;
  }
}

TEST(PosteriorGradientTest, TruncatedCgGradientIsExactForTruncatedObjective) {
  LinearProblem p(5e-2, 3);
  Philox rng(35);
  const RealArray z = rng.normal_array({2, 2, 2});
  EXPECT_LE(ad::finite_difference_check(log_posterior_objective(p.target), z, 1e-5), 1e-4);
}

TEST(PosteriorGradientTest, PriorOnlyGradientVanishesAtPriorMean) {
  LinearProblem p(5e-2);
  p.target.likelihood_weight = 0.0;
  const auto ev = log_posterior_and_grad(p.target, p.target.prior.mean());
  EXPECT_EQ(norm(ev.grad), 0.0);
  EXPECT_EQ(ev.log_post, 0.0);
  Philox rng(36);
  const RealArray z = rng.normal_array({2, 2, 2});
  const auto off = log_posterior_and_grad(p.target, z);
  EXPECT_LE(norm(off.grad + z), 1e-12);
}

TEST(PosteriorScaleTest, PerEvaluationScaleIsLeastSquaresFit) {
  LinearProblem p(1e-6);
  p.target.scale_policy = ScalePolicy::PerEvaluation;
  const auto ev = log_posterior_and_grad(p.target, p.z_true);
  EXPECT_NEAR(ev.scale_used, 1.3, 1e-5);
}

TEST(PosteriorScaleTest, NonPositiveScaleIsDegenerate) {
  LinearProblem p(1e-6);
  p.target.scale_policy = ScalePolicy::PerEvaluation;
  for (auto& v : p.target.data.data()) v = -v;
  EXPECT_THROW(log_posterior_and_grad(p.target, p.z_true), DegenerateError);
}

TEST(PosteriorScaleTest, InvalidTargetsRejected) {
  LinearProblem p(1e-2);
  auto bad = p.target;
  bad.cg.iterations = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = p.target;
  bad.fixed_scale = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = p.target;
  bad.data = ComplexArray({1, 2, 3});
  EXPECT_THROW(bad.validate(), ShapeError);
  bad = p.target;
  bad.decoder = nullptr;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(PosteriorWhiteningTest, PrewhitenedProblemGivesSameLikelihoodDifferences) {
  AcquisitionModel m = unit_scale(lms::testing::random_model(41, 8, 8, 3, 2, 2, 2.0));
  Philox rng(42);
  m.noise_cov = lms::testing::random_covariance(rng, 3, 1.5);
  auto dec = lms::testing::random_linear_decoder(43, {8, 8}, {2, 2, 1}, 0.3);
  const Encoding enc = build_encoding(m);
  const ComplexArray y = simulate(enc, dec->decode(rng.normal_array({2, 2, 1})), 1.0, 0.1, 4);
  const auto correlated = make_target(m, dec, y, 300);

  const Eigen::MatrixXcd w = m.noise_cov.llt().matrixL().solve(Eigen::MatrixXcd::Identity(3, 3));
  AcquisitionModel mw = m;
  mw.coils = mix_coils(w, m.coils);
  mw.noise_cov = Eigen::MatrixXcd();
  const auto white = make_target(mw, dec, mix_coils(w, y), 300);

  for (int i = 0; i < 4; ++i) {
    const RealArray z1 = rng.normal_array({2, 2, 1});
    const RealArray z2 = rng.normal_array({2, 2, 1});
    const double a = likelihood_value(correlated, z1) - likelihood_value(correlated, z2);
    const double b = likelihood_value(white, z1) - likelihood_value(white, z2);
    EXPECT_NEAR(a, b, 1e-6 * std::max(1.0, std::abs(a)));
  }
}

TEST(MapEstimateTest, ConvergesToClosedFormMean) {
  LinearProblem p(5e-2);
  const LinearGaussianOracle oracle(p.target);
  const auto res = map_estimate(p.target, RealArray({2, 2, 2}), 3000, 1e-3);
  EXPECT_LE((flat(res.z) - oracle.mean).norm(), 1e-4 * std::max(1.0, oracle.mean.norm()));
  for (std::size_t i = 1; i < res.trace.size(); ++i) EXPECT_GE(res.trace[i], res.trace[i - 1]);
}

TEST(MapEstimateTest, OptimumIsAFixedPoint) {
  LinearProblem p(5e-2);
  const LinearGaussianOracle oracle(p.target);
  const RealArray start = unflat(oracle.mean, {2, 2, 2});
  const auto res = map_estimate(p.target, start, 50, 1e-3);
  EXPECT_LE((flat(res.z) - oracle.mean).norm(), 1e-8 * std::max(1.0, oracle.mean.norm()));
  EXPECT_NEAR(res.log_post, res.trace.front(), 1e-9 * std::abs(res.log_post));
}

TEST(MapEstimateTest, RejectsBadArguments) {
  LinearProblem p(5e-2);
  EXPECT_THROW(map_estimate(p.target, p.z_true, 0, 1e-3), ConfigError);
  EXPECT_THROW(map_estimate(p.target, p.z_true, 10, 0.0), ConfigError);
}
