#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace implicit_lqg;
using namespace testing_support;

namespace {

struct Scene {
  ValidatedSystem sys;
  ValidatedObservation obs;
  RiccatiSolution ric;
  ControllerFilter cf;
  LinearGaussianPolicy policy;
  ExtendedSystem ext;
};

Scene make(const LqgSystem& plant, const ObservationModel& model, const Matrix& phi) {
  auto sys = validate_system(plant);
  auto obs = validate_observation(sys, model);
  auto ric = solve_dare_control(sys);
  auto cf = controller_filter(sys, obs, ric);
  LinearGaussianPolicy policy{ric.gain, phi};
  auto ext = build_extended(sys, obs, cf, policy);
  return {std::move(sys), std::move(obs), std::move(ric), std::move(cf), std::move(policy),
          std::move(ext)};
}

Scene coupled(const Matrix& phi = from_rows({{0.4, 0.1}, {0.1, 0.2}})) {
  return make(coupled_plant(), coupled_observation(), phi);
}

Trajectory run(const Scene& s, std::size_t n, std::uint64_t seed) {
  return simulate(s.sys, s.obs, s.cf, s.policy, n, seed);
}

// Columns t0.. of a matrix.
Matrix tail_cols(const Matrix& m, Eigen::Index t0) { return m.rightCols(m.cols() - t0); }

}  // namespace

TEST(TranslationPipeline, InverseInvariants) {
  Random rng(17);
  for (int k = 0; k < 20; ++k) {
    // d2 + d3 >= d1 keeps Φ̄ + Ψ_w̄ + Ψ_q̄ full rank.
    const Eigen::Index d1 = rng.integer(1, 3), d2 = rng.integer(1, 2);
    const auto sys = rng.system(d1, d2);
    const auto obs = rng.observation(sys, std::max<Eigen::Index>(rng.integer(1, 3), d1 - d2));
    const auto ric = solve_dare_control(sys);
    const auto cf = controller_filter(sys, obs, ric);
    const TranslationPipeline p(
        build_extended(sys, obs, cf, {ric.gain, rng.pd(sys.input_dim(), 0.05)}));
    EXPECT_LE(linalg::max_abs(p.l_rho_pinv() * p.ext().l_rho - eye(d1)), 1e-9);
    EXPECT_LE(linalg::max_abs(p.iaq_inv() * p.iaq() - eye(2 * d1)), 1e-9);
    EXPECT_LT(tau_radius(p.ext()), 1.0);
  }
}

TEST(TranslationPipeline, RankDeficientNoiseRejected) {
  // d1 = 3 with a single input and a single controller observation.
  const auto sys = validate_system({from_rows({{0.5, 1.0, 0.0}, {0.0, 0.5, 1.0}, {0.0, 0.0, 0.5}}),
                                    from_rows({{0.0}, {0.0}, {1.0}}), eye(3), eye(1), eye(3),
                                    eye(3)});
  const auto obs = validate_observation(sys, {from_rows({{1.0, 0.0, 0.0}}), eye(1), eye(3), eye(3)});
  const auto ric = solve_dare_control(sys);
  const auto cf = controller_filter(sys, obs, ric);
  const auto ext = build_extended(sys, obs, cf, {ric.gain, eye(1)});
  EXPECT_LE(iaq_residual(ext), 1e-8);
  try {
    TranslationPipeline p(ext);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotInvertible);
  }
}

TEST(TranslationPipeline, ZeroNoiseGivesZeroOutput) {
  const auto s = coupled();
  SimulationOptions opts;
  opts.noise_scale = 0.0;
  opts.zero_initial_state = true;
  const auto tr = simulate(s.sys, s.obs, s.cf, s.policy, 500, 3, opts);
  TranslationPipeline p(s.ext);
  const Matrix y = translate_stream(p, tr.z);
  EXPECT_EQ(y.cols(), 500);
  EXPECT_EQ(linalg::max_abs(y), 0.0);
}

TEST(TranslationPipeline, TooShortStream) {
  const auto s = coupled();
  TranslationPipeline p(s.ext);
  try {
    translate_stream(p, Matrix::Zero(2, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTooShort);
  }
}

TEST(TranslationPipeline, GroundTruthReplay) {
  for (const auto& s : {coupled(), make(golden_plant(), scalar_observation(1.0, 1.0),
                                        scalar(1.0))}) {
    TranslationPipeline p(s.ext);
    const auto rep = replay_translation(p, run(s, 5000, 11));
    EXPECT_LE(rep.identity_residual, 1e-8);
    EXPECT_LE(rep.block_residual, 1e-8);
    EXPECT_LE(rep.tau_residual, 1e-8);
    EXPECT_LE(rep.roundtrip_residual, 1e-8);
  }
}

TEST(TranslationPipeline, Causality) {
  const auto s = coupled();
  const auto tr = run(s, 400, 5);
  TranslationPipeline p(s.ext);
  const Matrix full = translate_stream(p, tr.z);
  for (Eigen::Index cut : {2, 37, 200}) {
    const Matrix part = translate_stream(p, tr.z.leftCols(cut + 1));
    ASSERT_EQ(part.cols(), cut);
    EXPECT_TRUE((part.array() == full.leftCols(cut).array()).all()) << cut;
  }
}

TEST(TranslationPipeline, RecoversObservationFromOutput) {
  const auto s = coupled();
  const auto tr = run(s, 300, 8);
  TranslationPipeline p(s.ext);
  for (Eigen::Index t = 0; t + 1 < tr.z.cols(); ++t) {
    const Vector prior = p.state();
    const auto step = p.step(tr.z.col(t + 1));
    EXPECT_LE((p.recover_observation(step.y_bar, prior) - tr.z.col(t + 1)).cwiseAbs().maxCoeff(),
              1e-8);
  }
}

TEST(TauRecursion, ZeroStep) {
  const auto s = coupled();
  const Vector tau = tau_recursion_step(s.ext, Vector::Zero(4), Vector::Zero(2),
                                        Vector::Zero(2), Vector::Zero(1), Vector::Zero(2));
  EXPECT_EQ(tau, Vector::Zero(4));
}

TEST(ChannelCovariances, ZeroSignal) {
  const auto s = coupled(Matrix::Zero(2, 2));
  const auto c = analytic_channel_covariances(s.ext);
  EXPECT_LE(linalg::max_abs(c.cov_ybar - c.cov_beta), 1e-12);
}

TEST(ChannelCovariances, NoiselessLimit) {
  const Matrix phi = from_rows({{0.4, 0.1}, {0.1, 0.2}});
  const auto s = make(coupled_plant(), identity_observation(2, 1e-8), phi);
  const auto c = analytic_channel_covariances(s.ext);
  const Matrix w = s.sys.psi_w();
  EXPECT_LE(linalg::max_abs(c.cov_ybar - (s.sys.b() * phi * s.sys.b().transpose() + w)), 1e-6);
  EXPECT_LE(linalg::max_abs(c.cov_beta - w), 1e-6);
}

class MonteCarlo : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    setup_ = new Scene(coupled());
    TranslationPipeline p(setup_->ext);
    trajectory_ = new Trajectory(run(*setup_, 100000, 42));
    replay_ = new ReplayReport(replay_translation(p, *trajectory_));
  }
  static void TearDownTestSuite() {
    delete setup_;
    delete trajectory_;
    delete replay_;
  }
  static constexpr Eigen::Index kBurn = 200;
  static Scene* setup_;
  static Trajectory* trajectory_;
  static ReplayReport* replay_;
};

Scene* MonteCarlo::setup_ = nullptr;
Trajectory* MonteCarlo::trajectory_ = nullptr;
ReplayReport* MonteCarlo::replay_ = nullptr;

TEST_F(MonteCarlo, TauCovarianceMatchesFilteredCovariance) {
  const auto& s = *setup_;
  const auto& tr = *trajectory_;
  TranslationPipeline p(s.ext);
  Matrix tau(4, tr.z.cols() - 1);
  for (Eigen::Index t = 0; t + 1 < tr.z.cols(); ++t) {
    p.step(tr.z.col(t + 1));
    Vector rho(4);
    rho << tr.x.col(t + 1), tr.x.col(t + 1) - tr.x_check.col(t + 1);
    tau.col(t) = rho - p.state();
  }
  EXPECT_LE(rel_frobenius(sample_cov(tail_cols(tau, kBurn)), s.ext.sigma_rho_tilde), 0.03);
}

TEST_F(MonteCarlo, OutputCovariance) {
  const auto c = analytic_channel_covariances(setup_->ext);
  EXPECT_LE(rel_frobenius(sample_cov(tail_cols(replay_->y_bar, kBurn)), c.cov_ybar), 0.03);
}

TEST_F(MonteCarlo, NoiseLagZeroCovariance) {
  const auto c = analytic_channel_covariances(setup_->ext);
  const Matrix beta = tail_cols(replay_->beta, kBurn);
  EXPECT_LE(rel_frobenius(sample_cov(beta), c.cov_beta_marginal), 0.03);
  EXPECT_LE(beta.rowwise().mean().cwiseAbs().maxCoeff(), 0.02);
}

TEST_F(MonteCarlo, InformedInnovationCovariance) {
  const auto c = analytic_channel_covariances(setup_->ext);
  const auto rate = empirical_rate(*trajectory_, setup_->ext);
  EXPECT_LE(rel_frobenius(rate.cov_with_signal, c.cov_beta), 0.03);
  EXPECT_LE(rel_frobenius(rate.cov_without_signal, c.cov_ybar), 0.03);
}

TEST_F(MonteCarlo, RegressionRecoversInputMap) {
  const Matrix y = tail_cols(replay_->y_bar, kBurn);
  const Matrix s = tail_cols(trajectory_->s, kBurn);
  const Matrix ys = y * s.transpose();
  const Matrix ss = s * s.transpose();
  const Matrix coef = ss.ldlt().solve(ys.transpose()).transpose();
  const Matrix target = setup_->ext.d_r * setup_->sys.b();
  EXPECT_LE(rel_frobenius(coef, target), 0.02);

  // Ground-truth noise against the signal.
  const Matrix beta = tail_cols(replay_->beta, kBurn);
  const Vector mb = beta.rowwise().mean(), ms = s.rowwise().mean();
  const Matrix bc = beta.colwise() - mb, sc = s.colwise() - ms;
  for (Eigen::Index i = 0; i < bc.rows(); ++i)
    for (Eigen::Index j = 0; j < sc.rows(); ++j) {
      const double corr = bc.row(i).dot(sc.row(j)) / (bc.row(i).norm() * sc.row(j).norm());
      EXPECT_LE(std::abs(corr), 0.01) << i << "," << j;
    }
}
