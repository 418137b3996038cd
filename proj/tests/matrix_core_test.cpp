#include "kbflow/matrix_core.hpp"
#include "support/random_models.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace kbflow;

namespace {

Mat m2(double a, double b, double c, double d) {
  Mat m(2, 2);
  m << a, b, c, d;
  return m;
}

Mat taylor_exp(const Mat& a, double t) {
  Mat term = Mat::Identity(a.rows(), a.cols()), sum = term;
  for (int k = 1; k < 80; ++k) {
    term = term * a * t / k;
    sum += term;
  }
  return sum;
}

}  // namespace

TEST(SymMat, SymmetrizesOnIngest) {
  const SymMat s(m2(1, 2, 0, 1));
  EXPECT_DOUBLE_EQ(s(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(s(1, 0), 1.0);
  EXPECT_THROW(SymMat(Mat::Zero(2, 3)), std::invalid_argument);
}

TEST(SpdMat, CertifiesAndRejects) {
  EXPECT_NO_THROW(SpdMat::certify(SymMat::identity(3)));
  EXPECT_THROW(SpdMat::certify(SymMat::diagonal(Vec::LinSpaced(2, -1.0, 1.0))), NumericalError);
  // Round-off sized negative eigenvalues are clamped.
  const SpdMat p = SpdMat::certify(SymMat::diagonal(Vec::LinSpaced(2, -1e-14, 1.0)));
  EXPECT_GE(p.sym().lambda_min(), 0.0);
  EXPECT_FALSE(p.invertible());
}

TEST(LogNorm, Oracles) {
  EXPECT_NEAR(log_norm(Vec::LinSpaced(2, -1.0, -2.0).asDiagonal().toDenseMatrix()), -1.0, 1e-14);
  EXPECT_NEAR(log_norm(Mat::Zero(3, 3)), 0.0, 1e-14);
  EXPECT_NEAR(log_norm(m2(0, 2, 0, 0)), 1.0, 1e-14);
}

TEST(SpectralAbscissa, Oracles) {
  EXPECT_NEAR(spectral_abscissa(m2(-1, 0, 0, -2)), -1.0, 1e-14);
  EXPECT_NEAR(spectral_abscissa(m2(0, -1, 1, 0)), 0.0, 1e-14);
  EXPECT_NEAR(spectral_abscissa(m2(-1, 10, 0, -2)), -1.0, 1e-12);
}

TEST(SpectralAbscissa, BoundedByLogNorm) {
  std::mt19937_64 rng(7);
  for (int k = 0; k < 50; ++k) {
    const Mat a = test_support::gaussian_matrix(rng, 4, 4);
    EXPECT_LE(spectral_abscissa(a), log_norm(a) + 1e-12);
  }
}

TEST(MatExp, Oracles) {
  EXPECT_TRUE(mat_exp(Mat::Zero(3, 3), 5.0).isApprox(Mat::Identity(3, 3)));
  EXPECT_NEAR(mat_exp(Mat::Identity(1, 1), 1.0)(0, 0), std::numbers::e, 1e-14);
  const Mat rot = m2(0, -1, 1, 0);
  EXPECT_LE((mat_exp(rot, std::numbers::pi) + Mat::Identity(2, 2)).norm(), 1e-12);
  EXPECT_LE((mat_exp(rot, std::numbers::pi) - taylor_exp(rot, std::numbers::pi)).norm(), 1e-12);
}

TEST(MatExp, MatchesTaylorAndGroupProperty) {
  std::mt19937_64 rng(11);
  for (int k = 0; k < 20; ++k) {
    const Mat a = test_support::gaussian_matrix(rng, 3, 3, 0.5);
    const Mat e = mat_exp(a, 1.3);
    EXPECT_LE((e - taylor_exp(a, 1.3)).norm(), 1e-11 * (1.0 + e.norm()));
    EXPECT_LE((mat_exp(a, 0.4) * mat_exp(a, 0.9) - e).norm(), 1e-11 * (1.0 + e.norm()));
  }
}

TEST(TransitionMatrix, Oracles) {
  const auto zero = MatrixFlow::constant(Mat::Zero(2, 2));
  EXPECT_TRUE(transition_matrix(zero, 0.0, 3.0).isApprox(Mat::Identity(2, 2)));
  const auto decay = MatrixFlow::constant(Mat::Constant(1, 1, -1.0));
  EXPECT_NEAR(transition_matrix(decay, 0.0, 1.0)(0, 0), std::exp(-1.0), 1e-12);
  const auto ramp = MatrixFlow::closed_form(1, 1, [](double t) { return Mat::Constant(1, 1, t); });
  EXPECT_NEAR(transition_matrix(ramp, 0.0, 1.0)(0, 0), std::exp(0.5), 1e-10);
}

TEST(TransitionMatrix, FlowProperty) {
  const auto flow = MatrixFlow::closed_form(2, 2, [](double t) {
    Mat a(2, 2);
    a << -1.0, std::sin(t), 0.5 * std::cos(t), -0.5;
    return a;
  });
  const Mat e02 = transition_matrix(flow, 0.0, 2.0);
  const Mat e12 = transition_matrix(flow, 1.0, 2.0);
  const Mat e01 = transition_matrix(flow, 0.0, 1.0);
  EXPECT_LE((e02 - e12 * e01).norm(), 1e-9);
  EXPECT_TRUE(transition_matrix(flow, 1.5, 1.5).isApprox(Mat::Identity(2, 2)));
}

TEST(ExpNormEstimate, Oracles) {
  const ExpNormEstimate d = exp_norm_estimate(Mat::Identity(2, 2) * -1.0, 1.0);
  EXPECT_NEAR(d.lower, std::exp(-1.0), 1e-14);
  EXPECT_NEAR(d.schur_upper, std::exp(-1.0), 1e-14);
  const ExpNormEstimate z = exp_norm_estimate(Mat::Zero(2, 2), 4.0);
  EXPECT_NEAR(z.lower, 1.0, 1e-14);
  EXPECT_NEAR(z.schur_upper, 1.0, 1e-14);
  const Mat a = m2(-1, 3, 0, -1);
  const ExpNormEstimate j = exp_norm_estimate(a, 1.0);
  EXPECT_NEAR(j.lower, std::exp(-1.0), 1e-12);
  EXPECT_NEAR(j.schur_upper, std::exp(-1.0) * (1.0 + 3.0 + 4.5), 1e-10);
  EXPECT_LE(op_norm(mat_exp(a, 1.0)), j.schur_upper);
}

TEST(ExpNormEstimate, BracketsTheExponential) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 30; ++k) {
    const Mat a = test_support::gaussian_matrix(rng, 3, 3);
    const double n = op_norm(mat_exp(a, 0.7));
    const ExpNormEstimate e = exp_norm_estimate(a, 0.7);
    EXPECT_LE(e.lower, n * (1.0 + 1e-10));
    EXPECT_GE(e.schur_upper, n * (1.0 - 1e-10));
  }
}

TEST(Loewner, Oracles) {
  EXPECT_TRUE(loewner_leq(SymMat::zero(2), SymMat::identity(2), 1e-12));
  EXPECT_FALSE(loewner_leq(SymMat::identity(2), SymMat::zero(2), 1e-12));
  EXPECT_FALSE(loewner_leq(SymMat::diagonal(Vec::LinSpaced(2, 1.0, 3.0)), 2.0 * SymMat::identity(2), 1e-12));
}

TEST(SymMat, HoffmannWielandtAndNormEquivalence) {
  std::mt19937_64 rng(5);
  for (int k = 0; k < 50; ++k) {
    const SymMat x = test_support::random_sym(rng, 4), y = test_support::random_sym(rng, 4);
    const double spec = (x.eigenvalues() - y.eigenvalues()).norm();
    EXPECT_LE(spec, (x - y).matrix().norm() + 1e-12);
    const double op = (x - y).norm(), fro = (x - y).matrix().norm();
    EXPECT_LE(op, fro + 1e-12);
    EXPECT_LE(fro, 2.0 * op + 1e-12);
  }
}

TEST(Lyapunov, SolvesRandomStableEquations) {
  std::mt19937_64 rng(9);
  for (int k = 0; k < 20; ++k) {
    Mat m = test_support::gaussian_matrix(rng, 4, 4);
    m -= (spectral_abscissa(m) + 0.5) * Mat::Identity(4, 4);
    const SymMat n = test_support::random_spd(rng, 4);
    const SymMat x = solve_lyapunov(m, n);
    EXPECT_LE((m * x.matrix() + x.matrix() * m.transpose() + n.matrix()).norm(), 1e-10 * (1.0 + x.norm()));
    EXPECT_GT(x.lambda_min(), 0.0);
  }
}

TEST(MatrixFlow, TabulatedInterpolation) {
  const auto f = MatrixFlow::tabulated({0.0, 1.0}, {Mat::Identity(2, 2), 2.0 * Mat::Identity(2, 2)});
  EXPECT_TRUE(f(0.5).isApprox(1.5 * Mat::Identity(2, 2)));
  EXPECT_THROW(f(1.5), std::out_of_range);
  EXPECT_THROW(MatrixFlow::tabulated({0.0, 0.0}, {Mat::Identity(1, 1), Mat::Identity(1, 1)}), std::invalid_argument);
}
