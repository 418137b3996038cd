#include "kbflow/gramian.hpp"
#include "support/random_models.hpp"

#include <gtest/gtest.h>

using namespace kbflow;

namespace {

SignalModel scalar_model(double a) {
  const Mat one = Mat::Identity(1, 1);
  return build_model(Mat::Constant(1, 1, a), one, one, one);
}

}  // namespace

TEST(Gramian, ReferenceModelClosedForms) {
  const SignalModel m = scalar_reference_model();
  for (double t : {0.5, 1.0, 3.0}) {
    EXPECT_NEAR(controllability_gramian(m, 0.0, t).sym()(0, 0), t, 1e-12);
    EXPECT_NEAR(observability_gramian(m, 0.0, t).sym()(0, 0), t, 1e-12);
  }
  const DerivedGramians d = derived_gramians(m, 1.0);
  EXPECT_NEAR(d.O_of_C(0, 0), 1.0 / 3.0, 1e-10);
  EXPECT_NEAR(d.C_of_O(0, 0), 1.0 / 3.0, 1e-10);
}

TEST(Gramian, DiagonalNoiseAndBlindSensor) {
  const SignalModel m =
      build_model(Mat::Zero(2, 2), Mat::Identity(2, 2), Vec::LinSpaced(2, 1.0, 2.0).asDiagonal().toDenseMatrix(),
                  Mat::Identity(2, 2));
  EXPECT_LE((controllability_gramian(m, 0.0, 1.0).matrix() - Vec::LinSpaced(2, 1.0, 2.0).asDiagonal().toDenseMatrix())
                .norm(),
            1e-12);
  const SignalModel blind = build_model(Mat::Zero(1, 1), Mat::Zero(1, 1), Mat::Identity(1, 1), Mat::Identity(1, 1));
  EXPECT_LE(observability_gramian(blind, 0.0, 1.0).sym().norm(), 1e-15);
}

TEST(Gramian, AdditivityAndMonotonicity) {
  std::mt19937_64 rng(21);
  const auto cm = test_support::random_certified_model(rng, 3, 2);
  const WindowGramians w02 = window_gramians(cm.model, 0.0, 2.0);
  const WindowGramians w01 = window_gramians(cm.model, 0.0, 1.0);
  const WindowGramians w12 = window_gramians(cm.model, 1.0, 2.0);
  const Mat e = w12.transition;
  // C_{0,2} = E_{1,2} C_{0,1} E_{1,2}' + C_{1,2}
  const Mat c = e * w01.controllability.matrix() * e.transpose() + w12.controllability.matrix();
  EXPECT_LE((c - w02.controllability.matrix()).norm(), 1e-9 * w02.controllability.norm());
  EXPECT_TRUE(loewner_leq(w01.controllability, w02.controllability, 1e-10) ||
              loewner_leq(w12.controllability, w02.controllability, 1e-10));
  EXPECT_LE((w02.transition - w12.transition * w01.transition).norm(), 1e-9 * w02.transition.norm());
}

TEST(Gramian, ReferenceUniformityConstants) {
  const GramianReport r = uniformity_constants(scalar_reference_model(), 1.0, 10.0);
  EXPECT_TRUE(r.certifiable);
  EXPECT_NEAR(r.varpi_c_minus, 1.0, 1e-10);
  EXPECT_NEAR(r.varpi_c_plus, 1.0, 1e-10);
  EXPECT_NEAR(r.varpi_o_minus, 1.0, 1e-10);
  EXPECT_NEAR(r.varpi_o_plus, 1.0, 1e-10);
  EXPECT_NEAR(r.varpi_cO_plus, 1.0 / 3.0, 1e-10);
  EXPECT_NEAR(r.varpi_oC_plus, 1.0 / 3.0, 1e-10);
}

TEST(Gramian, BlindSensorIsNotCertifiable) {
  const SignalModel blind = build_model(Mat::Zero(1, 1), Mat::Zero(1, 1), Mat::Identity(1, 1), Mat::Identity(1, 1));
  const GramianReport r = uniformity_constants(blind, 1.0, 2.0);
  EXPECT_FALSE(r.certifiable);
  EXPECT_FALSE(r.reason.empty());
}

TEST(Gramian, ScalarClosedFormsMatchQuadrature) {
  for (double a : {-1.0, -0.1, 0.1, 1.0})
    for (double ups : {0.5, 1.0, 2.0}) {
      const SignalModel m = scalar_model(a);
      const auto cf = diagonal_varpi(m, ups);
      ASSERT_TRUE(cf.has_value());
      const GramianReport r = uniformity_constants(m, ups, ups + 1.0);
      EXPECT_NEAR(r.varpi_c_minus, cf->c_minus, 1e-10 * (1.0 + cf->c_minus));
      EXPECT_NEAR(r.varpi_c_plus, cf->c_plus, 1e-10 * (1.0 + cf->c_plus));
      EXPECT_NEAR(r.varpi_o_minus, cf->o_minus, 1e-10 * (1.0 + cf->o_minus));
      EXPECT_NEAR(r.varpi_o_plus, cf->o_plus, 1e-10 * (1.0 + cf->o_plus));
    }
  EXPECT_NEAR(exp_window_integral(1e-9, 1.0), 1.0, 1e-8);
  Mat a(2, 2);
  a << 0, 1, 0, 0;
  EXPECT_FALSE(diagonal_varpi(build_model(a, Mat::Identity(2, 2), Mat::Identity(2, 2), Mat::Identity(2, 2)), 1.0));
}

TEST(Gramian, TimeInvariantReportIsStationary) {
  std::mt19937_64 rng(4);
  const auto cm = test_support::random_certified_model(rng, 2, 1);
  const WindowGramians a = window_gramians(cm.model, 0.0, 1.0);
  const WindowGramians b = window_gramians(cm.model, 4.0, 5.0);
  EXPECT_LE((a.controllability - b.controllability).norm(), 1e-8);
  EXPECT_LE((a.observability - b.observability).norm(), 1e-8);
}

TEST(Gramian, TimeVaryingScan) {
  const auto a = MatrixFlow::closed_form(1, 1, [](double t) { return Mat::Constant(1, 1, 0.5 * std::sin(t)); });
  const SignalModel m(1, 1, a, MatrixFlow::constant(Mat::Identity(1, 1)), SymMat::identity(1), SymMat::identity(1));
  const GramianReport r = uniformity_constants(m, 1.0, 8.0, 33);
  EXPECT_TRUE(r.certifiable);
  EXPECT_LT(r.varpi_c_minus, r.varpi_c_plus);
  EXPECT_EQ(r.grid.size(), 33u);
}

TEST(Gramian, RankConditions) {
  const RankConditions m0 = rank_conditions(scalar_reference_model());
  EXPECT_TRUE(m0.controllable);
  EXPECT_TRUE(m0.observable);
  Mat a = Mat::Zero(2, 2);
  a(0, 0) = 1.0;
  a(1, 1) = 2.0;
  Mat c(1, 2);
  c << 1, 0;
  const RankConditions r = rank_conditions(build_model(a, c, Mat::Identity(2, 2), Mat::Identity(1, 1)));
  EXPECT_TRUE(r.controllable);
  EXPECT_FALSE(r.observable);
}
