#include "kbflow/stochastic.hpp"
#include "support/random_models.hpp"

#include <gtest/gtest.h>

#include <cstdlib>

using namespace kbflow;

namespace {

const Vec zero1 = Vec::Zero(1);
const Vec one1 = Vec::Ones(1);

McSetup scalar_setup(double x_signal, double x, std::vector<double> ts, std::size_t n_mc) {
  McSetup st;
  st.x_signal = Vec::Constant(1, x_signal);
  st.x = Vec::Constant(1, x);
  st.t_grid = std::move(ts);
  st.n_mc = n_mc;
  return st;
}

RiccatiTrajectory at_fixed_point(const SignalModel& m, double end) {
  return integrate_dre(m, 0.0, end, solve_are(m).P.sym(), 0.01);
}

}  // namespace

TEST(Philox, KnownAnswers) {
  using A4 = std::array<std::uint32_t, 4>;
  EXPECT_EQ(philox4x32({0, 0, 0, 0}, {0, 0}), (A4{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
            (A4{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (A4{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(NormalQuantile, InvertsTheCdf) {
  // Lower tail only: p close to 1 cannot carry the upper tail in double.
  for (double x = -8.0; x <= 0.0; x += 0.37) {
    const double p = 0.5 * std::erfc(-x / std::sqrt(2.0));
    EXPECT_NEAR(normal_quantile(p), x, 1e-9 * (1.0 + std::abs(x))) << x;
    if (x > -5.0) EXPECT_NEAR(normal_quantile(1.0 - p), -x, 1e-6) << x;
  }
  EXPECT_DOUBLE_EQ(normal_quantile(0.5), 0.0);
}

TEST(NoiseBundle, AddressableAndMoments) {
  const NoiseBundle nb(42, 1e-3, 1.0);
  EXPECT_EQ(nb.normal(Stream::W, 3, 1, 17, 0), nb.normal(Stream::W, 3, 1, 17, 0));
  EXPECT_NE(nb.normal(Stream::W, 3, 1, 17, 0), nb.normal(Stream::V, 3, 1, 17, 0));
  EXPECT_NE(nb.normal(Stream::W, 3, 1, 17, 0), nb.normal(Stream::W, 3, 1, 17, 1));
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = nb.normal(Stream::initial, 0, 0, i, 0);
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 5.0 / std::sqrt(n));
  EXPECT_NEAR(sq / n, 1.0, 5.0 * std::sqrt(2.0 / n));
  const NoiseBundle other(43, 1e-3, 1.0);
  EXPECT_NE(nb.normal(Stream::W, 0, 0, 0, 0), other.normal(Stream::W, 0, 0, 0, 0));
  EXPECT_DOUBLE_EQ(NoiseBundle(42, 1e-3, 1.0, true).increment(Stream::W, 0, 0, 0, 4, 0), 0.0);
}

TEST(EmGrid, AlignmentChecks) {
  const NoiseBundle nb(1, 0.01, 10.0);
  const EmGrid g = EmGrid::make(nb, 0.5, 1.5, 2);
  EXPECT_EQ(g.steps, 50u);
  EXPECT_EQ(g.first, 50u);
  EXPECT_EQ(g.position(1.0), 25u);
  EXPECT_THROW(g.position(1.01), std::invalid_argument);
  EXPECT_THROW(EmGrid::make(nb, 0.0, 0.015, 1), std::invalid_argument);
}

TEST(Simulation, ZeroNoiseFixedPoint) {
  const SignalModel m = scalar_reference_model();
  const RiccatiTrajectory tr = at_fixed_point(m, 2.0);
  const NoiseBundle quiet(5, 1e-3, 2.0, true);
  const CoupledPathBundle b = simulate_coupled(m, tr, one1, one1, quiet, 3, 2.0);
  for (std::size_t k = 0; k < b.times.size(); ++k) {
    EXPECT_NEAR(b.psi[k](0), b.X[k](0), 1e-14);
    for (const auto& path : b.psi_bar) EXPECT_NEAR(path[k](0), b.X[k](0), 1e-14);
  }
}

TEST(Simulation, StationaryFilterErrorVariance) {
  const SignalModel m = scalar_reference_model();
  const RiccatiTrajectory tr = at_fixed_point(m, 5.0);
  const NoiseBundle nb(7, 1e-3, 5.0);
  const EmGrid grid = EmGrid::make(nb, 0.0, 5.0);
  const CoupledKernel kernel(m, nb, grid, {&tr});
  double sq = 0.0;
  const int n = 4000;
  std::vector<double> mstate;
  for (int rep = 0; rep < n; ++rep) {
    std::vector<double> x{0.0}, f{0.0};
    kernel.run(rep, x, f, {}, mstate, {grid.steps},
               [&](std::size_t, const auto& xs, const auto& fs, const auto&, const auto&) {
                 sq += (fs[0] - xs[0]) * (fs[0] - xs[0]);
               });
  }
  EXPECT_NEAR(sq / n, 1.0, 0.1);
}

TEST(Simulation, StrongOrderByStepHalving) {
  const SignalModel m = scalar_reference_model();
  const RiccatiTrajectory tr = at_fixed_point(m, 1.0);
  const NoiseBundle nb(9, 1.0 / 1024.0, 1.0);
  const std::vector<std::uint32_t> strides{1, 4, 8, 16, 32};
  std::vector<double> finals(strides.size());
  std::vector<double> err(strides.size(), 0.0);
  const int n = 200;
  std::vector<double> mstate;
  for (int rep = 0; rep < n; ++rep) {
    for (std::size_t i = 0; i < strides.size(); ++i) {
      const EmGrid g = EmGrid::make(nb, 0.0, 1.0, strides[i]);
      const CoupledKernel kernel(m, nb, g, {&tr});
      std::vector<double> x{0.0}, f{1.0};
      kernel.run(rep, x, f, {}, mstate, {g.steps},
                 [&](std::size_t, const auto&, const auto& fs, const auto&, const auto&) { finals[i] = fs[0]; });
    }
    for (std::size_t i = 1; i < strides.size(); ++i) err[i] += (finals[i] - finals[0]) * (finals[i] - finals[0]);
  }
  std::vector<double> logs, loge;
  for (std::size_t i = 1; i < strides.size(); ++i) {
    logs.push_back(std::log(strides[i] * nb.step()));
    loge.push_back(0.5 * std::log(err[i] / n));
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    mx += logs[i] / logs.size();
    my += loge[i] / logs.size();
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    sxy += (logs[i] - mx) * (loge[i] - my);
    sxx += (logs[i] - mx) * (logs[i] - mx);
  }
  // Additive noise: Euler-Maruyama reaches order one, so at least one half.
  EXPECT_GE(sxy / sxx, 0.4);
}

TEST(EventThreshold, Oracles) {
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(event_threshold(0.0, 1.0), e2 / (2.0 * std::sqrt(2.0)), 1e-12);
  EXPECT_NEAR(event_threshold(1.0, 1.0), 2.5 * e2 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(event_threshold(0.0, 1.0), 2.6123, 5e-4);
  EXPECT_NEAR(event_threshold(1.0, 1.0), 13.0614, 1e-3);
  EXPECT_NEAR(event_threshold(0.7, 2.0), 4.0 * event_threshold(0.7, 1.0), 1e-12);
  EXPECT_THROW(event_threshold(-1.0, 1.0), std::invalid_argument);
}

TEST(ConditionalBias, ReferenceModel) {
  const SignalModel m = scalar_reference_model();
  const RiccatiTrajectory tr = at_fixed_point(m, 3.0);
  const NoiseBundle nb(11, 1e-3, 3.0);
  const CheckSeries unbiased = conditional_bias(m, tr, scalar_setup(0.3, 0.3, {0.5, 1.0, 2.0}, 2000), nb, 4.0 / 3.0,
                                                75.0 / 128.0);
  for (const auto& r : unbiased.rows) EXPECT_LE(r.value, r.slack);
  const CheckSeries cs =
      conditional_bias(m, tr, scalar_setup(0.0, 1.0, {0.5, 1.0, 2.0, 3.0}, 4000), nb, 4.0 / 3.0, 75.0 / 128.0);
  EXPECT_TRUE(cs.pass());
  for (const auto& r : cs.rows) EXPECT_NEAR(r.value, std::exp(-r.t), std::max(r.slack, 0.01));
}

TEST(Events, ReferenceModel) {
  const SignalModel m = scalar_reference_model();
  const RiccatiTrajectory tr = at_fixed_point(m, 2.0);
  const NoiseBundle nb(13, 1e-3, 2.0);
  for (Target target : {Target::filter, Target::diffusion}) {
    const auto res = verify_event_probability(m, tr, 4.0, scalar_setup(0.0, 1.0, {1.0, 2.0}, 2000), {0.0, 2.0}, nb,
                                              target);
    ASSERT_EQ(res.size(), 4u);
    for (const auto& r : res) {
      EXPECT_TRUE(r.pass);
      if (r.delta == 0.0) EXPECT_DOUBLE_EQ(r.bound, 1.0);
    }
  }
}

TEST(Moments, ReferenceModel) {
  const SignalModel m = scalar_reference_model();
  const RiccatiTrajectory tr = at_fixed_point(m, 2.0);
  const NoiseBundle nb(15, 1e-3, 2.0);
  const auto at_start = moment_bound_check(m, tr, 4.0, scalar_setup(0.0, 0.0, {0.0}, 100), {1}, nb, Target::filter);
  EXPECT_DOUBLE_EQ(at_start[0].rows[0].value, 0.0);
  const auto cs = moment_bound_check(m, tr, 4.0, scalar_setup(0.0, 1.0, {0.5, 2.0}, 2000), {1, 2, 3}, nb,
                                     Target::diffusion);
  for (const auto& c : cs) EXPECT_TRUE(c.pass());
  // L2 <= L4 <= L6, compared as E(|N|^{2n})^{1/(2n)}.
  for (std::size_t j = 0; j < 2; ++j) {
    const double l2 = std::sqrt(cs[0].rows[j].value), l4 = std::pow(cs[1].rows[j].value, 0.5),
                 l6 = std::pow(cs[2].rows[j].value, 0.5);
    EXPECT_LE(l2, l4 * (1 + 1e-12));
    EXPECT_LE(l4, l6 * (1 + 1e-12));
  }
}

TEST(Contraction, SharedNoiseOracles) {
  const SignalModel m = scalar_reference_model();
  const GramianReport rep = uniformity_constants(m, 1.0, 3.0);
  const ArePoint are = solve_are(m);
  const StabilityConstants k = constants_ledger(m, rep, are, 1.0);
  const RiccatiTrajectory tr = at_fixed_point(m, 3.0);
  const NoiseBundle nb(17, 1e-3, 3.0);
  const McSetup st = scalar_setup(0.0, 1.0, {0.5, 1.5, 3.0}, 500);
  const SymMat p = are.P.sym();
  const auto same = contraction_check(m, tr, tr, k, {one1, one1, p, p}, st, {1}, nb, Target::filter);
  for (const auto& r : same[0].rows) EXPECT_EQ(r.value, 0.0);
  for (Target target : {Target::filter, Target::diffusion}) {
    const auto cs = contraction_check(m, tr, tr, k, {one1, -one1, p, p}, st, {1, 2}, nb, target);
    for (const auto& c : cs) {
      EXPECT_TRUE(c.pass());
      // Equal gains: the difference is deterministic (1 - dt)^k * 2.
      for (const auto& r : c.rows) EXPECT_NEAR(r.value, 2.0 * std::exp(-r.t), 2e-3);
    }
  }
}

TEST(Contraction, DistinctInitialCovariances) {
  const SignalModel m = scalar_reference_model();
  const GramianReport rep = uniformity_constants(m, 1.0, 3.0);
  const ArePoint are = solve_are(m);
  const StabilityConstants k = constants_ledger(m, rep, are, 1.0);
  const SymMat q1 = are.P.sym(), q2 = SymMat::scalar(1.02);
  const RiccatiTrajectory t1 = integrate_dre(m, 0.0, 3.0, q1, 0.01);
  const RiccatiTrajectory t2 = integrate_dre(m, 0.0, 3.0, q2, 0.01);
  const NoiseBundle nb(19, 1e-3, 3.0);
  const auto cs =
      contraction_check(m, t1, t2, k, {one1, zero1, q1, q2}, scalar_setup(0.0, 1.0, {1.0, 3.0}, 1000), {1, 2}, nb,
                        Target::diffusion);
  for (const auto& c : cs) {
    EXPECT_TRUE(c.pass());
    for (const auto& r : c.rows) EXPECT_TRUE(std::isfinite(r.bound));
  }
}

TEST(Reproducibility, ThreadCountDoesNotChangeStatistics) {
  const SignalModel m = scalar_reference_model();
  const RiccatiTrajectory tr = at_fixed_point(m, 1.0);
  const NoiseBundle nb(23, 1e-3, 1.0);
  const McSetup st = scalar_setup(0.0, 1.0, {0.5, 1.0}, 1500);
  setenv("KBFLOW_THREADS", "1", 1);
  const auto a = moment_bound_check(m, tr, 4.0, st, {1, 2}, nb, Target::diffusion);
  setenv("KBFLOW_THREADS", "3", 1);
  const auto b = moment_bound_check(m, tr, 4.0, st, {1, 2}, nb, Target::diffusion);
  unsetenv("KBFLOW_THREADS");
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].rows.size(); ++j) EXPECT_EQ(a[i].rows[j].value, b[i].rows[j].value);
}

TEST(Ensemble, MeanAndCovarianceConverge) {
  const SignalModel m = scalar_reference_model();
  const RiccatiTrajectory tr = integrate_dre(m, 0.0, 0.2, SymMat::scalar(1.0), 0.01);
  const NoiseBundle nb(29, 1e-3, 0.2);
  for (InitialLaw law : {InitialLaw::gaussian, InitialLaw::uniform}) {
    const EnsembleResult r = ensemble_consistency(m, tr, zero1, one1, 0.2, {50, 200, 800}, 20, nb, law);
    EXPECT_GT(r.mean_exponent, 0.3);
    EXPECT_LT(r.mean_exponent, 0.7);
    EXPECT_GT(r.cov_exponent, 0.3);
    EXPECT_LT(r.cov_exponent, 0.7);
  }
}
