#pragma once

#include "kbflow/riccati.hpp"

namespace kbflow {

enum class SemigroupKind { single, pair, conditioned };

struct SemigroupOperator {
  SemigroupKind kind = SemigroupKind::single;
  double s = 0.0;
  double t = 0.0;
  Mat value;
};

// Transition matrices of u -> A_u - 1/2 (phi_u(Q1) + phi_u(Q2)) S_u along one
// or two Riccati trajectories. One RK4 step per interval of the merged node
// grid, with per-interval propagators cached at construction.
class SemigroupPath {
 public:
  SemigroupPath(const SignalModel& model, RiccatiTrajectory traj1, std::optional<RiccatiTrajectory> traj2 = {})
      : model_(model), traj1_(std::move(traj1)), traj2_(std::move(traj2)) {
    grid_ = traj1_.times();
    if (traj2_) {
      detail::require(traj2_->dim() == traj1_.dim(), "semigroup: trajectory dimensions differ");
      const double lo = std::max(traj1_.start(), traj2_->start());
      const double hi = std::min(traj1_.end(), traj2_->end());
      detail::require(lo < hi || traj1_.size() == 1, "semigroup: trajectories do not overlap");
      std::vector<double> merged;
      std::merge(traj1_.times().begin(), traj1_.times().end(), traj2_->times().begin(), traj2_->times().end(),
                 std::back_inserter(merged));
      grid_.clear();
      for (double u : merged) {
        if (u < lo || u > hi) continue;
        if (grid_.empty() || u - grid_.back() > 1e-13 * (1.0 + std::abs(u))) grid_.push_back(u);
      }
      if (grid_.back() < hi) grid_.back() = hi;
    }
    steps_.reserve(grid_.size());
    for (std::size_t k = 0; k + 1 < grid_.size(); ++k) steps_.push_back(step(grid_[k], grid_[k + 1]));
  }

  double start() const { return grid_.front(); }
  double end() const { return grid_.back(); }
  const std::vector<double>& grid() const { return grid_; }

  Mat drift(double u) const {
    const Mat phi = traj2_ ? 0.5 * (traj1_.at(u).matrix() + traj2_->at(u).matrix()) : traj1_.at(u).matrix();
    return model_.A(u) - phi * model_.S(u).matrix();
  }

  // E_{s,t}
  Mat propagate(double s, double t) const {
    detail::require(s <= t, "semigroup: requires s <= t");
    check_range(s);
    check_range(t);
    const Eigen::Index r = traj1_.dim();
    Mat e = Mat::Identity(r, r);
    if (s == t) return e;
    std::size_t k = node_after(s);
    if (k >= grid_.size() || grid_[k] >= t) return step(s, t);
    if (grid_[k] > s) e = step(s, grid_[k]);
    for (; k + 1 < grid_.size() && grid_[k + 1] <= t; ++k) e = steps_[k] * e;
    if (grid_[k] < t) e = step(grid_[k], t) * e;
    return e;
  }

  // E_{s,t_j} for ascending targets t_j >= s.
  std::vector<Mat> sweep(double s, const std::vector<double>& targets) const {
    std::vector<Mat> out;
    out.reserve(targets.size());
    double cur = s;
    Mat e = Mat::Identity(traj1_.dim(), traj1_.dim());
    for (double t : targets) {
      detail::require(t >= cur, "semigroup sweep: targets must be ascending and >= s");
      e = propagate(cur, t) * e;
      cur = t;
      out.push_back(e);
    }
    return out;
  }

 private:
  void check_range(double u) const {
    const double slack = 1e-12 * (1.0 + std::abs(end()));
    if (u < start() - slack || u > end() + slack)
      throw std::out_of_range("semigroup: t = " + std::to_string(u) + " outside trajectory range");
  }

  std::size_t node_after(double u) const {
    return static_cast<std::size_t>(std::lower_bound(grid_.begin(), grid_.end(), u) - grid_.begin());
  }

  Mat step(double a, double b) const {
    const double h = b - a;
    const Mat m0 = drift(a), mm = drift(a + 0.5 * h), m1 = drift(b);
    const Eigen::Index r = m0.rows();
    const Mat id = Mat::Identity(r, r);
    const Mat k1 = m0;
    const Mat k2 = mm * (id + 0.5 * h * k1);
    const Mat k3 = mm * (id + 0.5 * h * k2);
    const Mat k4 = m1 * (id + h * k3);
    return id + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }

  SignalModel model_;
  RiccatiTrajectory traj1_;
  std::optional<RiccatiTrajectory> traj2_;
  std::vector<double> grid_;
  std::vector<Mat> steps_;
};

inline SemigroupOperator semigroup(const SignalModel& model, const RiccatiTrajectory& traj1,
                                   const RiccatiTrajectory* traj2, double s, double t) {
  const SemigroupPath path(model, traj1, traj2 ? std::optional<RiccatiTrajectory>(*traj2) : std::nullopt);
  return {traj2 ? SemigroupKind::pair : SemigroupKind::single, s, t, path.propagate(s, t)};
}

// E_{t|s}(Q) for a trajectory started at s from Q.
inline SemigroupOperator conditioned_semigroup(const SignalModel& model, const RiccatiTrajectory& traj, double t) {
  const SemigroupPath path(model, traj);
  return {SemigroupKind::conditioned, traj.start(), t, path.propagate(traj.start(), t)};
}

struct BucyConstants {
  double alpha = 0.0;       // square root of the ratio form
  double alpha_safe = 0.0;  // square root of the product form
  double beta = 0.0;
  bool certifiable = false;
  std::string reason;
};

inline BucyConstants bucy_alpha_beta(const GramianReport& rep, const SignalModel& model) {
  BucyConstants out;
  if (!rep.certifiable) {
    out.reason = "Gramian report is not certifiable: " + rep.reason;
    return out;
  }
  const double lower = rep.varpi_oC_plus + 1.0 / rep.varpi_c_minus;  // inverse of the lower spectrum bound
  const double upper = rep.varpi_cO_plus + 1.0 / rep.varpi_o_minus;
  out.alpha = std::sqrt(lower / upper);
  out.alpha_safe = std::sqrt(lower * upper);
  const double lmin_r1 = model.R1().sym().lambda_min();
  out.beta = 0.5 / lower * (std::max(rep.inf_lambda_min_S, 0.0) + lmin_r1 / (upper * upper));
  out.certifiable = out.beta > 0.0 && std::isfinite(out.beta);
  if (!out.certifiable) out.reason = "beta is not positive";
  return out;
}

enum class DecayRoute { log_norm, lyapunov };

struct SteadyDecay {
  double nu = 0.0;
  double kappa = 1.0;
  DecayRoute route = DecayRoute::log_norm;
};

// ||exp(t (A - P S))||_2 <= kappa e^{-nu t}.
inline SteadyDecay steady_decay(const SignalModel& model, const ArePoint& are) {
  detail::require(model.time_invariant(), "steady_decay: model must be time-invariant");
  const Mat m = model.A(0.0) - are.P.matrix() * model.S(0.0).matrix();
  std::optional<SteadyDecay> best;
  const double mu = log_norm(m);
  if (mu < 0.0) best = SteadyDecay{-mu, 1.0, DecayRoute::log_norm};
  try {
    // M' T + T M = -Id
    const SymMat tmat = solve_lyapunov(m.transpose(), SymMat::identity(m.rows()));
    const Vec ev = tmat.eigenvalues();
    if (ev(0) > 0.0) {
      const SteadyDecay lyap{1.0 / (2.0 * ev(ev.size() - 1)), std::sqrt(ev(ev.size() - 1) / ev(0)),
                             DecayRoute::lyapunov};
      if (!best || lyap.nu > best->nu) best = lyap;
    }
  } catch (const NumericalError&) {
  }
  if (!best || !(best->nu > 0.0)) throw NumericalError("steady_decay: no route produced a positive decay rate");
  return *best;
}

// Explicit constants, evaluated on demand for any Q.
struct StabilityConstants {
  double upsilon = 0.0;
  double alpha = 0.0;
  double alpha_safe = 0.0;
  double beta = 0.0;
  double nu = 0.0;
  double kappa = 1.0;
  DecayRoute decay_route = DecayRoute::log_norm;
  SymMat P;
  double norm_P = 0.0;
  double sup_norm_A = 0.0;
  double sup_norm_S = 0.0;
  double norm_R1 = 0.0;
  int r1 = 0;
  GramianReport provenance;

  // Upper bound of sup_t ||phi_t(Q)||_2.
  double phi_sup(const SymMat& q) const { return norm_P + kappa * kappa * dist(q); }

  double rho(const SymMat& q) const {
    return std::max(alpha_safe, 1.0) * std::exp((beta + sup_norm_A + phi_sup(q) * sup_norm_S) * upsilon);
  }
  double rho(const SymMat& q1, const SymMat& q2) const { return rho(q1) * rho(q2); }

  double kappa_phi(const SymMat& q) const {
    return kappa * kappa * std::exp(sup_norm_S * kappa * kappa * rho(P, q) * dist(q) / (2.0 * beta));
  }
  double kappa_E(const SymMat& q) const {
    return kappa * std::exp(kappa / (2.0 * nu) * kappa_phi(q) * sup_norm_S * dist(q));
  }
  double kappa_phi(const SymMat& q1, const SymMat& q2) const { return kappa_E(q1) * kappa_E(q2); }
  double kappa_E(const SymMat& q1, const SymMat& q2) const {
    const double k2 = kappa_E(q2);
    return k2 + k2 * k2 * kappa_phi(q1, q2) * sup_norm_S / (2.0 * nu);
  }

  double sigma(const SymMat& q) const {
    const double ph = phi_sup(q);
    return 2.0 * std::sqrt(2.0) * kappa_E(q) * std::sqrt((ph * ph * sup_norm_S + norm_R1) * r1 / nu);
  }
  double chi0(const SymMat& q1, const SymMat& q2) const { return kappa_E(q1) * kappa_phi(q1, q2) / nu; }
  double chi1(const SymMat& q) const { return sup_norm_S * kappa_E(q) / 2.0; }
  double chi2(const SymMat& q) const {
    return sup_norm_S * sigma(q) + 2.0 * std::sqrt(2.0 * r1 * sup_norm_S * nu);
  }

 private:
  double dist(const SymMat& q) const { return (q - P).norm(); }
};

inline StabilityConstants constants_ledger(const SignalModel& model, const GramianReport& rep, const ArePoint& are,
                                           double upsilon) {
  const BucyConstants bc = bucy_alpha_beta(rep, model);
  if (!bc.certifiable) throw std::invalid_argument("constants_ledger: " + bc.reason);
  const SteadyDecay sd = steady_decay(model, are);
  StabilityConstants c;
  c.upsilon = upsilon;
  c.alpha = bc.alpha;
  c.alpha_safe = bc.alpha_safe;
  c.beta = bc.beta;
  c.nu = sd.nu;
  c.kappa = sd.kappa;
  c.decay_route = sd.route;
  c.P = are.P.sym();
  c.norm_P = are.P.sym().norm();
  c.sup_norm_A = rep.sup_norm_A;
  c.sup_norm_S = rep.sup_norm_S;
  c.norm_R1 = model.R1().sym().norm();
  c.r1 = model.r1();
  c.provenance = rep;
  return c;
}

struct DecayFit {
  double fitted_rate = 0.0;
  double fitted_prefactor = 0.0;
  std::vector<double> sample_times;
  double residual = 0.0;
};

// Least-squares line through (t, log ||.||) for t >= t_min.
inline DecayFit fit_decay(const std::vector<std::pair<double, double>>& samples, double t_min) {
  std::vector<double> ts, ys;
  for (const auto& [t, v] : samples) {
    if (t < t_min) continue;
    if (!(v > 0.0)) throw std::invalid_argument("fit_decay: non-positive norm sample");
    ts.push_back(t);
    ys.push_back(std::log(v));
  }
  if (ts.size() < 8) throw std::invalid_argument("fit_decay: need at least 8 samples with t >= t_min");
  const double n = static_cast<double>(ts.size());
  double mt = 0.0, my = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    mt += ts[i];
    my += ys[i];
  }
  mt /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    sxy += (ts[i] - mt) * (ys[i] - my);
    sxx += (ts[i] - mt) * (ts[i] - mt);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("fit_decay: sample times are degenerate");
  const double slope = sxy / sxx;
  const double intercept = my - slope * mt;
  DecayFit fit;
  fit.fitted_rate = -slope;
  fit.fitted_prefactor = std::exp(intercept);
  fit.sample_times = ts;
  double rss = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const double e = ys[i] - (intercept + slope * ts[i]);
    rss += e * e;
  }
  fit.residual = std::sqrt(rss / n);
  return fit;
}

}  // namespace kbflow
