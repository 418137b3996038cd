#pragma once

#include "kbflow/gramian.hpp"

#include <array>
#include <iomanip>
#include <ostream>

namespace kbflow {

// A Q + Q A' - Q S Q + R1
inline SymMat ricc_drift(const Mat& a, const SymMat& s, const SymMat& r1, const SymMat& q) {
  const Mat& qm = q.matrix();
  const Mat aq = a * qm;
  return SymMat(aq + aq.transpose() - qm * s.matrix() * qm + r1.matrix());
}

inline SymMat ricc_drift(const SignalModel& model, double t, const SymMat& q) {
  detail::require(q.dim() == model.r1(), "ricc_drift: dimension mismatch");
  return ricc_drift(model.A(t), model.S(t), model.R1().sym(), q);
}

// phi_{s,t}(Q) on a grid of nodes. Node derivatives are kept so that values
// between nodes come from cubic Hermite interpolation.
class RiccatiTrajectory {
 public:
  RiccatiTrajectory() = default;

  RiccatiTrajectory(std::vector<double> times, std::vector<SymMat> values, std::vector<SymMat> drifts,
                    double psd_tol_floor = 0.0)
      : times_(std::move(times)), values_(std::move(values)), drifts_(std::move(drifts)) {
    detail::require(!times_.empty() && times_.size() == values_.size() && values_.size() == drifts_.size(),
                    "RiccatiTrajectory: inconsistent node data");
    for (std::size_t i = 1; i < times_.size(); ++i)
      detail::require(times_[i] > times_[i - 1], "RiccatiTrajectory: times must increase");
    lmin_.reserve(times_.size());
    lmax_.reserve(times_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const Vec ev = values_[i].eigenvalues();
      const double norm2 = std::max(std::abs(ev(0)), std::abs(ev(ev.size() - 1)));
      const double tol = std::max(psd_tol_floor, default_psd_tol(norm2));
      if (!(ev(0) >= -tol))
        throw NumericalError("Riccati flow left the PSD cone at t = " + std::to_string(times_[i]) +
                             " (lambda_min = " + std::to_string(ev(0)) + ")");
      lmin_.push_back(ev(0));
      lmax_.push_back(ev(ev.size() - 1));
    }
  }

  double start() const { return times_.front(); }
  double end() const { return times_.back(); }
  std::size_t size() const { return times_.size(); }
  Eigen::Index dim() const { return values_.front().dim(); }
  const std::vector<double>& times() const { return times_; }
  const std::vector<SymMat>& values() const { return values_; }
  const std::vector<SymMat>& drifts() const { return drifts_; }
  const SymMat& initial() const { return values_.front(); }
  const SymMat& final_value() const { return values_.back(); }
  double lambda_min(std::size_t i) const { return lmin_[i]; }
  double lambda_max(std::size_t i) const { return lmax_[i]; }

  bool covers(double t) const {
    const double slack = 1e-12 * (1.0 + std::abs(end()));
    return t >= start() - slack && t <= end() + slack;
  }

  // Index i with times[i] <= t < times[i+1] (clamped to the last interval).
  std::size_t interval(double t) const {
    if (times_.size() < 2 || t <= times_.front()) return 0;
    if (t >= times_.back()) return times_.size() - 2;
    return static_cast<std::size_t>(std::upper_bound(times_.begin(), times_.end(), t) - times_.begin()) - 1;
  }

  SymMat at(double t) const {
    if (!covers(t))
      throw std::out_of_range("RiccatiTrajectory: t = " + std::to_string(t) + " outside [" +
                              std::to_string(start()) + ", " + std::to_string(end()) + "]");
    if (times_.size() == 1) return values_[0];
    const std::size_t i = interval(t);
    const double h = times_[i + 1] - times_[i];
    const double u = std::clamp((t - times_[i]) / h, 0.0, 1.0);
    if (u == 0.0) return values_[i];
    if (u == 1.0) return values_[i + 1];
    const double u2 = u * u, u3 = u2 * u;
    const double h00 = 2 * u3 - 3 * u2 + 1, h10 = u3 - 2 * u2 + u, h01 = -2 * u3 + 3 * u2, h11 = u3 - u2;
    return SymMat(h00 * values_[i].matrix() + h10 * h * drifts_[i].matrix() + h01 * values_[i + 1].matrix() +
                  h11 * h * drifts_[i + 1].matrix());
  }

  SpdMat spd_node(std::size_t i) const { return SpdMat::certify(values_[i]); }

  double sup_norm() const {
    double best = 0.0;
    for (std::size_t i = 0; i < size(); ++i) best = std::max({best, std::abs(lmin_[i]), std::abs(lmax_[i])});
    return best;
  }

  // Columns: t, row-major entries, lambda_min, lambda_max.
  void write_csv(std::ostream& os) const {
    const Eigen::Index r = dim();
    os << "t";
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < r; ++j) os << ",q" << i << j;
    os << ",lambda_min,lambda_max\n";
    os << std::setprecision(17);
    for (std::size_t k = 0; k < size(); ++k) {
      os << times_[k];
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < r; ++j) os << ',' << values_[k](i, j);
      os << ',' << lmin_[k] << ',' << lmax_[k] << '\n';
    }
  }

 private:
  std::vector<double> times_;
  std::vector<SymMat> values_;
  std::vector<SymMat> drifts_;
  std::vector<double> lmin_;
  std::vector<double> lmax_;
};

struct DreOptions {
  // Substeps are inserted so that h * (2||A|| + 2||phi|| ||S||) stays below this.
  double max_stiffness_step = 0.02;
  std::optional<double> psd_tol;
};

// RK4 with symmetrization after every stage. Output nodes sit on the uniform
// grid s + k*step, plus the substeps taken where the flow is stiff.
inline RiccatiTrajectory integrate_dre(const SignalModel& model, double s, double t, const SymMat& q, double step,
                                       const DreOptions& opts = {}) {
  detail::require(s <= t, "integrate_dre: requires s <= t");
  detail::require(step > 0.0, "integrate_dre: step must be positive");
  detail::require(q.dim() == model.r1(), "integrate_dre: dimension mismatch");
  const SpdMat q0 = SpdMat::certify(q, opts.psd_tol);

  std::vector<double> times{s};
  std::vector<SymMat> values{q0.sym()};
  std::vector<SymMat> drifts{ricc_drift(model, s, q0.sym())};
  if (t == s) return RiccatiTrajectory(times, values, drifts, opts.psd_tol.value_or(0.0));

  const bool ti = model.time_invariant();
  const Mat a_const = ti ? model.A(s) : Mat();
  const SymMat s_const = ti ? model.S(s) : SymMat();
  const SymMat& r1 = model.R1().sym();
  const double norm_a_const = ti ? a_const.norm() : 0.0;
  const double norm_s_const = ti ? s_const.matrix().norm() : 0.0;

  auto drift = [&](double u, const SymMat& x) {
    return ti ? ricc_drift(a_const, s_const, r1, x) : ricc_drift(model.A(u), model.S(u), r1, x);
  };

  const long n = std::max(1L, static_cast<long>(std::ceil((t - s) / step - 1e-9)));
  const double h = (t - s) / static_cast<double>(n);
  SymMat x = q0.sym();
  SymMat dx = drifts.front();
  for (long k = 0; k < n; ++k) {
    const double t0 = s + k * h;
    const double t1 = (k + 1 == n) ? t : s + (k + 1) * h;
    const double norm_a = ti ? norm_a_const : model.A(t0).norm();
    const double norm_s = ti ? norm_s_const : model.S(t0).matrix().norm();
    const double stiff = 2.0 * norm_a + 2.0 * x.matrix().norm() * norm_s;
    const long m = std::max(1L, static_cast<long>(std::ceil((t1 - t0) * stiff / opts.max_stiffness_step)));
    const double hs = (t1 - t0) / static_cast<double>(m);
    for (long j = 0; j < m; ++j) {
      const double u = t0 + j * hs;
      const SymMat& k1 = dx;
      const SymMat k2 = drift(u + 0.5 * hs, SymMat(x.matrix() + 0.5 * hs * k1.matrix()));
      const SymMat k3 = drift(u + 0.5 * hs, SymMat(x.matrix() + 0.5 * hs * k2.matrix()));
      const SymMat k4 = drift(u + hs, SymMat(x.matrix() + hs * k3.matrix()));
      x = SymMat(x.matrix() + (hs / 6.0) * (k1.matrix() + 2.0 * k2.matrix() + 2.0 * k3.matrix() + k4.matrix()));
      if (!x.matrix().allFinite())
        throw NumericalError("Riccati integration produced non-finite values at t = " + std::to_string(u + hs));
      const double tn = (j + 1 == m) ? t1 : t0 + (j + 1) * hs;
      dx = drift(tn, x);
      times.push_back(tn);
      values.push_back(x);
      drifts.push_back(dx);
    }
  }
  return RiccatiTrajectory(std::move(times), std::move(values), std::move(drifts), opts.psd_tol.value_or(0.0));
}

struct ArePoint {
  SpdMat P;
  double residual_norm = 0.0;
  double closed_loop_abscissa = 0.0;
  int iterations = 0;
  bool used_dre_seed = false;
};

namespace detail {

inline double pinv_norm(const Mat& s) {
  Eigen::JacobiSVD<Mat> svd(s);
  const Vec& sv = svd.singularValues();
  const double tol = sv(0) * 1e-12 * static_cast<double>(s.rows());
  double smallest = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) smallest = sv(i);
  return smallest > 0.0 ? 1.0 / smallest : 0.0;
}

}  // namespace detail

// Stabilizing solution of A P + P A' - P S P + R1 = 0 by Newton-Kleinman.
inline ArePoint solve_are(const SignalModel& model, int max_iterations = 100) {
  detail::require(model.time_invariant(), "solve_are: model must be time-invariant");
  const RankConditions rc = rank_conditions(model);
  detail::require(rc.controllable && rc.observable, "solve_are: rank conditions fail");
  const Mat a = model.A(0.0);
  const SymMat s = model.S(0.0);
  const SymMat& r1 = model.R1().sym();
  const Eigen::Index r = model.r1();

  ArePoint out;
  SymMat p;
  bool seeded = false;
  double gamma = 1.0 + op_norm(a) * detail::pinv_norm(s.matrix());
  // With singular S the modes on ker S may never stabilize; a huge gamma
  // then only produces round-off "stability", so the search is capped.
  const double s_norm = s.norm();
  for (int i = 0; i < 24 && !seeded; ++i, gamma *= 2.0) {
    if (spectral_abscissa(a - gamma * s.matrix()) < -1e-8 * (1.0 + gamma * s_norm)) {
      p = gamma * SymMat::identity(r);
      seeded = true;
    }
  }
  if (!seeded) {
    // Stable invariant subspace of the Hamiltonian [[A', -S], [-R1, -A]].
    Mat h(2 * r, 2 * r);
    h << a.transpose(), -s.matrix(), -r1.matrix(), -a;
    Eigen::ComplexEigenSolver<Mat> es(h);
    if (es.info() == Eigen::Success) {
      Eigen::MatrixXcd basis(2 * r, r);
      Eigen::Index cols = 0;
      for (Eigen::Index i = 0; i < 2 * r && cols < r; ++i)
        if (es.eigenvalues()(i).real() < 0.0) basis.col(cols++) = es.eigenvectors().col(i);
      if (cols == r) {
        const Eigen::PartialPivLU<Eigen::MatrixXcd> lu(basis.topRows(r));
        const Mat x = (basis.bottomRows(r) * lu.inverse()).real();
        if (x.allFinite()) {
          const SymMat cand(x);
          if (cand.lambda_min() > -default_psd_tol(cand.norm()) &&
              spectral_abscissa(a - cand.matrix() * s.matrix()) < 0.0) {
            p = cand;
            seeded = true;
          }
        }
      }
    }
  }
  if (!seeded) {
    // Burn in along the Riccati flow until the closed loop is stable.
    SymMat q = r1;
    for (int chunk = 0; chunk < 200 && !seeded; ++chunk) {
      const RiccatiTrajectory tr = integrate_dre(model, 0.0, 1.0, q, 0.01);
      q = tr.final_value();
      const double sa = spectral_abscissa(a - q.matrix() * s.matrix());
      if (sa < 0.0) {
        const double burn = std::min(10.0 / std::abs(sa), 200.0);
        q = integrate_dre(model, 0.0, burn, q, 0.01).final_value();
        seeded = spectral_abscissa(a - q.matrix() * s.matrix()) < 0.0;
      }
    }
    if (!seeded) throw NumericalError("solve_are: could not construct a stabilizing seed");
    p = q;
    out.used_dre_seed = true;
  }

  const double base_tol = 1e-11;
  int it = 0;
  for (; it < max_iterations; ++it) {
    const Mat m = a - p.matrix() * s.matrix();
    const SymMat rhs(p.matrix() * s.matrix() * p.matrix() + r1.matrix());
    const SymMat next = solve_lyapunov(m, rhs);
    const double change = (next - p).matrix().norm();
    p = next;
    if (change <= 1e-14 * (1.0 + p.matrix().norm())) break;
  }
  if (it == max_iterations) {
    const double res = ricc_drift(a, s, r1, p).matrix().norm();
    if (!(res <= base_tol * (1.0 + p.norm())))
      throw NumericalError("solve_are: Newton-Kleinman did not converge in " + std::to_string(max_iterations) +
                           " iterations");
  }
  out.P = SpdMat::certify(p);
  out.residual_norm = ricc_drift(a, s, r1, p).matrix().norm();
  out.closed_loop_abscissa = spectral_abscissa(a - p.matrix() * s.matrix());
  out.iterations = it + 1;
  if (!(out.residual_norm <= base_tol * (1.0 + p.norm())))
    throw NumericalError("solve_are: residual " + std::to_string(out.residual_norm) + " above tolerance");
  if (!(out.closed_loop_abscissa < 0.0)) throw NumericalError("solve_are: solution is not stabilizing");
  return out;
}

struct AuxFlows {
  SymMat phi_c;        // E Q E' + C_t
  SymMat phi_o;        // E (Q^{-1} + Obar_t)^{-1} E'
  SymMat phi_minus_o;  // (E Q^{-1} E' + C_t)^{-1}
};

inline AuxFlows aux_flows(const SignalModel& model, double t, const SymMat& q) {
  detail::require(t >= 0.0, "aux_flows: t must be non-negative");
  const WindowGramians w = window_gramians(model, 0.0, t);
  const Mat& e = w.transition;
  AuxFlows out;
  out.phi_c = q.congruence(e) + w.controllability;
  const SymMat q_inv = SpdMat::certify(q).inverse();
  const SymMat obar = w.observability.congruence(e.transpose());
  out.phi_o = SpdMat::certify(q_inv + obar).inverse().congruence(e);
  out.phi_minus_o = SpdMat::certify(q_inv.congruence(e) + w.controllability).inverse();
  return out;
}

struct BucyBounds {
  SpdMat lambda_min_bound;
  SymMat lambda_max_bound;
  double upsilon = 0.0;
};

// Two-sided bounds for phi_t(Q), t >= window_start + upsilon, from the
// Gramians on [window_start, window_start + upsilon].
inline BucyBounds bucy_bounds(const SignalModel& model, double upsilon, double window_start = 0.0) {
  detail::require(upsilon > 0.0, "bucy_bounds: upsilon must be positive");
  const WindowGramians w = window_gramians(model, window_start, window_start + upsilon);
  const DerivedGramians d = derived_gramians(w);
  const SymMat c_inv = SpdMat::certify(w.controllability).inverse();
  const SymMat o_inv = SpdMat::certify(w.observability).inverse();
  BucyBounds b;
  b.lambda_min_bound = SpdMat::certify(SpdMat::certify(d.O_of_C + c_inv).inverse());
  b.lambda_max_bound = o_inv + d.C_of_O;
  b.upsilon = upsilon;
  return b;
}

// Scalar spectrum interval implied by the uniformity constants.
inline std::pair<double, double> bucy_spectrum_interval(const GramianReport& rep) {
  return {1.0 / (rep.varpi_oC_plus + 1.0 / rep.varpi_c_minus), rep.varpi_cO_plus + 1.0 / rep.varpi_o_minus};
}

struct PolarizationResiduals {
  std::array<double, 3> residuals{};
  double scale = 0.0;
};

// Ricc(Q1) - Ricc(Q2) against its three factorized forms.
inline PolarizationResiduals verify_polarization(const SignalModel& model, double t, const SymMat& q1,
                                                 const SymMat& q2) {
  const Mat a = model.A(t);
  const Mat s = model.S(t).matrix();
  const Mat d = (q1 - q2).matrix();
  const Mat diff = (ricc_drift(model, t, q1) - ricc_drift(model, t, q2)).matrix();
  const Mat m1 = a - q1.matrix() * s;
  const Mat m2 = a - q2.matrix() * s;
  const Mat mh = a - 0.5 * (q1.matrix() + q2.matrix()) * s;
  PolarizationResiduals out;
  out.residuals[0] = (diff - (m1 * d + d * m2.transpose())).norm();
  out.residuals[1] = (diff - (mh * d + d * mh.transpose())).norm();
  out.residuals[2] = (diff - (m2 * d + d * m2.transpose() - d * s * d)).norm();
  const double nq = q1.matrix().norm() + q2.matrix().norm();
  out.scale = 1.0 + a.norm() * nq + nq * nq * s.norm() + model.R1().matrix().norm();
  return out;
}

}  // namespace kbflow
