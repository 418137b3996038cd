#pragma once

#include "kbflow/signal_model.hpp"

#include <optional>

namespace kbflow {

// All Gramian integrals over one window [s, t], built from a single fine grid.
struct WindowGramians {
  double s = 0.0;
  double t = 0.0;
  SymMat controllability;  // C_{s,t}
  SymMat observability;    // O_{s,t}
  SymMat weighted_c;       // int E_{r,t} C_{s,r} S_r C_{s,r} E_{r,t}' dr
  SymMat weighted_o;       // int E_{r,t}^{-T} O_{s,r} R1 O_{s,r} E_{r,t}^{-1} dr
  Mat transition;          // E_{s,t}(A)
};

namespace detail {

inline int gramian_panels(double len) {
  int n = std::max(64, static_cast<int>(std::ceil(64.0 * len)));
  return n + (n % 2);
}

// Composite Simpson on 2N intervals, improved by one Richardson step
// against Simpson on the N coarse intervals.
inline Mat simpson_richardson(const std::vector<Mat>& f, double h) {
  const std::size_t n = f.size() - 1;  // divisible by 4
  Mat fine = f[0] + f[n];
  for (std::size_t k = 1; k < n; ++k) fine += (k % 2 ? 4.0 : 2.0) * f[k];
  fine *= h / 3.0;
  Mat coarse = f[0] + f[n];
  for (std::size_t k = 2; k < n; k += 2) coarse += ((k / 2) % 2 ? 4.0 : 2.0) * f[k];
  coarse *= 2.0 * h / 3.0;
  return fine + (fine - coarse) / 15.0;
}

// Running integrals I_k = int_{r_0}^{r_k} g, fourth order on a uniform grid.
inline std::vector<Mat> cumulative_integral(const std::vector<Mat>& g, double h) {
  const std::size_t n = g.size() - 1;
  std::vector<Mat> out(g.size(), Mat::Zero(g[0].rows(), g[0].cols()));
  for (std::size_t k = 0; k < n; ++k) {
    Mat piece;
    if (n < 3) {
      piece = 0.5 * h * (g[k] + g[k + 1]);
    } else if (k == 0) {
      piece = (h / 24.0) * (9.0 * g[0] + 19.0 * g[1] - 5.0 * g[2] + g[3]);
    } else if (k == n - 1) {
      piece = (h / 24.0) * (9.0 * g[n] + 19.0 * g[n - 1] - 5.0 * g[n - 2] + g[n - 3]);
    } else {
      piece = (h / 24.0) * (-g[k - 1] + 13.0 * g[k] + 13.0 * g[k + 1] - g[k + 2]);
    }
    out[k + 1] = out[k] + piece;
  }
  return out;
}

}  // namespace detail

inline WindowGramians window_gramians(const SignalModel& model, double s, double t) {
  detail::require(s <= t, "gramian: requires s <= t");
  detail::require(s >= 0.0, "gramian: requires s >= 0");
  const Eigen::Index r = model.r1();
  WindowGramians w;
  w.s = s;
  w.t = t;
  if (t == s) {
    w.controllability = w.observability = w.weighted_c = w.weighted_o = SymMat::zero(r);
    w.transition = Mat::Identity(r, r);
    return w;
  }

  const int panels = detail::gramian_panels(t - s);
  const int n = 2 * panels;
  const double h = (t - s) / n;
  const Mat id = Mat::Identity(r, r);

  std::vector<Mat> step(n), step_inv(n);
  if (model.A_flow().is_constant()) {
    const Mat a = model.A(s);
    step.assign(n, mat_exp(a, h));
    step_inv.assign(n, mat_exp(a, -h));
  } else {
    const double sup = model.A_flow().sup_norm(s, t);
    const double sub = h / std::max(2.0, std::ceil(32.0 * h * (1.0 + sup)));
    for (int k = 0; k < n; ++k) {
      step[k] = transition_matrix(model.A_flow(), s + k * h, s + (k + 1) * h, sub);
      step_inv[k] = step[k].partialPivLu().inverse();
    }
  }

  // F_k = E_{s,r_k}, B_k = E_{r_k,t}, with inverses.
  std::vector<Mat> fwd(n + 1), fwd_inv(n + 1), bwd(n + 1), bwd_inv(n + 1);
  fwd[0] = fwd_inv[0] = id;
  for (int k = 0; k < n; ++k) {
    fwd[k + 1] = step[k] * fwd[k];
    fwd_inv[k + 1] = fwd_inv[k] * step_inv[k];
  }
  bwd[n] = bwd_inv[n] = id;
  for (int k = n - 1; k >= 0; --k) {
    bwd[k] = bwd[k + 1] * step[k];
    bwd_inv[k] = step_inv[k] * bwd_inv[k + 1];
  }

  const Mat& r1 = model.R1().matrix();
  std::vector<Mat> s_nodes(n + 1);
  for (int k = 0; k <= n; ++k) s_nodes[k] = model.S(s + k * h).matrix();

  std::vector<Mat> fc(n + 1), fo(n + 1), gc(n + 1), go(n + 1);
  for (int k = 0; k <= n; ++k) {
    fc[k] = bwd[k] * r1 * bwd[k].transpose();
    fo[k] = bwd_inv[k].transpose() * s_nodes[k] * bwd_inv[k];
    gc[k] = fwd_inv[k] * r1 * fwd_inv[k].transpose();
    go[k] = fwd[k].transpose() * s_nodes[k] * fwd[k];
  }
  const auto ic = detail::cumulative_integral(gc, h);
  const auto io = detail::cumulative_integral(go, h);

  std::vector<Mat> wc(n + 1), wo(n + 1);
  for (int k = 0; k <= n; ++k) {
    const Mat c_k = fwd[k] * ic[k] * fwd[k].transpose();              // C_{s,r_k}
    const Mat o_k = fwd_inv[k].transpose() * io[k] * fwd_inv[k];      // O_{s,r_k}
    wc[k] = bwd[k] * c_k * s_nodes[k] * c_k * bwd[k].transpose();
    wo[k] = bwd_inv[k].transpose() * o_k * r1 * o_k * bwd_inv[k];
  }

  w.controllability = SymMat(detail::simpson_richardson(fc, h));
  w.observability = SymMat(detail::simpson_richardson(fo, h));
  w.weighted_c = SymMat(detail::simpson_richardson(wc, h));
  w.weighted_o = SymMat(detail::simpson_richardson(wo, h));
  w.transition = fwd[n];
  for (const SymMat* m : {&w.controllability, &w.observability, &w.weighted_c, &w.weighted_o})
    detail::require_finite(m->matrix(), "gramian quadrature");
  return w;
}

inline SpdMat controllability_gramian(const SignalModel& model, double s, double t) {
  return SpdMat::certify(window_gramians(model, s, t).controllability);
}

inline SpdMat observability_gramian(const SignalModel& model, double s, double t) {
  return SpdMat::certify(window_gramians(model, s, t).observability);
}

struct DerivedGramians {
  SymMat O_of_C;  // C^{-1} [int E C S C E'] C^{-1}
  SymMat C_of_O;  // O^{-1} [int E^{-T} O R1 O E^{-1}] O^{-1}
};

inline DerivedGramians derived_gramians(const WindowGramians& w) {
  const SymMat c_inv = SpdMat::certify(w.controllability).inverse();
  const SymMat o_inv = SpdMat::certify(w.observability).inverse();
  return {w.weighted_c.congruence(c_inv.matrix()), w.weighted_o.congruence(o_inv.matrix())};
}

// Derived Gramians on the window [s, t] (the window [0, t] when s is omitted).
inline DerivedGramians derived_gramians(const SignalModel& model, double t, double s = 0.0) {
  detail::require(t > s, "derived_gramians: requires a window of positive length");
  return derived_gramians(window_gramians(model, s, t));
}

struct GramianReport {
  double upsilon = 0.0;
  double varpi_c_minus = 0.0, varpi_c_plus = 0.0;
  double varpi_o_minus = 0.0, varpi_o_plus = 0.0;
  double varpi_cO_minus = 0.0, varpi_cO_plus = 0.0;
  double varpi_oC_minus = 0.0, varpi_oC_plus = 0.0;
  std::vector<double> grid;
  // Model suprema on [0, horizon] sampled on the same number of points.
  double sup_norm_A = 0.0;
  double sup_norm_S = 0.0;
  double inf_lambda_min_S = 0.0;
  bool certifiable = false;
  std::string reason;
};

inline GramianReport uniformity_constants(const SignalModel& model, double upsilon, double horizon,
                                          int grid_n = 129) {
  detail::require(upsilon > 0.0, "uniformity_constants: upsilon must be positive");
  detail::require(horizon >= upsilon, "uniformity_constants: horizon must be at least upsilon");
  detail::require(grid_n >= 1, "uniformity_constants: grid_n must be positive");
  GramianReport rep;
  rep.upsilon = upsilon;
  const double span = horizon - upsilon;
  const int n = span > 0.0 ? grid_n : 1;
  for (int i = 0; i < n; ++i) rep.grid.push_back(n == 1 ? 0.0 : span * i / (n - 1));

  constexpr double inf = std::numeric_limits<double>::infinity();
  double mins[4] = {inf, inf, inf, inf};
  double maxs[4] = {-inf, -inf, -inf, -inf};
  bool singular = false;
  auto record = [&](int slot, const SymMat& m) {
    const Vec ev = m.eigenvalues();
    mins[slot] = std::min(mins[slot], ev(0));
    maxs[slot] = std::max(maxs[slot], ev(ev.size() - 1));
  };
  auto scan = [&](double t0) {
    const WindowGramians w = window_gramians(model, t0, t0 + upsilon);
    record(0, w.controllability);
    record(1, w.observability);
    try {
      const DerivedGramians d = derived_gramians(w);
      record(2, d.C_of_O);
      record(3, d.O_of_C);
    } catch (const NumericalError&) {
      singular = true;
    }
  };
  // Time-invariant windows are identical; evaluate once.
  if (model.time_invariant()) {
    scan(0.0);
  } else {
    for (double t0 : rep.grid) scan(t0);
  }

  rep.varpi_c_minus = mins[0];
  rep.varpi_c_plus = maxs[0];
  rep.varpi_o_minus = mins[1];
  rep.varpi_o_plus = maxs[1];
  rep.varpi_cO_minus = mins[2];
  rep.varpi_cO_plus = maxs[2];
  rep.varpi_oC_minus = mins[3];
  rep.varpi_oC_plus = maxs[3];
  rep.sup_norm_A = model.sup_norm_A(horizon, grid_n);
  rep.sup_norm_S = model.sup_norm_S(horizon, grid_n);
  rep.inf_lambda_min_S = model.inf_lambda_min_S(horizon, grid_n);

  const double tol_c = default_psd_tol(std::max(rep.varpi_c_plus, 0.0));
  const double tol_o = default_psd_tol(std::max(rep.varpi_o_plus, 0.0));
  if (singular || rep.varpi_c_minus <= tol_c || rep.varpi_o_minus <= tol_o) {
    rep.certifiable = false;
    rep.reason = rep.varpi_o_minus <= tol_o ? "observability Gramian is singular on some window"
                                            : "controllability Gramian is singular on some window";
  } else if (rep.varpi_cO_minus <= 0.0 || rep.varpi_oC_minus <= 0.0) {
    rep.certifiable = false;
    rep.reason = "derived Gramian is not positive definite";
  } else {
    rep.certifiable = true;
  }
  return rep;
}

struct RankConditions {
  bool controllable = false;
  bool observable = false;
};

namespace detail {

inline bool full_row_rank(const Mat& m) {
  Eigen::JacobiSVD<Mat> svd(m);
  const Vec& sv = svd.singularValues();
  const double tol = static_cast<double>(m.rows()) * sv(0) * 1e-12;
  return sv.size() >= m.rows() && sv(m.rows() - 1) > tol;
}

}  // namespace detail

inline RankConditions rank_conditions(const SignalModel& model) {
  detail::require(model.time_invariant(), "rank_conditions: model must be time-invariant");
  const int r = model.r1();
  const Mat a = model.A(0.0);
  const Mat c = model.C(0.0);
  const Mat b = model.R1_sqrt().matrix();
  Mat ctrl(r, r * r), obs(model.r2() * r, r);
  Mat pb = b, pc = c;
  for (int i = 0; i < r; ++i) {
    ctrl.middleCols(i * r, r) = pb;
    obs.middleRows(i * model.r2(), model.r2()) = pc;
    pb = a * pb;
    pc = pc * a;
  }
  return {detail::full_row_rank(ctrl), detail::full_row_rank(obs.transpose())};
}

// (e^{2 l u} - 1) / (2 l), with the removable singularity at l = 0.
inline double exp_window_integral(double lambda, double upsilon) {
  const double x = 2.0 * lambda * upsilon;
  if (std::abs(x) < 1e-6) return upsilon * (1.0 + x / 2.0 + x * x / 6.0);
  return std::expm1(x) / (2.0 * lambda);
}

struct ClosedFormVarpi {
  double c_minus, c_plus, o_minus, o_plus;
};

// Closed-form bounds for time-invariant models with diagonal A. Returns
// nothing for other models; callers then use the numerical Gramians.
inline std::optional<ClosedFormVarpi> diagonal_varpi(const SignalModel& model, double upsilon) {
  if (!model.time_invariant()) return std::nullopt;
  const Mat a = model.A(0.0);
  if (!a.isDiagonal(0.0)) return std::nullopt;
  const SymMat s = model.S(0.0);
  const double l_r = model.R1().sym().lambda_min(), u_r = model.R1().sym().lambda_max();
  const double l_s = s.lambda_min(), u_s = s.lambda_max();
  double cm = std::numeric_limits<double>::infinity(), cp = 0.0, om = cm, op = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double l = a(i, i);
    cm = std::min(cm, exp_window_integral(l, upsilon));
    cp = std::max(cp, exp_window_integral(l, upsilon));
    om = std::min(om, exp_window_integral(-l, upsilon));
    op = std::max(op, exp_window_integral(-l, upsilon));
  }
  return ClosedFormVarpi{l_r * cm, u_r * cp, l_s * om, u_s * op};
}

}  // namespace kbflow
