#pragma once

#include "kbflow/scenario.hpp"
#include "kbflow/stochastic.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <filesystem>
#include <map>

namespace kbflow {

struct CheckEntry {
  std::string name;
  std::string statement;
  std::string tolerance;
  bool pass = false;
  double margin = 0.0;
  std::string csv;  // artifact holding the series, if any
};

struct CertificationReport {
  std::string command;
  nlohmann::json sections = nlohmann::json::object();
  std::vector<CheckEntry> checks;
  std::vector<std::pair<std::string, std::string>> artifacts;  // file name, contents

  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckEntry& c) { return c.pass; });
  }

  nlohmann::json to_json() const {
    nlohmann::json j = sections;
    j["command"] = command;
    j["pass"] = pass();
    auto& arr = j["checks"] = nlohmann::json::array();
    for (const auto& c : checks) {
      nlohmann::json e = {{"name", c.name},         {"statement", c.statement}, {"tolerance", c.tolerance},
                          {"pass", c.pass},         {"margin", finite_or_string(c.margin)}};
      if (!c.csv.empty()) e["csv"] = c.csv;
      arr.push_back(e);
    }
    return j;
  }

  static nlohmann::json finite_or_string(double v) {
    if (std::isfinite(v)) return v;
    return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  }
};

inline nlohmann::json to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json to_json(const GramianReport& r) {
  return {{"upsilon", r.upsilon},
          {"varpi_c_minus", r.varpi_c_minus},
          {"varpi_c_plus", r.varpi_c_plus},
          {"varpi_o_minus", r.varpi_o_minus},
          {"varpi_o_plus", r.varpi_o_plus},
          {"varpi_cO_minus", r.varpi_cO_minus},
          {"varpi_cO_plus", r.varpi_cO_plus},
          {"varpi_oC_minus", r.varpi_oC_minus},
          {"varpi_oC_plus", r.varpi_oC_plus},
          {"grid", r.grid},
          {"sup_norm_A", r.sup_norm_A},
          {"sup_norm_S", r.sup_norm_S},
          {"inf_lambda_min_S", r.inf_lambda_min_S},
          {"certifiable", r.certifiable},
          {"reason", r.reason}};
}

class Pipeline {
 public:
  static const std::vector<std::string>& commands() {
    static const std::vector<std::string> names = {
        "gramians",         "solve-are",       "integrate-dre", "bounds",         "constants",
        "certify-semigroup", "certify-riccati", "simulate",      "verify-events",  "verify-moments",
        "verify-contraction", "report"};
    return names;
  }

  explicit Pipeline(const Scenario& sc, std::optional<std::uint64_t> seed_override = std::nullopt)
      : sc_(sc), model_(sc.signal()), seed_(seed_override ? seed_override : sc.mc.seed) {}

  CertificationReport run(const std::string& command) {
    if (std::find(commands().begin(), commands().end(), command) == commands().end())
      throw std::invalid_argument("unknown command: " + command);
    CertificationReport rep;
    rep.command = command;
    rep.sections["scenario"] = sc_.source;
    // A full report on a time-varying model skips the stages that need the ARE.
    static constexpr std::array ti_only = {"solve-are", "constants", "verify-events", "verify-moments",
                                           "verify-contraction"};
    auto stage = [&](const char* name, auto&& fn) {
      if (command == "report" && !model_.time_invariant() &&
          std::find_if(ti_only.begin(), ti_only.end(), [&](const char* n) { return std::strcmp(n, name) == 0; }) !=
              ti_only.end()) {
        rep.sections["skipped"].push_back(std::string(name) + ": requires a time-invariant model");
        return;
      }
      run_stage(name, fn, rep);
    };
    if (command == "gramians" || command == "report") stage("gramians", [&](auto& r) { do_gramians(r); });
    if (command == "solve-are" || command == "report") stage("solve-are", [&](auto& r) { do_are(r); });
    if (command == "integrate-dre" || command == "report") stage("integrate-dre", [&](auto& r) { do_dre(r); });
    if (command == "bounds" || command == "certify-riccati" || command == "report")
      stage("bounds", [&](auto& r) { do_bounds(r); });
    if (command == "constants" || command == "report") stage("constants", [&](auto& r) { do_constants(r); });
    if (command == "certify-semigroup" || command == "report")
      stage("certify-semigroup", [&](auto& r) { do_semigroup(r); });
    if (command == "certify-riccati" || command == "report")
      stage("certify-riccati", [&](auto& r) { do_riccati(r); });
    if (command == "simulate" || command == "report") stage("simulate", [&](auto& r) { do_simulate(r); });
    if (command == "report") stage("bias", [&](auto& r) { do_bias(r); });
    if (command == "verify-events" || command == "report") stage("verify-events", [&](auto& r) { do_events(r); });
    if (command == "verify-moments" || command == "report") stage("verify-moments", [&](auto& r) { do_moments(r); });
    if (command == "verify-contraction" || command == "report")
      stage("verify-contraction", [&](auto& r) { do_contraction(r); });
    return rep;
  }

 private:
  template <class Fn>
  void run_stage(const char* name, Fn&& fn, CertificationReport& rep) {
    try {
      fn(rep);
    } catch (const ScenarioError&) {
      throw;
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("stage ") + name + ": " + e.what());
    } catch (const std::out_of_range& e) {
      throw std::invalid_argument(std::string("stage ") + name + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string("stage ") + name + ": " + e.what());
    }
  }

  // Cached intermediate results.
  const GramianReport& gramian_report() {
    if (!gramians_)
      gramians_ = uniformity_constants(model_, sc_.analysis.upsilon, sc_.analysis.horizon, sc_.analysis.grid_n);
    return *gramians_;
  }
  const ArePoint& are() {
    if (!are_) are_ = solve_are(model_);
    return *are_;
  }
  const StabilityConstants& constants() {
    if (!constants_) constants_ = constants_ledger(model_, gramian_report(), are(), sc_.analysis.upsilon);
    return *constants_;
  }
  RiccatiTrajectory trajectory(const SymMat& q, double t_end) const {
    DreOptions o;
    o.psd_tol = sc_.analysis.psd_tol;
    return integrate_dre(model_, 0.0, t_end, q, sc_.analysis.dre_step, o);
  }
  void require_ti(const char* what) const {
    if (!model_.time_invariant())
      throw std::invalid_argument(std::string(what) + " requires a time-invariant model");
  }
  std::uint64_t seed() const {
    if (!seed_) throw ScenarioError({"mc.seed is mandatory for Monte Carlo commands (or pass --seed)"});
    return *seed_;
  }

  void add_series(CertificationReport& rep, const CheckSeries& cs) {
    CheckEntry e{cs.name, cs.statement, cs.tolerance, cs.pass(), cs.worst_margin(), ""};
    if (sc_.output.csv) {
      std::ostringstream os;
      cs.write_csv(os);
      e.csv = cs.name + ".csv";
      rep.artifacts.emplace_back(e.csv, os.str());
    }
    rep.checks.push_back(e);
  }

  static void add_scalar(CertificationReport& rep, std::string name, std::string statement, std::string tol,
                         double margin) {
    rep.checks.push_back({std::move(name), std::move(statement), std::move(tol), margin >= 0.0, margin, ""});
  }

  void do_gramians(CertificationReport& rep) {
    const GramianReport& g = gramian_report();
    rep.sections["gramians"] = to_json(g);
    if (model_.time_invariant()) {
      const RankConditions rc = rank_conditions(model_);
      rep.sections["rank_conditions"] = {{"controllable", rc.controllable}, {"observable", rc.observable}};
    }
    rep.checks.push_back({"uniform_gramian_bounds", "all lower uniformity constants are positive on the grid",
                          "psd_tol", g.certifiable, std::min(g.varpi_c_minus, g.varpi_o_minus), ""});
  }

  void do_are(CertificationReport& rep) {
    require_ti("solve-are");
    const ArePoint& p = are();
    rep.sections["are"] = {{"P", to_json(p.P.matrix())},
                           {"residual_norm", p.residual_norm},
                           {"closed_loop_abscissa", p.closed_loop_abscissa},
                           {"iterations", p.iterations},
                           {"dre_seed", p.used_dre_seed}};
    const double tol = 1e-11 * (1.0 + p.P.sym().norm());
    add_scalar(rep, "are_residual", "||Ricc(P)||_F <= are_tol", "1e-11 (1 + ||P||)", tol - p.residual_norm);
    add_scalar(rep, "are_stabilizing", "spectral abscissa of A - P S < 0", "strict", -p.closed_loop_abscissa);
  }

  void do_dre(CertificationReport& rep) {
    const RiccatiTrajectory tr = trajectory(sc_.analysis.Q, sc_.analysis.horizon);
    double lmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < tr.size(); ++i) lmin = std::min(lmin, tr.lambda_min(i));
    rep.sections["dre"] = {{"nodes", tr.size()},
                           {"start", tr.start()},
                           {"end", tr.end()},
                           {"final", to_json(tr.final_value().matrix())},
                           {"min_lambda_min", lmin}};
    std::ostringstream os;
    tr.write_csv(os);
    rep.artifacts.emplace_back("trajectory.csv", os.str());
    rep.checks.push_back({"dre_psd", "every trajectory node is PSD within psd_tol", "psd_tol", true, lmin,
                          "trajectory.csv"});
  }

  void bounds_series(CertificationReport& rep, const RiccatiTrajectory& tr, const std::string& tag) {
    const double ups = sc_.analysis.upsilon;
    const double tol = sc_.analysis.bound_tol;
    const auto [lo, hi] = bucy_spectrum_interval(gramian_report());
    CheckSeries spec{"spectrum_interval" + tag, "Spec(phi_t(Q)) within the interval from the uniformity constants",
                     "bound_tol", {}, 0, 0.0, 0};
    std::optional<BucyBounds> bb;
    if (model_.time_invariant()) bb = bucy_bounds(model_, ups);
    CheckSeries lower{"bucy_lower" + tag, "Lambda_min <= phi_t(Q) (Loewner), t >= upsilon", "bound_tol", {}, 0, 0.0, 0};
    CheckSeries upper{"bucy_upper" + tag, "phi_t(Q) <= Lambda_max (Loewner), t >= upsilon", "bound_tol", {}, 0, 0.0, 0};
    for (std::size_t i = 0; i < tr.size(); ++i) {
      const double t = tr.times()[i];
      if (t < ups) continue;
      spec.add(t, std::max(lo - tr.lambda_min(i), tr.lambda_max(i) - hi), 0.0, tol);
      if (bb) {
        const SymMat& phi = tr.values()[i];
        lower.add(t, (bb->lambda_min_bound.sym() - phi).lambda_max(), 0.0, tol);
        upper.add(t, (phi - bb->lambda_max_bound).lambda_max(), 0.0, tol);
      }
    }
    add_series(rep, spec);
    if (bb) {
      add_series(rep, lower);
      add_series(rep, upper);
    }
  }

  void do_bounds(CertificationReport& rep) {
    const GramianReport& g = gramian_report();
    if (!g.certifiable) throw std::invalid_argument("model is not certifiable: " + g.reason);
    const auto [lo, hi] = bucy_spectrum_interval(g);
    nlohmann::json j = {{"upsilon", sc_.analysis.upsilon}, {"spectrum_lower", lo}, {"spectrum_upper", hi}};
    if (model_.time_invariant()) {
      const BucyBounds bb = bucy_bounds(model_, sc_.analysis.upsilon);
      j["lambda_min_bound"] = to_json(bb.lambda_min_bound.matrix());
      j["lambda_max_bound"] = to_json(bb.lambda_max_bound.matrix());
    }
    rep.sections["bucy_bounds"] = j;
    const double end = std::max(sc_.analysis.horizon, sc_.analysis.upsilon + 1.0);
    bounds_series(rep, trajectory(sc_.analysis.Q, end), "");
  }

  nlohmann::json ledger_json(const StabilityConstants& k) const {
    const SymMat& q = sc_.analysis.Q;
    const SymMat& q2 = sc_.analysis.Q2;
    using R = CertificationReport;
    auto at = [&](const SymMat& m) {
      return nlohmann::json{{"Q", to_json(m.matrix())},
                            {"rho", R::finite_or_string(k.rho(m))},
                            {"phi_sup", k.phi_sup(m)},
                            {"kappa_phi", R::finite_or_string(k.kappa_phi(m))},
                            {"kappa_E", R::finite_or_string(k.kappa_E(m))},
                            {"sigma", R::finite_or_string(k.sigma(m))},
                            {"chi1", R::finite_or_string(k.chi1(m))},
                            {"chi2", R::finite_or_string(k.chi2(m))}};
    };
    return {{"upsilon", k.upsilon},
            {"alpha", k.alpha},
            {"alpha_safe", k.alpha_safe},
            {"alpha_below_one", k.alpha < 1.0},
            {"beta", k.beta},
            {"nu", k.nu},
            {"kappa", k.kappa},
            {"decay_route", k.decay_route == DecayRoute::log_norm ? "log_norm" : "lyapunov"},
            {"norm_P", k.norm_P},
            {"sup_norm_A", k.sup_norm_A},
            {"sup_norm_S", k.sup_norm_S},
            {"norm_R1", k.norm_R1},
            {"r1", k.r1},
            {"at_P", at(k.P)},
            {"at_Q", at(q)},
            {"pair_Q_Q2",
             {{"kappa_phi", R::finite_or_string(k.kappa_phi(q, q2))},
              {"kappa_E", R::finite_or_string(k.kappa_E(q, q2))},
              {"chi0", R::finite_or_string(k.chi0(q, q2))}}},
            {"provenance", to_json(k.provenance)}};
  }

  void do_constants(CertificationReport& rep) {
    require_ti("constants");
    const StabilityConstants& k = constants();
    rep.sections["constants"] = ledger_json(k);
    add_scalar(rep, "beta_positive", "beta > 0", "strict", k.beta);
    add_scalar(rep, "nu_positive", "nu > 0", "strict", k.nu);
    add_scalar(rep, "alpha_safe_at_least_one", "alpha_safe >= 1", "1e-12", k.alpha_safe - 1.0 + 1e-12);
  }

  // Sampled (s, t) pairs for semigroup norms.
  std::vector<double> starts(double end) const {
    const double u = sc_.analysis.upsilon;
    std::vector<double> out;
    for (double s : {0.0, 0.5 * u, u, u + 1.0, u + 2.5, u + 5.0})
      if (s < end) out.push_back(s);
    return out;
  }

  void do_semigroup(CertificationReport& rep) {
    const GramianReport& g = gramian_report();
    const BucyConstants bc = bucy_alpha_beta(g, model_);
    if (!bc.certifiable) throw std::invalid_argument("model is not certifiable: " + bc.reason);
    const double ups = sc_.analysis.upsilon;
    const double end = ups + std::max(sc_.analysis.horizon, 10.0);
    const SymMat& q = sc_.analysis.Q;
    const SymMat& q2 = sc_.analysis.Q2;
    const RiccatiTrajectory tr = trajectory(q, end);
    const SemigroupPath path(model_, tr);
    const bool ti = model_.time_invariant();
    const double rel = 1e-8;

    CheckSeries safe{"semigroup_alpha_safe", "||E_{s,t}(Q)|| <= alpha_safe e^{-beta (t-s)}, t >= s >= upsilon",
                     "1e-8 relative", {}, 0, 0.0, 0};
    CheckSeries rho{"semigroup_rho", "||E_{s,t}(Q)|| <= rho(Q) e^{-beta (t-s)}, t >= s >= 0", "1e-8 relative", {}, 0,
                    0.0, 0};
    CheckSeries kap{"semigroup_kappa_E", "||E_{s,t}(Q)|| <= kappa_E(Q) e^{-nu (t-s)}", "1e-8 relative", {}, 0, 0.0, 0};
    int ratio_alpha_violations = 0;
    for (double s : starts(end)) {
      std::vector<double> ts;
      for (double t = s; t <= std::min(s + 10.0, end) + 1e-12; t += 0.25) ts.push_back(std::min(t, end));
      const auto es = path.sweep(s, ts);
      for (std::size_t j = 0; j < ts.size(); ++j) {
        const double v = op_norm(es[j]);
        const double dt = ts[j] - s;
        if (s >= ups) {
          const double b = bc.alpha_safe * std::exp(-bc.beta * dt);
          safe.add(ts[j], v, b, rel * b);
          if (v > bc.alpha * std::exp(-bc.beta * dt) * (1.0 + rel)) ++ratio_alpha_violations;
        }
        if (ti) {
          const double b = constants().rho(q) * std::exp(-bc.beta * dt);
          rho.add(ts[j], v, b, rel * b);
          const double bk = constants().kappa_E(q) * std::exp(-constants().nu * dt);
          kap.add(ts[j], v, bk, rel * bk);
        }
      }
    }
    rep.sections["semigroup"] = {{"alpha", bc.alpha},
                                 {"alpha_safe", bc.alpha_safe},
                                 {"beta", bc.beta},
                                 {"ratio_alpha_violations", ratio_alpha_violations}};
    add_series(rep, safe);
    if (!ti) return;
    add_series(rep, rho);
    add_series(rep, kap);

    const StabilityConstants& k = constants();
    // Convergence to the fixed point.
    const SymMat& p = k.P;
    const double floor = 1e-9 * (1.0 + k.norm_P);
    std::vector<std::pair<double, double>> samples;
    CheckSeries kphi{"riccati_kappa_phi", "||phi_t(Q) - P|| <= kappa_phi(Q) e^{-2 nu t} ||Q - P||", "1e-8 relative",
                     {}, 0, 0.0, 0};
    const double dqp = (q - p).norm();
    for (std::size_t i = 0; i < tr.size(); ++i) {
      const double t = tr.times()[i];
      const double v = (tr.values()[i] - p).norm();
      if (t >= ups && v > floor) samples.emplace_back(t, v);
      const double b = k.kappa_phi(q) * std::exp(-2.0 * k.nu * t) * dqp;
      kphi.add(t, v, b, rel * b + 1e-14);
    }
    add_series(rep, kphi);
    if (samples.size() >= 8) {
      const DecayFit fit = fit_decay(samples, ups);
      rep.sections["semigroup"]["fixed_point_fit"] = {{"rate", fit.fitted_rate},
                                                      {"prefactor", fit.fitted_prefactor},
                                                      {"samples", fit.sample_times.size()},
                                                      {"residual", fit.residual}};
      const double tol = sc_.analysis.fit_tol;
      add_scalar(rep, "fixed_point_rate_beta", "fitted rate of ||phi_t(Q) - P|| >= 2 beta (1 - fit_tol)", "fit_tol",
                 fit.fitted_rate - 2.0 * k.beta * (1.0 - tol));
      add_scalar(rep, "fixed_point_rate_nu", "fitted rate of ||phi_t(Q) - P|| >= 2 nu (1 - fit_tol)", "fit_tol",
                 fit.fitted_rate - 2.0 * k.nu * (1.0 - tol));
    } else {
      rep.sections["semigroup"]["fixed_point_fit"] = "skipped: Q is already at the fixed point";
    }

    // Lipschitz dependence of the semigroup on Q.
    const RiccatiTrajectory tr2 = trajectory(q2, end);
    const SemigroupPath path2(model_, tr2);
    CheckSeries lip{"semigroup_lipschitz", "||E_{s,t}(Q2) - E_{s,t}(Q)|| <= kappa_E(Q,Q2) e^{-nu (t-s)} ||Q2 - Q||",
                    "1e-8 relative", {}, 0, 0.0, 0};
    const double dq = (q2 - q).norm();
    const double kep = k.kappa_E(q, q2);
    for (double s : starts(end)) {
      std::vector<double> ts;
      for (double t = s; t <= std::min(s + 10.0, end) + 1e-12; t += 0.25) ts.push_back(std::min(t, end));
      const auto e1 = path.sweep(s, ts);
      const auto e2 = path2.sweep(s, ts);
      for (std::size_t j = 0; j < ts.size(); ++j) {
        const double b = kep * std::exp(-k.nu * (ts[j] - s)) * dq;
        lip.add(ts[j], op_norm(e2[j] - e1[j]), b, rel * b + 1e-12);
      }
    }
    add_series(rep, lip);
  }

  void do_riccati(CertificationReport& rep) {
    const SymMat& q = sc_.analysis.Q;
    const SymMat& q2 = sc_.analysis.Q2;
    const double end = sc_.analysis.upsilon + std::max(sc_.analysis.horizon, 10.0);
    const RiccatiTrajectory t1 = trajectory(q, end);
    const RiccatiTrajectory t2 = trajectory(q2, end);
    bounds_series(rep, t2, "_Q2");

    double worst = 0.0, worst_scale = 1.0;
    for (double t : {0.0, 0.5 * end, end}) {
      const PolarizationResiduals pr = verify_polarization(model_, t, t1.at(t), t2.at(t));
      for (double r : pr.residuals)
        if (r / pr.scale > worst / worst_scale) {
          worst = r;
          worst_scale = pr.scale;
        }
    }
    add_scalar(rep, "polarization", "Ricc(Q1) - Ricc(Q2) equals the three factorized forms", "1e-12 scale",
               1e-12 * worst_scale - worst);

    if (loewner_leq(q, q2, 0.0) || loewner_leq(q2, q, 0.0)) {
      const bool up = loewner_leq(q, q2, 0.0);
      CheckSeries mono{"riccati_monotone", "Q1 <= Q2 implies phi_t(Q1) <= phi_t(Q2)", "1e-8", {}, 0, 0.0, 0};
      for (double t = 0.0; t <= end + 1e-12; t += 0.25) {
        const SymMat d = up ? t1.at(t) - t2.at(t) : t2.at(t) - t1.at(t);
        mono.add(t, d.lambda_max(), 0.0, 1e-8);
      }
      add_series(rep, mono);
    }

    if (!model_.time_invariant()) return;
    do_are(rep);
    const StabilityConstants& k = constants();
    CheckSeries con{"riccati_contraction", "||phi_t(Q1) - phi_t(Q2)|| <= rho(Q1) rho(Q2) e^{-2 beta t} ||Q1 - Q2||",
                    "1e-8 relative", {}, 0, 0.0, 0};
    const double dq = (q - q2).norm();
    const double pre = k.rho(q, q2);
    for (double t = 0.0; t <= end + 1e-12; t += 0.25) {
      const double b = pre * std::exp(-2.0 * k.beta * t) * dq;
      con.add(t, (t1.at(t) - t2.at(t)).norm(), b, 1e-8 * b + 1e-14);
    }
    add_series(rep, con);
  }

  // Monte Carlo plumbing.
  SymMat mc_q() {
    if (sc_.mc.Q) return *sc_.mc.Q;
    require_ti("the default mc.Q (the ARE solution)");
    return are().P.sym();
  }
  SymMat mc_q2() {
    if (sc_.mc.Q2) return *sc_.mc.Q2;
    return mc_q() + 0.25 * SymMat::identity(model_.r1());
  }
  McSetup mc_setup() const {
    McSetup st;
    st.s = sc_.mc.s;
    st.x_signal = sc_.mc.x_signal;
    st.x = sc_.mc.x;
    st.n_mc = sc_.mc.n_mc;
    if (!sc_.mc.t_grid.empty()) {
      st.t_grid = sc_.mc.t_grid;
    } else {
      const std::size_t n = std::max<std::size_t>(sc_.mc.n_times, 1);
      for (std::size_t i = 1; i <= n; ++i) {
        // Snap to the noise grid.
        const double t = sc_.mc.s + sc_.mc.horizon * static_cast<double>(i) / static_cast<double>(n);
        st.t_grid.push_back(sc_.mc.s + std::round((t - sc_.mc.s) / sc_.mc.step) * sc_.mc.step);
      }
    }
    return st;
  }
  NoiseBundle noise() const { return NoiseBundle(seed(), sc_.mc.step, sc_.mc.s + sc_.mc.horizon); }
  void replication(CertificationReport& rep) const {
    rep.sections["replication"] = {{"seed", seed()}, {"step", sc_.mc.step}, {"n_mc", sc_.mc.n_mc}};
  }
  double mc_end(const McSetup& st) const { return std::max(st.t_grid.back(), sc_.mc.s + sc_.mc.horizon); }

  void do_simulate(CertificationReport& rep) {
    const NoiseBundle nb = noise();
    const McSetup st = mc_setup();
    const SymMat q = mc_q();
    const RiccatiTrajectory tr = trajectory(q, mc_end(st));
    SimulationOptions opts;
    const double end = sc_.mc.s + sc_.mc.horizon;
    const auto steps = static_cast<std::size_t>(std::llround(sc_.mc.horizon / sc_.mc.step));
    opts.record_every = std::max<std::size_t>(1, steps / 1000);
    const std::size_t n_written = std::min<std::size_t>(sc_.mc.n_ensemble, 8);
    CoupledPathBundle b = simulate_coupled(model_, tr, sc_.mc.x_signal, sc_.mc.x, nb, sc_.mc.n_ensemble, end, opts,
                                           sc_.mc.s);
    const std::size_t last = b.times.size() - 1;
    Vec mean = Vec::Zero(model_.r1());
    for (const auto& path : b.psi_bar) mean += path[last];
    if (!b.psi_bar.empty()) mean /= static_cast<double>(b.psi_bar.size());
    rep.sections["simulation"] = {{"points", b.times.size()},
                                  {"n_ensemble", sc_.mc.n_ensemble},
                                  {"final_filter", to_json(b.psi[last])},
                                  {"final_signal", to_json(b.X[last])},
                                  {"final_ensemble_mean", to_json(mean)}};
    b.psi_bar.resize(n_written);
    std::ostringstream os;
    b.write_csv(os);
    rep.artifacts.emplace_back("paths.csv", os.str());
    replication(rep);
    rep.checks.push_back({"simulation_finite", "all simulated paths stay finite", "none", true, 0.0, "paths.csv"});
  }

  void do_bias(CertificationReport& rep) {
    const NoiseBundle nb = noise();
    const McSetup st = mc_setup();
    const SymMat q = mc_q();
    const RiccatiTrajectory tr = trajectory(q, mc_end(st));
    const BucyConstants bc = bucy_alpha_beta(gramian_report(), model_);
    if (!bc.certifiable) throw std::invalid_argument("model is not certifiable: " + bc.reason);
    // alpha_safe needs s >= upsilon unless Q is the fixed point; otherwise use rho(Q).
    double pre = bc.alpha_safe;
    if (st.s < sc_.analysis.upsilon && sc_.mc.Q) {
      require_ti("conditional bias with s < upsilon");
      pre = constants().rho(q);
    }
    add_series(rep, conditional_bias(model_, tr, st, nb, pre, bc.beta));
    replication(rep);
  }

  void do_events(CertificationReport& rep) {
    require_ti("verify-events");
    const NoiseBundle nb = noise();
    const McSetup st = mc_setup();
    const SymMat q = mc_q();
    const RiccatiTrajectory tr = trajectory(q, mc_end(st));
    const double sigma = constants().sigma(q);
    for (Target target : {Target::filter, Target::diffusion}) {
      const auto res = verify_event_probability(model_, tr, sigma, st, sc_.mc.deltas, nb, target);
      for (double d : sc_.mc.deltas) {
        std::ostringstream name;
        name << "events_" << to_string(target) << "_delta" << d;
        CheckSeries cs{name.str(), "P(||N_t|| > threshold(delta) | X_s) <= e^{-delta}", "3 binomial sigma", {},
                       nb.seed(), nb.step(), st.n_mc};
        for (const auto& r : res)
          if (r.delta == d) cs.add(r.t, r.violation_rate, r.bound, r.slack);
        add_series(rep, cs);
      }
    }
    rep.sections["events"] = {{"sigma_Q", sigma}};
    replication(rep);
  }

  void do_moments(CertificationReport& rep) {
    require_ti("verify-moments");
    const NoiseBundle nb = noise();
    const McSetup st = mc_setup();
    const SymMat q = mc_q();
    const RiccatiTrajectory tr = trajectory(q, mc_end(st));
    const double sigma = constants().sigma(q);
    for (Target target : {Target::filter, Target::diffusion})
      for (const auto& cs : moment_bound_check(model_, tr, sigma, st, sc_.mc.moment_orders, nb, target))
        add_series(rep, cs);
    rep.sections["moments"] = {{"sigma_Q", sigma}};
    replication(rep);
  }

  void do_contraction(CertificationReport& rep) {
    require_ti("verify-contraction");
    const NoiseBundle nb = noise();
    const McSetup st = mc_setup();
    const SymMat q1 = mc_q(), q2 = mc_q2();
    const RiccatiTrajectory t1 = trajectory(q1, mc_end(st));
    const RiccatiTrajectory t2 = trajectory(q2, mc_end(st));
    const ContractionInputs in{sc_.mc.x, sc_.mc.x2, q1, q2};
    for (Target target : {Target::filter, Target::diffusion})
      for (const auto& cs :
           contraction_check(model_, t1, t2, constants(), in, st, sc_.mc.moment_orders, nb, target))
        add_series(rep, cs);
    replication(rep);
  }

  const Scenario& sc_;
  const SignalModel& model_;
  std::optional<std::uint64_t> seed_;
  std::optional<GramianReport> gramians_;
  std::optional<ArePoint> are_;
  std::optional<StabilityConstants> constants_;
};

inline CertificationReport run(const Scenario& sc, const std::string& command,
                               std::optional<std::uint64_t> seed_override = std::nullopt) {
  Pipeline p(sc, seed_override);
  return p.run(command);
}

// Writes every artifact through a temporary file and a rename; the JSON
// report goes last.
inline void write_report(const CertificationReport& rep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& body) {
    const auto final_path = dir / name;
    const auto tmp = dir / (name + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw std::runtime_error("cannot write " + tmp.string());
      out << body;
    }
    std::filesystem::rename(tmp, final_path);
  };
  for (const auto& [name, body] : rep.artifacts) put(name, body);
  put("report.json", rep.to_json().dump(2) + "\n");
}

}  // namespace kbflow
