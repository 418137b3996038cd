#pragma once

#include "kbflow/signal_model.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

namespace kbflow {

// All schema problems found in a scenario file, not just the first.
class ScenarioError : public std::invalid_argument {
 public:
  explicit ScenarioError(std::vector<std::string> problems)
      : std::invalid_argument(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "invalid scenario:";
    for (const auto& e : p) s += "\n  - " + e;
    return s;
  }
  std::vector<std::string> problems_;
};

struct AnalysisConfig {
  double upsilon = 1.0;
  double horizon = 10.0;
  int grid_n = 129;
  double dre_step = 0.01;
  std::optional<double> psd_tol;
  double bound_tol = 1e-6;  // Loewner slack for the two-sided bounds
  double fit_tol = 0.05;    // relative slack on fitted decay rates
  SymMat Q;                 // initial covariance for certification runs
  SymMat Q2;                // second initial covariance for pair checks
};

struct McConfig {
  std::optional<std::uint64_t> seed;
  double step = 1e-3;
  double horizon = 10.0;
  double s = 0.0;
  std::size_t n_mc = 10000;
  std::size_t n_ensemble = 1000;
  std::vector<double> deltas{0.5, 1.0, 2.0};
  std::vector<int> moment_orders{1, 2};
  std::size_t n_times = 11;
  std::vector<double> t_grid;  // overrides n_times when given
  Vec x_signal;
  Vec x;
  Vec x2;
  std::optional<SymMat> Q;  // empty means the ARE solution P
  std::optional<SymMat> Q2;
};

struct OutputConfig {
  std::string dir;
  bool csv = true;
};

struct Scenario {
  std::string source;
  std::optional<SignalModel> model;
  AnalysisConfig analysis;
  McConfig mc;
  OutputConfig output;

  const SignalModel& signal() const { return *model; }
};

namespace detail {

using json = nlohmann::json;

class SchemaReader {
 public:
  std::vector<std::string> problems;

  std::optional<Mat> matrix(const json& node, const std::string& where) {
    if (node.is_number()) return Mat::Constant(1, 1, node.get<double>());
    if (!node.is_array() || node.empty()) {
      problems.push_back(where + ": expected a non-empty nested array");
      return std::nullopt;
    }
    // A flat array of numbers is read as a column vector.
    if (node[0].is_number()) {
      Mat m(static_cast<Eigen::Index>(node.size()), 1);
      for (std::size_t i = 0; i < node.size(); ++i) {
        if (!node[i].is_number()) {
          problems.push_back(where + ": non-numeric entry");
          return std::nullopt;
        }
        m(static_cast<Eigen::Index>(i), 0) = node[i].get<double>();
      }
      return m;
    }
    const std::size_t cols = node[0].is_array() ? node[0].size() : 0;
    if (cols == 0) {
      problems.push_back(where + ": rows must be non-empty arrays");
      return std::nullopt;
    }
    Mat m(static_cast<Eigen::Index>(node.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < node.size(); ++i) {
      if (!node[i].is_array() || node[i].size() != cols) {
        problems.push_back(where + ": ragged rows");
        return std::nullopt;
      }
      for (std::size_t j = 0; j < cols; ++j) {
        if (!node[i][j].is_number()) {
          problems.push_back(where + ": non-numeric entry");
          return std::nullopt;
        }
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = node[i][j].get<double>();
      }
    }
    if (!m.allFinite()) {
      problems.push_back(where + ": non-finite entry");
      return std::nullopt;
    }
    return m;
  }

  std::optional<Mat> sized(const json& node, const std::string& where, Eigen::Index rows, Eigen::Index cols) {
    auto m = matrix(node, where);
    if (m && (m->rows() != rows || m->cols() != cols)) {
      problems.push_back(where + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                         std::to_string(m->rows()) + "x" + std::to_string(m->cols()));
      return std::nullopt;
    }
    return m;
  }

  std::optional<MatrixFlow> flow(const json& node, const std::string& where, Eigen::Index rows, Eigen::Index cols) {
    if (node.is_object()) {
      if (!node.contains("t") || !node.contains("value")) {
        problems.push_back(where + ": tabulated flow needs keys \"t\" and \"value\"");
        return std::nullopt;
      }
      const json& ts = node["t"];
      const json& vs = node["value"];
      if (!ts.is_array() || !vs.is_array() || ts.size() != vs.size() || ts.empty()) {
        problems.push_back(where + ": \"t\" and \"value\" must be arrays of equal, non-zero length");
        return std::nullopt;
      }
      std::vector<double> times;
      std::vector<Mat> values;
      bool ok = true;
      for (std::size_t i = 0; i < ts.size(); ++i) {
        if (!ts[i].is_number()) {
          problems.push_back(where + ".t[" + std::to_string(i) + "]: not a number");
          ok = false;
          continue;
        }
        times.push_back(ts[i].get<double>());
        if (i > 0 && ts[i].get<double>() <= ts[i - 1].get<double>()) {
          problems.push_back(where + ".t: time nodes must be strictly increasing");
          ok = false;
        }
        auto m = sized(vs[i], where + ".value[" + std::to_string(i) + "]", rows, cols);
        if (!m) ok = false;
        else values.push_back(*m);
      }
      if (!ok) return std::nullopt;
      return MatrixFlow::tabulated(std::move(times), std::move(values));
    }
    auto m = sized(node, where, rows, cols);
    if (!m) return std::nullopt;
    return MatrixFlow::constant(*m);
  }

  template <class T>
  void number(const json& obj, const char* key, T& out, const std::string& where, bool positive = false) {
    if (!obj.contains(key)) return;
    const json& v = obj[key];
    if (!v.is_number()) {
      problems.push_back(where + "." + key + ": expected a number");
      return;
    }
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) {
        problems.push_back(where + "." + key + ": expected a non-negative integer");
        return;
      }
      out = static_cast<T>(v.get<long long>());
    } else {
      out = v.get<T>();
    }
    if (positive && !(out > 0)) problems.push_back(where + "." + key + ": must be positive");
  }
};

inline SymMat symmetric_or_report(SchemaReader& rd, const json& node, const std::string& where, Eigen::Index n,
                                  bool require_psd) {
  auto m = rd.sized(node, where, n, n);
  if (!m) return SymMat::identity(n);
  if ((*m - m->transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + m->cwiseAbs().maxCoeff()))
    rd.problems.push_back(where + ": matrix is not symmetric");
  const SymMat s(*m);
  if (require_psd && s.lambda_min() < -default_psd_tol(s.norm()))
    rd.problems.push_back(where + ": matrix is not positive semi-definite");
  return s;
}

}  // namespace detail

inline Scenario parse_scenario_json(const nlohmann::json& doc, const std::string& source = "<memory>") {
  using detail::json;
  detail::SchemaReader rd;
  Scenario sc;
  sc.source = source;
  if (!doc.is_object()) throw ScenarioError({"top level must be an object"});

  // model
  int r1 = 0, r2 = 0;
  if (!doc.contains("model") || !doc["model"].is_object()) {
    rd.problems.push_back("missing key: model");
  } else {
    const json& m = doc["model"];
    for (const char* key : {"r1", "r2", "A", "C", "R1", "R2"})
      if (!m.contains(key)) rd.problems.push_back(std::string("missing key: model.") + key);
    rd.number(m, "r1", r1, "model", true);
    rd.number(m, "r2", r2, "model", true);
    if (r1 > 0 && r2 > 0) {
      std::optional<MatrixFlow> a, c;
      std::optional<SymMat> q1, q2;
      if (m.contains("A")) a = rd.flow(m["A"], "model.A", r1, r1);
      if (m.contains("C")) c = rd.flow(m["C"], "model.C", r2, r1);
      const std::size_t before = rd.problems.size();
      if (m.contains("R1")) q1 = detail::symmetric_or_report(rd, m["R1"], "model.R1", r1, false);
      if (m.contains("R2")) q2 = detail::symmetric_or_report(rd, m["R2"], "model.R2", r2, false);
      for (const auto& [name, q] : {std::pair{"model.R1", q1}, std::pair{"model.R2", q2}})
        if (q && q->lambda_min() <= default_psd_tol(q->norm()))
          rd.problems.push_back(std::string(name) + ": noise covariance must be positive definite");
      if (a && c && q1 && q2 && rd.problems.size() == before) {
        try {
          sc.model.emplace(r1, r2, *a, *c, *q1, *q2);
        } catch (const std::exception& e) {
          rd.problems.push_back(std::string("model: ") + e.what());
        }
      }
    }
  }

  // analysis
  AnalysisConfig& an = sc.analysis;
  const Eigen::Index n = std::max(r1, 1);
  an.Q = SymMat::identity(n);
  an.Q2 = 2.0 * SymMat::identity(n);
  if (doc.contains("analysis")) {
    const json& a = doc["analysis"];
    if (!a.is_object()) {
      rd.problems.push_back("analysis: expected an object");
    } else {
      rd.number(a, "upsilon", an.upsilon, "analysis", true);
      rd.number(a, "horizon", an.horizon, "analysis", true);
      rd.number(a, "grid_n", an.grid_n, "analysis", true);
      rd.number(a, "dre_step", an.dre_step, "analysis", true);
      rd.number(a, "bound_tol", an.bound_tol, "analysis");
      rd.number(a, "fit_tol", an.fit_tol, "analysis");
      if (a.contains("psd_tol")) {
        double tol = 0.0;
        rd.number(a, "psd_tol", tol, "analysis", true);
        an.psd_tol = tol;
      }
      if (a.contains("Q")) an.Q = detail::symmetric_or_report(rd, a["Q"], "analysis.Q", n, true);
      if (a.contains("Q2")) an.Q2 = detail::symmetric_or_report(rd, a["Q2"], "analysis.Q2", n, true);
      if (an.horizon < an.upsilon) rd.problems.push_back("analysis.horizon: must be at least upsilon");
    }
  }

  // mc
  McConfig& mc = sc.mc;
  mc.x_signal = Vec::Zero(n);
  mc.x = Vec::Ones(n);
  mc.x2 = Vec::Constant(n, -1.0);
  if (doc.contains("mc")) {
    const json& m = doc["mc"];
    if (!m.is_object()) {
      rd.problems.push_back("mc: expected an object");
    } else {
      if (m.contains("seed")) {
        if (!m["seed"].is_number_unsigned() && !(m["seed"].is_number_integer() && m["seed"].get<long long>() >= 0))
          rd.problems.push_back("mc.seed: expected a non-negative integer");
        else
          mc.seed = m["seed"].get<std::uint64_t>();
      }
      rd.number(m, "step", mc.step, "mc", true);
      rd.number(m, "horizon", mc.horizon, "mc", true);
      rd.number(m, "s", mc.s, "mc");
      rd.number(m, "n_mc", mc.n_mc, "mc", true);
      rd.number(m, "n_ensemble", mc.n_ensemble, "mc", true);
      rd.number(m, "n_times", mc.n_times, "mc", true);
      auto list = [&](const char* key, auto& out) {
        if (!m.contains(key)) return;
        if (!m[key].is_array()) {
          rd.problems.push_back(std::string("mc.") + key + ": expected an array");
          return;
        }
        out.clear();
        for (const auto& v : m[key]) {
          if (!v.is_number()) {
            rd.problems.push_back(std::string("mc.") + key + ": non-numeric entry");
            return;
          }
          out.push_back(v.get<typename std::decay_t<decltype(out)>::value_type>());
        }
      };
      list("deltas", mc.deltas);
      list("moment_orders", mc.moment_orders);
      list("t_grid", mc.t_grid);
      for (int o : mc.moment_orders)
        if (o < 1 || o > 3) rd.problems.push_back("mc.moment_orders: orders must be 1, 2 or 3");
      for (double d : mc.deltas)
        if (d < 0.0) rd.problems.push_back("mc.deltas: must be non-negative");
      auto vec = [&](const char* key, Vec& out) {
        if (!m.contains(key)) return;
        if (auto v = rd.sized(m[key], std::string("mc.") + key, n, 1)) out = *v;
      };
      vec("x_signal", mc.x_signal);
      vec("x", mc.x);
      vec("x2", mc.x2);
      if (m.contains("Q") && !(m["Q"].is_string() && m["Q"] == "P"))
        mc.Q = detail::symmetric_or_report(rd, m["Q"], "mc.Q", n, true);
      if (m.contains("Q2")) mc.Q2 = detail::symmetric_or_report(rd, m["Q2"], "mc.Q2", n, true);
      if (mc.s < 0.0) rd.problems.push_back("mc.s: must be non-negative");
      for (std::size_t i = 1; i < mc.t_grid.size(); ++i)
        if (mc.t_grid[i] <= mc.t_grid[i - 1]) rd.problems.push_back("mc.t_grid: must be strictly increasing");
    }
  }

  if (doc.contains("output")) {
    const json& o = doc["output"];
    if (!o.is_object()) {
      rd.problems.push_back("output: expected an object");
    } else {
      if (o.contains("dir")) {
        if (o["dir"].is_string()) sc.output.dir = o["dir"].get<std::string>();
        else rd.problems.push_back("output.dir: expected a string");
      }
      if (o.contains("csv")) {
        if (o["csv"].is_boolean()) sc.output.csv = o["csv"].get<bool>();
        else rd.problems.push_back("output.csv: expected a boolean");
      }
    }
  }

  for (const auto& [key, _] : doc.items())
    if (key != "model" && key != "analysis" && key != "mc" && key != "output")
      rd.problems.push_back("unknown top-level key: " + key);

  if (!rd.problems.empty()) throw ScenarioError(rd.problems);
  return sc;
}

inline Scenario parse_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError({"cannot open scenario file: " + path});
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ScenarioError({std::string("malformed scenario file: ") + e.what()});
  }
  return parse_scenario_json(doc, path);
}

}  // namespace kbflow
