#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kbflow {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Raised when a computation produces something it cannot vouch for:
// non-finite values, failed eigen iterations, a flow leaving the PSD cone.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

inline void require_square(const Mat& a, const char* who) {
  if (a.rows() != a.cols() || a.rows() == 0)
    throw std::invalid_argument(std::string(who) + ": expected a non-empty square matrix");
}

inline void require_finite(const Mat& a, const char* who) {
  if (!a.allFinite()) throw NumericalError(std::string(who) + ": non-finite entries");
}

}  // namespace detail

// Spectral norm (largest singular value).
inline double op_norm(const Mat& a) {
  if (a.size() == 0) return 0.0;
  if (a.rows() == 1 || a.cols() == 1) return a.norm();
  Eigen::JacobiSVD<Mat> svd(a);
  return svd.singularValues()(0);
}

inline double default_psd_tol(double norm2) { return 1e-10 * (1.0 + norm2); }

class SymMat {
 public:
  SymMat() = default;

  explicit SymMat(const Mat& m) {
    detail::require_square(m, "SymMat");
    m_ = 0.5 * (m + m.transpose());
  }

  static SymMat identity(Eigen::Index n) { return SymMat(Mat::Identity(n, n)); }
  static SymMat zero(Eigen::Index n) { return SymMat(Mat::Zero(n, n)); }
  static SymMat diagonal(const Vec& d) { return SymMat(Mat(d.asDiagonal())); }
  static SymMat scalar(double v) { return SymMat(Mat::Constant(1, 1, v)); }

  const Mat& matrix() const { return m_; }
  Eigen::Index dim() const { return m_.rows(); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

  // Ascending eigenvalues.
  Vec eigenvalues() const {
    Eigen::SelfAdjointEigenSolver<Mat> es(m_, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericalError("symmetric eigenvalue iteration failed");
    return es.eigenvalues();
  }
  double lambda_min() const { return eigenvalues()(0); }
  double lambda_max() const { return eigenvalues()(dim() - 1); }
  double norm() const {
    const Vec ev = eigenvalues();
    return std::max(std::abs(ev(0)), std::abs(ev(dim() - 1)));
  }

  SymMat inverse() const {
    Eigen::SelfAdjointEigenSolver<Mat> es(m_);
    if (es.info() != Eigen::Success) throw NumericalError("symmetric eigenvalue iteration failed");
    const Vec& ev = es.eigenvalues();
    const double scale = std::max(std::abs(ev(0)), std::abs(ev(ev.size() - 1)));
    if (ev.cwiseAbs().minCoeff() <= 1e-14 * std::max(scale, 1e-300))
      throw NumericalError("inverse of a singular symmetric matrix");
    return SymMat(es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose());
  }

  // T * this * T'
  SymMat congruence(const Mat& t) const { return SymMat(t * m_ * t.transpose()); }

  friend SymMat operator+(const SymMat& a, const SymMat& b) { return SymMat(a.m_ + b.m_); }
  friend SymMat operator-(const SymMat& a, const SymMat& b) { return SymMat(a.m_ - b.m_); }
  friend SymMat operator*(double c, const SymMat& a) { return SymMat(c * a.m_); }

 private:
  Mat m_;
};

struct PsdCertificate {
  double lambda_min = 0.0;
  double tolerance = 0.0;
};

// Symmetric matrix accepted as positive semi-definite up to a declared
// tolerance. Eigenvalues in [-tol, 0) are clamped to zero on acceptance.
class SpdMat {
 public:
  SpdMat() = default;

  static SpdMat certify(const SymMat& m, std::optional<double> tol = std::nullopt) {
    Eigen::SelfAdjointEigenSolver<Mat> es(m.matrix());
    if (es.info() != Eigen::Success) throw NumericalError("symmetric eigenvalue iteration failed");
    const Vec& ev = es.eigenvalues();
    const double norm2 = std::max(std::abs(ev(0)), std::abs(ev(ev.size() - 1)));
    const double t = tol.value_or(default_psd_tol(norm2));
    if (!(ev(0) >= -t))
      throw NumericalError("matrix is not positive semi-definite: lambda_min = " + std::to_string(ev(0)));
    SpdMat out;
    out.cert_ = {std::max(ev(0), 0.0), t};
    if (ev(0) < 0.0) {
      const Vec clamped = ev.cwiseMax(0.0);
      out.value_ = SymMat(es.eigenvectors() * clamped.asDiagonal() * es.eigenvectors().transpose());
    } else {
      out.value_ = m;
    }
    return out;
  }

  const SymMat& sym() const { return value_; }
  const Mat& matrix() const { return value_.matrix(); }
  Eigen::Index dim() const { return value_.dim(); }
  const PsdCertificate& certificate() const { return cert_; }
  bool invertible() const { return cert_.lambda_min > cert_.tolerance; }

  SymMat inverse() const {
    if (!invertible()) throw NumericalError("inverse requested for a singular PSD matrix");
    return value_.inverse();
  }

 private:
  SymMat value_;
  PsdCertificate cert_;
};

inline SymMat sym_sqrt(const SymMat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m.matrix());
  if (es.info() != Eigen::Success) throw NumericalError("symmetric eigenvalue iteration failed");
  const Vec d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return SymMat(es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose());
}

inline SymMat sym_inv_sqrt(const SymMat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m.matrix());
  if (es.info() != Eigen::Success) throw NumericalError("symmetric eigenvalue iteration failed");
  if (es.eigenvalues()(0) <= 0.0) throw NumericalError("inverse square root of a non-positive matrix");
  const Vec d = es.eigenvalues().cwiseSqrt().cwiseInverse();
  return SymMat(es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose());
}

// Time-indexed matrix. Tabulated flows interpolate linearly between nodes
// and refuse to extrapolate.
class MatrixFlow {
 public:
  enum class Mode { constant, tabulated, closed_form };

  static MatrixFlow constant(Mat value) {
    detail::require(value.size() > 0, "MatrixFlow: empty matrix");
    detail::require(value.allFinite(), "MatrixFlow: non-finite entries");
    MatrixFlow f;
    f.mode_ = Mode::constant;
    f.rows_ = value.rows();
    f.cols_ = value.cols();
    f.values_ = {std::move(value)};
    return f;
  }

  static MatrixFlow tabulated(std::vector<double> times, std::vector<Mat> values) {
    detail::require(!times.empty() && times.size() == values.size(),
                    "MatrixFlow: tabulated flow needs matching, non-empty time and value lists");
    for (std::size_t i = 1; i < times.size(); ++i)
      detail::require(times[i] > times[i - 1], "MatrixFlow: tabulated times must be strictly increasing");
    for (const auto& v : values) {
      detail::require(v.rows() == values[0].rows() && v.cols() == values[0].cols(),
                      "MatrixFlow: tabulated values must share one shape");
      detail::require(v.allFinite(), "MatrixFlow: non-finite entries");
    }
    MatrixFlow f;
    f.mode_ = Mode::tabulated;
    f.rows_ = values[0].rows();
    f.cols_ = values[0].cols();
    f.times_ = std::move(times);
    f.values_ = std::move(values);
    return f;
  }

  static MatrixFlow closed_form(Eigen::Index rows, Eigen::Index cols, std::function<Mat(double)> fn) {
    detail::require(rows > 0 && cols > 0 && fn, "MatrixFlow: invalid closed-form flow");
    MatrixFlow f;
    f.mode_ = Mode::closed_form;
    f.rows_ = rows;
    f.cols_ = cols;
    f.fn_ = std::make_shared<const std::function<Mat(double)>>(std::move(fn));
    return f;
  }

  Mode mode() const { return mode_; }
  Eigen::Index rows() const { return rows_; }
  Eigen::Index cols() const { return cols_; }
  bool is_constant() const { return mode_ == Mode::constant; }

  // Valid time range; closed-form and constant flows are defined everywhere.
  std::pair<double, double> domain() const {
    if (mode_ == Mode::tabulated) return {times_.front(), times_.back()};
    return {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  }

  Mat operator()(double t) const {
    switch (mode_) {
      case Mode::constant:
        return values_[0];
      case Mode::closed_form: {
        Mat m = (*fn_)(t);
        if (m.rows() != rows_ || m.cols() != cols_)
          throw std::invalid_argument("MatrixFlow: closed-form evaluator returned the wrong shape");
        detail::require_finite(m, "MatrixFlow");
        return m;
      }
      case Mode::tabulated:
        break;
    }
    const double slack = 1e-12 * (1.0 + std::abs(times_.back()));
    if (t < times_.front() - slack || t > times_.back() + slack)
      throw std::out_of_range("MatrixFlow: t = " + std::to_string(t) + " outside tabulated range [" +
                              std::to_string(times_.front()) + ", " + std::to_string(times_.back()) + "]");
    if (times_.size() == 1 || t <= times_.front()) return values_.front();
    if (t >= times_.back()) return values_.back();
    const auto it = std::upper_bound(times_.begin(), times_.end(), t);
    const std::size_t j = static_cast<std::size_t>(it - times_.begin());
    const double w = (t - times_[j - 1]) / (times_[j] - times_[j - 1]);
    return (1.0 - w) * values_[j - 1] + w * values_[j];
  }

  // Grid estimate of sup ||F(u)||_2 over [t0, t1].
  double sup_norm(double t0, double t1, int n = 65) const {
    if (mode_ == Mode::constant) return op_norm(values_[0]);
    double best = 0.0;
    const int m = std::max(n, 2);
    for (int i = 0; i < m; ++i) best = std::max(best, op_norm((*this)(t0 + (t1 - t0) * i / (m - 1))));
    if (mode_ == Mode::tabulated)
      for (std::size_t i = 0; i < times_.size(); ++i)
        if (times_[i] >= t0 && times_[i] <= t1) best = std::max(best, op_norm(values_[i]));
    return best;
  }

 private:
  Mode mode_ = Mode::constant;
  Eigen::Index rows_ = 0;
  Eigen::Index cols_ = 0;
  std::vector<double> times_;
  std::vector<Mat> values_;
  std::shared_ptr<const std::function<Mat(double)>> fn_;
};

// mu(a) = lambda_max of the symmetric part.
inline double log_norm(const Mat& a) {
  detail::require_square(a, "log_norm");
  return SymMat(a).lambda_max();
}

inline Eigen::VectorXcd general_eigenvalues(const Mat& a) {
  detail::require_square(a, "eigenvalues");
  detail::require_finite(a, "eigenvalues");
  Eigen::EigenSolver<Mat> es(a, false);
  if (es.info() != Eigen::Success) throw NumericalError("Hessenberg-QR eigenvalue iteration did not converge");
  return es.eigenvalues();
}

inline double spectral_abscissa(const Mat& a) { return general_eigenvalues(a).real().maxCoeff(); }

// e^{ta} by scaling and squaring with the degree-13 Pade approximant.
inline Mat mat_exp(const Mat& a, double t = 1.0) {
  detail::require_square(a, "mat_exp");
  detail::require(std::isfinite(t), "mat_exp: non-finite t");
  const Eigen::Index n = a.rows();
  const Mat ta = t * a;
  detail::require_finite(ta, "mat_exp");
  const Mat id = Mat::Identity(n, n);

  constexpr double theta13 = 5.371920351148152;
  static constexpr double b[] = {64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
                                 1187353796428800.0,  129060195264000.0,   10559470521600.0,
                                 670442572800.0,      33522128640.0,       1323241920.0,
                                 40840800.0,          960960.0,            16380.0,
                                 182.0,               1.0};

  const double norm1 = ta.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm1 > theta13) squarings = static_cast<int>(std::ceil(std::log2(norm1 / theta13)));
  if (squarings > 1000) throw NumericalError("mat_exp: argument too large");
  const Mat x = ta / std::ldexp(1.0, squarings);

  const Mat x2 = x * x;
  const Mat x4 = x2 * x2;
  const Mat x6 = x4 * x2;
  const Mat u = x * (x6 * (b[13] * x6 + b[11] * x4 + b[9] * x2) + b[7] * x6 + b[5] * x4 + b[3] * x2 + b[1] * id);
  const Mat v = x6 * (b[12] * x6 + b[10] * x4 + b[8] * x2) + b[6] * x6 + b[4] * x4 + b[2] * x2 + b[0] * id;
  Mat r = (v - u).partialPivLu().solve(v + u);
  for (int i = 0; i < squarings; ++i) r = r * r;
  if (!r.allFinite()) throw NumericalError("mat_exp: overflow (||t a|| too large)");
  return r;
}

namespace detail {

inline Mat rk4_transition_step(const MatrixFlow& flow, double t0, double h, const Mat& e) {
  const Mat a0 = flow(t0);
  const Mat am = flow(t0 + 0.5 * h);
  const Mat a1 = flow(t0 + h);
  const Mat k1 = a0 * e;
  const Mat k2 = am * (e + 0.5 * h * k1);
  const Mat k3 = am * (e + 0.5 * h * k2);
  const Mat k4 = a1 * (e + h * k3);
  return e + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace detail

inline double default_transition_step(const MatrixFlow& flow, double s, double t) {
  const double len = t - s;
  if (len <= 0.0) return 1.0;
  const double sup = flow.sup_norm(s, t);
  const double n = std::max(256.0, std::ceil(128.0 * len * (1.0 + sup)));
  return len / n;
}

// Transition matrix of u -> A_u from s to t (fixed-step RK4).
inline Mat transition_matrix(const MatrixFlow& flow, double s, double t, std::optional<double> step = std::nullopt) {
  detail::require(flow.rows() == flow.cols(), "transition_matrix: flow must be square");
  detail::require(s <= t, "transition_matrix: requires s <= t");
  const double h_req = step ? *step : default_transition_step(flow, s, t);
  detail::require(h_req > 0.0, "transition_matrix: step must be positive");
  Mat e = Mat::Identity(flow.rows(), flow.rows());
  if (t == s) return e;
  const long n = std::max(1L, static_cast<long>(std::ceil((t - s) / h_req - 1e-9)));
  const double h = (t - s) / static_cast<double>(n);
  for (long k = 0; k < n; ++k) e = detail::rk4_transition_step(flow, s + k * h, h, e);
  detail::require_finite(e, "transition_matrix");
  return e;
}

struct ExpNormEstimate {
  double lower = 0.0;
  double schur_upper = 0.0;
};

// e^{sa(a) t} <= ||e^{ta}||_2 <= kappa_Sch(T) e^{sa(a) t}, with T the strictly
// upper part of the complex Schur form.
inline ExpNormEstimate exp_norm_estimate(const Mat& a, double t) {
  detail::require_square(a, "exp_norm_estimate");
  detail::require_finite(a, "exp_norm_estimate");
  Eigen::ComplexSchur<Mat> schur(a);
  if (schur.info() != Eigen::Success) throw NumericalError("Schur decomposition failed");
  Eigen::MatrixXcd strict = schur.matrixT().triangularView<Eigen::StrictlyUpper>();
  double tnorm = 0.0;
  if (a.rows() > 1) {
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(strict);
    tnorm = svd.singularValues()(0);
  }
  const double sa = schur.matrixT().diagonal().real().maxCoeff();
  const double x = tnorm * t;
  double term = 1.0;
  double kappa = 1.0;
  for (Eigen::Index i = 1; i <= a.rows(); ++i) {
    term *= x / static_cast<double>(i);
    kappa += term;
  }
  const double base = std::exp(sa * t);
  return {base, kappa * base};
}

inline bool loewner_leq(const SymMat& x, const SymMat& y, double tol) {
  detail::require(x.dim() == y.dim(), "loewner_leq: dimension mismatch");
  return (y - x).lambda_min() >= -tol;
}

// Solves M X + X M' + N = 0 by complex Schur reduction and column-wise
// triangular back-substitution. Requires lambda_i(M) + conj(lambda_j(M)) != 0.
inline SymMat solve_lyapunov(const Mat& m, const SymMat& n_rhs) {
  detail::require_square(m, "solve_lyapunov");
  detail::require(m.rows() == n_rhs.dim(), "solve_lyapunov: dimension mismatch");
  using CMat = Eigen::MatrixXcd;
  Eigen::ComplexSchur<Mat> schur(m);
  if (schur.info() != Eigen::Success) throw NumericalError("solve_lyapunov: Schur decomposition failed");
  const CMat& tri = schur.matrixT();
  const CMat& u = schur.matrixU();
  const Eigen::Index n = m.rows();
  // T Y + Y T^H = -U^H N U
  const CMat rhs = -(u.adjoint() * n_rhs.matrix().cast<std::complex<double>>() * u);
  CMat y = CMat::Zero(n, n);
  const double scale = std::max(tri.cwiseAbs().maxCoeff(), 1e-300);
  // Column j of Y T^H involves conj(T(j, k)) Y(:, k) for k >= j, so sweep j downwards.
  for (Eigen::Index j = n - 1; j >= 0; --j) {
    Eigen::VectorXcd c = rhs.col(j);
    for (Eigen::Index k = j + 1; k < n; ++k) c -= std::conj(tri(j, k)) * y.col(k);
    CMat lhs = tri;
    lhs.diagonal().array() += std::conj(tri(j, j));
    for (Eigen::Index i = 0; i < n; ++i)
      if (std::abs(lhs(i, i)) < 1e-14 * scale)
        throw NumericalError("solve_lyapunov: operator is singular (eigenvalues sum to zero)");
    y.col(j) = lhs.triangularView<Eigen::Upper>().solve(c);
  }
  const Mat x = (u * y * u.adjoint()).real();
  detail::require_finite(x, "solve_lyapunov");
  return SymMat(x);
}

}  // namespace kbflow
