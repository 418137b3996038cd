#pragma once

#include "kbflow/matrix_core.hpp"

namespace kbflow {

struct ModelSnapshot {
  double t = 0.0;
  Mat A;
  Mat C;
  SymMat S;
};

// dX = A_t X dt + R1^{1/2} dW,  dY = C_t X dt + R2^{1/2} dV.
class SignalModel {
 public:
  SignalModel(int r1, int r2, MatrixFlow a, MatrixFlow c, const SymMat& r1_cov, const SymMat& r2_cov)
      : r1_(r1), r2_(r2), a_(std::move(a)), c_(std::move(c)) {
    detail::require(r1 > 0 && r2 > 0, "build_model: dimensions must be positive");
    detail::require(a_.rows() == r1 && a_.cols() == r1, "build_model: A must be r1 x r1");
    detail::require(c_.rows() == r2 && c_.cols() == r1, "build_model: C must be r2 x r1");
    detail::require(r1_cov.dim() == r1, "build_model: R1 must be r1 x r1");
    detail::require(r2_cov.dim() == r2, "build_model: R2 must be r2 x r2");
    r1_cov_ = certify_spd(r1_cov, "R1");
    r2_cov_ = certify_spd(r2_cov, "R2");
    r1_sqrt_ = sym_sqrt(r1_cov_.sym());
    r2_sqrt_ = sym_sqrt(r2_cov_.sym());
    r2_inv_ = r2_cov_.inverse();
    r2_inv_sqrt_ = sym_inv_sqrt(r2_cov_.sym());
    if (c_.is_constant()) s_const_ = SymMat(c_(0.0).transpose() * r2_inv_.matrix() * c_(0.0));
  }

  int r1() const { return r1_; }
  int r2() const { return r2_; }
  bool time_invariant() const { return a_.is_constant() && c_.is_constant(); }

  const MatrixFlow& A_flow() const { return a_; }
  const MatrixFlow& C_flow() const { return c_; }
  Mat A(double t) const { return a_(t); }
  Mat C(double t) const { return c_(t); }
  SymMat S(double t) const {
    if (s_const_) return *s_const_;
    const Mat c = c_(t);
    return SymMat(c.transpose() * r2_inv_.matrix() * c);
  }

  const SpdMat& R1() const { return r1_cov_; }
  const SpdMat& R2() const { return r2_cov_; }
  const SymMat& R1_sqrt() const { return r1_sqrt_; }
  const SymMat& R2_sqrt() const { return r2_sqrt_; }
  const SymMat& R2_inv() const { return r2_inv_; }
  const SymMat& R2_inv_sqrt() const { return r2_inv_sqrt_; }

  // Range on which the model can be evaluated (tabulated flows limit it).
  std::pair<double, double> domain() const {
    const auto da = a_.domain();
    const auto dc = c_.domain();
    return {std::max({0.0, da.first, dc.first}), std::min(da.second, dc.second)};
  }

  ModelSnapshot snapshot(double t) const {
    detail::require(t >= 0.0, "snapshot: t must be non-negative");
    return {t, A(t), C(t), S(t)};
  }

  // Grid check that A and C stay bounded and finite on [0, horizon].
  double sup_norm_A(double horizon, int n = 129) const { return a_.sup_norm(0.0, horizon, n); }
  double sup_norm_S(double horizon, int n = 129) const {
    if (s_const_) return s_const_->norm();
    double best = 0.0;
    for (int i = 0; i < n; ++i) best = std::max(best, S(horizon * i / std::max(n - 1, 1)).norm());
    return best;
  }
  double inf_lambda_min_S(double horizon, int n = 129) const {
    if (s_const_) return s_const_->lambda_min();
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) best = std::min(best, S(horizon * i / std::max(n - 1, 1)).lambda_min());
    return best;
  }

  // Copy of the model with different noise levels or sensor, used by the
  // parameter-monotonicity checks.
  SignalModel with_noise(const SymMat& r1_cov, const SymMat& r2_cov) const {
    return SignalModel(r1_, r2_, a_, c_, r1_cov, r2_cov);
  }

 private:
  static SpdMat certify_spd(const SymMat& m, const char* name) {
    SpdMat out;
    try {
      out = SpdMat::certify(m);
    } catch (const NumericalError&) {
      throw std::invalid_argument(std::string("build_model: ") + name + " is not positive definite");
    }
    if (!out.invertible()) throw std::invalid_argument(std::string("build_model: ") + name + " is singular");
    return out;
  }

  int r1_;
  int r2_;
  MatrixFlow a_;
  MatrixFlow c_;
  SpdMat r1_cov_;
  SpdMat r2_cov_;
  SymMat r1_sqrt_;
  SymMat r2_sqrt_;
  SymMat r2_inv_;
  SymMat r2_inv_sqrt_;
  std::optional<SymMat> s_const_;
};

inline SignalModel build_model(int r1, int r2, MatrixFlow a, MatrixFlow c, const SymMat& r1_cov,
                               const SymMat& r2_cov) {
  return SignalModel(r1, r2, std::move(a), std::move(c), r1_cov, r2_cov);
}

// Time-invariant convenience overload.
inline SignalModel build_model(const Mat& a, const Mat& c, const Mat& r1_cov, const Mat& r2_cov) {
  return SignalModel(static_cast<int>(a.rows()), static_cast<int>(c.rows()), MatrixFlow::constant(a),
                     MatrixFlow::constant(c), SymMat(r1_cov), SymMat(r2_cov));
}

// The scalar model A = 0, C = R1 = R2 = 1.
inline SignalModel scalar_reference_model() {
  const Mat one = Mat::Constant(1, 1, 1.0);
  return build_model(Mat::Zero(1, 1), one, one, one);
}

}  // namespace kbflow
