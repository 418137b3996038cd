#pragma once

#include "kbflow/rng.hpp"
#include "kbflow/semigroup.hpp"

#include <cstdlib>
#include <exception>
#include <functional>
#include <iomanip>
#include <optional>
#include <thread>

namespace kbflow {

enum class Target { filter, diffusion };

inline const char* to_string(Target t) { return t == Target::filter ? "filter" : "diffusion"; }

// Euler-Maruyama grid: step k covers base noise steps
// [first + k*stride, first + (k+1)*stride).
struct EmGrid {
  double s = 0.0;
  double dt = 0.0;
  std::size_t steps = 0;
  std::uint32_t stride = 1;
  std::uint64_t first = 0;

  static EmGrid make(const NoiseBundle& noise, double s, double t_end, std::uint32_t stride = 1) {
    detail::require(stride >= 1, "EM grid: stride must be at least 1");
    detail::require(t_end >= s, "EM grid: end before start");
    EmGrid g;
    g.s = s;
    g.stride = stride;
    g.dt = noise.step() * stride;
    const double nsteps = (t_end - s) / g.dt;
    g.steps = static_cast<std::size_t>(std::llround(nsteps));
    detail::require(std::abs(nsteps - static_cast<double>(g.steps)) < 1e-6,
                    "EM grid: the step does not divide the simulated interval");
    const double first = s / noise.step();
    g.first = static_cast<std::uint64_t>(std::llround(first));
    detail::require(std::abs(first - static_cast<double>(g.first)) < 1e-6,
                    "EM grid: start time is not on the noise grid");
    return g;
  }

  double time(std::size_t k) const { return s + static_cast<double>(k) * dt; }

  std::size_t position(double t) const {
    const double p = (t - s) / dt;
    const auto k = static_cast<std::size_t>(std::llround(p));
    detail::require(p > -1e-9 && std::abs(p - static_cast<double>(k)) < 1e-6 && k <= steps,
                    "EM grid: time " + std::to_string(t) + " is not a grid node");
    return k;
  }
};

namespace detail {

// Flattened row-major coefficients, one block per EM step (or a single block
// for time-invariant data).
struct StepBlocks {
  int rows = 0, cols = 0;
  bool constant = true;
  std::vector<double> data;

  const double* at(std::size_t k) const {
    return data.data() + (constant ? 0 : k * static_cast<std::size_t>(rows * cols));
  }
  void push(const Mat& m) {
    rows = static_cast<int>(m.rows());
    cols = static_cast<int>(m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  }
};

// y += c * M x
inline void axpy_mv(const double* m, int rows, int cols, const double* x, double c, double* y) {
  for (int i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (int j = 0; j < cols; ++j) acc += m[i * cols + j] * x[j];
    y[i] += c * acc;
  }
}

struct SignalSchedule {
  int r1 = 0, r2 = 0;
  StepBlocks a, c, r1_sqrt, r2_sqrt;

  SignalSchedule(const SignalModel& model, const EmGrid& grid) : r1(model.r1()), r2(model.r2()) {
    const bool ti = model.time_invariant();
    a.constant = c.constant = ti;
    for (std::size_t k = 0; k < (ti ? 1 : grid.steps); ++k) {
      a.push(model.A(grid.time(k)));
      c.push(model.C(grid.time(k)));
    }
    r1_sqrt.push(model.R1_sqrt().matrix());
    r2_sqrt.push(model.R2_sqrt().matrix());
  }
};

// A - phi S, phi C' R2^{-1} and phi C' R2^{-1/2} along a Riccati trajectory.
struct GainSchedule {
  StepBlocks drift, gain, bar_gain;

  GainSchedule(const SignalModel& model, const RiccatiTrajectory& traj, const EmGrid& grid) {
    drift.constant = gain.constant = bar_gain.constant = false;
    const double t_last = grid.time(grid.steps);
    detail::require(traj.covers(grid.s) && traj.covers(t_last),
                    "simulation: Riccati trajectory does not cover the simulated interval");
    for (std::size_t k = 0; k < std::max<std::size_t>(grid.steps, 1); ++k) {
      const double t = grid.time(k);
      const Mat phi = traj.at(t).matrix();
      const Mat c = model.C(t);
      drift.push(model.A(t) - phi * model.S(t).matrix());
      gain.push(phi * c.transpose() * model.R2_inv().matrix());
      bar_gain.push(phi * c.transpose() * model.R2_inv_sqrt().matrix());
    }
  }
};

}  // namespace detail

// One replica of the coupled system: a signal, filters driven by the same
// observations, and diffusion members each with their own independent noise.
class CoupledKernel {
 public:
  struct Member {
    std::size_t lane;      // index into the gain schedules
    std::uint32_t member;  // noise address of the member's own streams
  };

  CoupledKernel(const SignalModel& model, const NoiseBundle& noise, EmGrid grid, std::vector<const RiccatiTrajectory*> lanes)
      : noise_(noise), grid_(grid), signal_(model, grid) {
    for (const RiccatiTrajectory* tr : lanes) gains_.emplace_back(model, *tr, grid_);
  }

  const EmGrid& grid() const { return grid_; }
  int r1() const { return signal_.r1; }
  int r2() const { return signal_.r2; }

  // State layout: x[r1], filters[n_lanes * r1], members[n_members * r1].
  // `observe(k, x, filters, members, dy)` runs at every record position k
  // (ascending, in [0, steps]); dy is the increment of step k-1 (empty at k=0).
  template <class Observe>
  void run(std::uint32_t replica, std::vector<double>& x, std::vector<double>& filters,
           const std::vector<Member>& members, std::vector<double>& mstate, const std::vector<std::size_t>& record,
           Observe&& observe) const {
    const int r1 = signal_.r1, r2 = signal_.r2;
    const double dt = grid_.dt;
    const std::size_t n_filters = gains_.size();
    std::vector<double> dw(r1), dv(r2), dy(r2, 0.0), xn(r1), tmp(r1), dwb(r1), dvb(r2);
    std::size_t next = 0;
    auto emit = [&](std::size_t k) {
      while (next < record.size() && record[next] == k) {
        for (double v : x)
          if (!std::isfinite(v))
            throw NumericalError("simulation blew up at t = " + std::to_string(grid_.time(k)));
        observe(k, x, filters, mstate, dy);
        ++next;
      }
    };
    emit(0);
    for (std::size_t k = 0; k < grid_.steps && next < record.size(); ++k) {
      const std::uint64_t base = grid_.first + k * grid_.stride;
      for (int i = 0; i < r1; ++i) dw[i] = noise_.increment(Stream::W, replica, 0, base, grid_.stride, i);
      for (int i = 0; i < r2; ++i) dv[i] = noise_.increment(Stream::V, replica, 0, base, grid_.stride, i);
      std::fill(dy.begin(), dy.end(), 0.0);
      detail::axpy_mv(signal_.c.at(k), r2, r1, x.data(), dt, dy.data());
      detail::axpy_mv(signal_.r2_sqrt.at(0), r2, r2, dv.data(), 1.0, dy.data());

      xn = x;
      detail::axpy_mv(signal_.a.at(k), r1, r1, x.data(), dt, xn.data());
      detail::axpy_mv(signal_.r1_sqrt.at(0), r1, r1, dw.data(), 1.0, xn.data());

      for (std::size_t f = 0; f < n_filters; ++f) {
        double* p = filters.data() + f * r1;
        std::copy(p, p + r1, tmp.begin());
        detail::axpy_mv(gains_[f].drift.at(k), r1, r1, tmp.data(), dt, p);
        detail::axpy_mv(gains_[f].gain.at(k), r1, r2, dy.data(), 1.0, p);
      }
      for (std::size_t m = 0; m < members.size(); ++m) {
        const auto& g = gains_[members[m].lane];
        double* p = mstate.data() + m * r1;
        for (int i = 0; i < r1; ++i)
          dwb[i] = noise_.increment(Stream::W_bar, replica, members[m].member, base, grid_.stride, i);
        for (int i = 0; i < r2; ++i)
          dvb[i] = noise_.increment(Stream::V_bar, replica, members[m].member, base, grid_.stride, i);
        std::copy(p, p + r1, tmp.begin());
        detail::axpy_mv(g.drift.at(k), r1, r1, tmp.data(), dt, p);
        detail::axpy_mv(g.gain.at(k), r1, r2, dy.data(), 1.0, p);
        detail::axpy_mv(signal_.r1_sqrt.at(0), r1, r1, dwb.data(), 1.0, p);
        detail::axpy_mv(g.bar_gain.at(k), r1, r2, dvb.data(), -1.0, p);
      }
      x.swap(xn);
      emit(k + 1);
    }
  }

 private:
  const NoiseBundle& noise_;
  EmGrid grid_;
  detail::SignalSchedule signal_;
  std::vector<detail::GainSchedule> gains_;
};

// Replicas are processed in fixed blocks whose partial sums are combined in
// block order, so results do not depend on the number of threads.
namespace detail {

inline unsigned worker_count() {
  if (const char* env = std::getenv("KBFLOW_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

template <class BlockFn>
std::vector<std::vector<double>> run_blocks(std::size_t n_items, std::size_t block, BlockFn&& fn) {
  const std::size_t n_blocks = (n_items + block - 1) / block;
  std::vector<std::vector<double>> out(n_blocks);
  std::vector<std::exception_ptr> errors(n_blocks);
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(worker_count(), n_blocks));
  auto work = [&](unsigned w) {
    for (std::size_t b = w; b < n_blocks; b += workers) {
      try {
        out[b] = fn(b * block, std::min(n_items, (b + 1) * block));
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline std::vector<double> sum_blocks(const std::vector<std::vector<double>>& parts) {
  std::vector<double> total(parts.empty() ? 0 : parts.front().size(), 0.0);
  for (const auto& p : parts)
    for (std::size_t i = 0; i < p.size(); ++i) total[i] += p[i];
  return total;
}

constexpr std::size_t kReplicaBlock = 256;

inline double vnorm2(const double* a, const double* b, const double* c, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - (c ? c[i] : 0.0);
    s += d * d;
  }
  return s;
}

}  // namespace detail

struct SeriesRow {
  double t = 0.0;
  double value = 0.0;
  double bound = 0.0;
  double slack = 0.0;   // Monte Carlo allowance
  double margin = 0.0;  // bound + slack - value
  bool pass = false;
};

struct CheckSeries {
  std::string name;
  std::string statement;
  std::string tolerance;
  std::vector<SeriesRow> rows;
  std::uint64_t seed = 0;
  double step = 0.0;
  std::size_t n_mc = 0;

  bool pass() const {
    return std::all_of(rows.begin(), rows.end(), [](const SeriesRow& r) { return r.pass; });
  }
  double worst_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& r : rows) m = std::min(m, r.margin);
    return m;
  }
  void add(double t, double value, double bound, double slack) {
    const double margin = bound + slack - value;
    rows.push_back({t, value, bound, slack, margin, margin >= 0.0});
  }
  void write_csv(std::ostream& os) const {
    os << "t,value,bound,margin\n" << std::setprecision(17);
    for (const auto& r : rows) os << r.t << ',' << r.value << ',' << r.bound << ',' << r.margin << '\n';
  }
};

// Monte Carlo setup conditioned on a fixed X_s.
struct McSetup {
  double s = 0.0;
  Vec x_signal;                // X_s
  Vec x;                       // filter initial state
  std::vector<double> t_grid;  // record times, ascending, on the EM grid
  std::size_t n_mc = 10000;
  std::uint32_t stride = 1;
};

namespace detail {

inline std::vector<std::size_t> record_positions(const EmGrid& g, const std::vector<double>& ts) {
  std::vector<std::size_t> out;
  for (double t : ts) out.push_back(g.position(t));
  detail::require(std::is_sorted(out.begin(), out.end()), "t_grid must be ascending");
  return out;
}

inline void check_setup(const SignalModel& model, const McSetup& setup) {
  detail::require(setup.x_signal.size() == model.r1() && setup.x.size() == model.r1(),
                  "Monte Carlo setup: state dimension mismatch");
  detail::require(!setup.t_grid.empty(), "Monte Carlo setup: empty t_grid");
  detail::require(setup.t_grid.front() >= setup.s, "Monte Carlo setup: t_grid starts before s");
  detail::require(setup.n_mc >= 2, "Monte Carlo setup: n_mc must be at least 2");
}

inline double stderr_of_mean(double sum, double sum_sq, double n) {
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq / n - mean * mean) * n / (n - 1.0));
  return std::sqrt(var / n);
}

}  // namespace detail

// ||E(psi_t - X_t | X_s)|| against alpha_safe e^{-beta (t-s)} ||x - X_s||.
inline CheckSeries conditional_bias(const SignalModel& model, const RiccatiTrajectory& traj, const McSetup& setup,
                                    const NoiseBundle& noise, double alpha_safe, double beta) {
  detail::check_setup(model, setup);
  const EmGrid grid = EmGrid::make(noise, setup.s, setup.t_grid.back(), setup.stride);
  const CoupledKernel kernel(model, noise, grid, {&traj});
  const auto record = detail::record_positions(grid, setup.t_grid);
  const int r1 = model.r1();
  const std::size_t nt = record.size();
  // per t: r1 sums of the error, r1 sums of squares
  const auto parts = detail::run_blocks(setup.n_mc, detail::kReplicaBlock, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(nt * 2 * r1, 0.0);
    std::vector<double> x, filt, mstate;
    for (std::size_t rep = lo; rep < hi; ++rep) {
      x.assign(setup.x_signal.data(), setup.x_signal.data() + r1);
      filt.assign(setup.x.data(), setup.x.data() + r1);
      std::size_t j = 0;
      kernel.run(static_cast<std::uint32_t>(rep), x, filt, {}, mstate, record,
                 [&](std::size_t, const auto& xs, const auto& fs, const auto&, const auto&) {
                   for (int i = 0; i < r1; ++i) {
                     const double e = fs[i] - xs[i];
                     acc[(j * 2) * r1 + i] += e;
                     acc[(j * 2 + 1) * r1 + i] += e * e;
                   }
                   ++j;
                 });
    }
    return acc;
  });
  const auto tot = detail::sum_blocks(parts);
  CheckSeries out;
  out.name = "conditional_bias";
  out.statement = "||E(psi_t - X_t | X_s)|| <= alpha_safe exp(-beta (t - s)) ||x - X_s||";
  out.tolerance = "3 standard errors";
  out.seed = noise.seed();
  out.step = grid.dt;
  out.n_mc = setup.n_mc;
  const double n = static_cast<double>(setup.n_mc);
  const double dist0 = (setup.x - setup.x_signal).norm();
  for (std::size_t j = 0; j < nt; ++j) {
    double norm2 = 0.0, var = 0.0;
    for (int i = 0; i < r1; ++i) {
      const double sum = tot[(j * 2) * r1 + i], sq = tot[(j * 2 + 1) * r1 + i];
      norm2 += (sum / n) * (sum / n);
      const double se = detail::stderr_of_mean(sum, sq, n);
      var += se * se;
    }
    const double t = setup.t_grid[j];
    out.add(t, std::sqrt(norm2), alpha_safe * std::exp(-beta * (t - setup.s)) * dist0, 3.0 * std::sqrt(var));
  }
  return out;
}

// (e^2 / sqrt 2) [1/2 + delta + sqrt(delta)] sigma^2
inline double event_threshold(double delta, double sigma_q) {
  detail::require(delta >= 0.0 && sigma_q > 0.0, "event_threshold: requires delta >= 0 and sigma > 0");
  return std::exp(2.0) / std::sqrt(2.0) * (0.5 + delta + std::sqrt(delta)) * sigma_q * sigma_q;
}

struct EventCheckResult {
  double t = 0.0;
  double delta = 0.0;
  double threshold = 0.0;
  double violation_rate = 0.0;
  std::size_t n_samples = 0;
  double bound = 0.0;  // e^{-delta}
  double slack = 0.0;  // 3 binomial standard deviations
  Target target = Target::filter;
  std::uint64_t seed = 0;
  double step = 0.0;
  bool pass = false;
};

namespace detail {

// Deviation N_t = psi_t - X_t - E_{t|s}(Q)(x - X_s) for a filter or one
// diffusion member per replica, evaluated at the record times; `use` is
// called once per (replica, record index) with ||N_t||.
template <class Use>
std::vector<std::vector<double>> deviation_blocks(const SignalModel& model, const RiccatiTrajectory& traj,
                                                  const McSetup& setup, const NoiseBundle& noise, Target target,
                                                  std::size_t acc_size, Use&& use) {
  check_setup(model, setup);
  const EmGrid grid = EmGrid::make(noise, setup.s, setup.t_grid.back(), setup.stride);
  const CoupledKernel kernel(model, noise, grid, {&traj});
  const auto record = record_positions(grid, setup.t_grid);
  const int r1 = model.r1();
  const SemigroupPath path(model, traj);
  const auto semis = path.sweep(setup.s, setup.t_grid);
  std::vector<Vec> centre;
  for (const Mat& e : semis) centre.push_back(e * (setup.x - setup.x_signal));
  const bool diffusion = target == Target::diffusion;
  const std::vector<CoupledKernel::Member> members =
      diffusion ? std::vector<CoupledKernel::Member>{{0, 0}} : std::vector<CoupledKernel::Member>{};
  return run_blocks(setup.n_mc, kReplicaBlock, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(acc_size, 0.0);
    std::vector<double> x, filt, mstate;
    for (std::size_t rep = lo; rep < hi; ++rep) {
      x.assign(setup.x_signal.data(), setup.x_signal.data() + r1);
      filt.assign(setup.x.data(), setup.x.data() + r1);
      if (diffusion) mstate = filt;
      std::size_t j = 0;
      kernel.run(static_cast<std::uint32_t>(rep), x, filt, members, mstate, record,
                 [&](std::size_t, const auto& xs, const auto& fs, const auto& ms, const auto&) {
                   const double* est = diffusion ? ms.data() : fs.data();
                   use(acc, j, std::sqrt(vnorm2(est, xs.data(), centre[j].data(), r1)));
                   ++j;
                 });
    }
    return acc;
  });
}

}  // namespace detail

// Violation rates of ||N_t|| > threshold(delta) for every (t, delta) pair.
inline std::vector<EventCheckResult> verify_event_probability(const SignalModel& model, const RiccatiTrajectory& traj,
                                                              double sigma_q, const McSetup& setup,
                                                              const std::vector<double>& deltas,
                                                              const NoiseBundle& noise, Target target) {
  const std::size_t nd = deltas.size(), nt = setup.t_grid.size();
  std::vector<double> thresholds;
  const double inflate = target == Target::diffusion ? 2.0 : 1.0;  // sqrt(2) e^2 versus e^2 / sqrt(2)
  for (double d : deltas) thresholds.push_back(inflate * event_threshold(d, sigma_q));
  const auto parts = detail::deviation_blocks(model, traj, setup, noise, target, nt * nd,
                                              [&](std::vector<double>& acc, std::size_t j, double norm) {
                                                for (std::size_t d = 0; d < nd; ++d)
                                                  if (norm > thresholds[d]) acc[j * nd + d] += 1.0;
                                              });
  const auto tot = detail::sum_blocks(parts);
  std::vector<EventCheckResult> out;
  const double n = static_cast<double>(setup.n_mc);
  for (std::size_t j = 0; j < nt; ++j)
    for (std::size_t d = 0; d < nd; ++d) {
      EventCheckResult r;
      r.t = setup.t_grid[j];
      r.delta = deltas[d];
      r.threshold = thresholds[d];
      r.n_samples = setup.n_mc;
      r.violation_rate = tot[j * nd + d] / n;
      r.bound = std::exp(-deltas[d]);
      r.slack = 3.0 * std::sqrt(r.bound * (1.0 - r.bound) / n);
      r.target = target;
      r.seed = noise.seed();
      r.step = noise.step() * setup.stride;
      r.pass = r.violation_rate <= r.bound + r.slack;
      out.push_back(r);
    }
  return out;
}

// E(||N_t||^{2n})^{1/n} against n sigma^2 (filter) or 2 n sigma^2 (diffusion).
inline std::vector<CheckSeries> moment_bound_check(const SignalModel& model, const RiccatiTrajectory& traj,
                                                   double sigma_q, const McSetup& setup,
                                                   const std::vector<int>& orders, const NoiseBundle& noise,
                                                   Target target) {
  for (int n : orders) detail::require(n >= 1 && n <= 3, "moment_bound_check: orders must be in {1, 2, 3}");
  const std::size_t no = orders.size(), nt = setup.t_grid.size();
  const auto parts = detail::deviation_blocks(model, traj, setup, noise, target, nt * no * 2,
                                              [&](std::vector<double>& acc, std::size_t j, double norm) {
                                                for (std::size_t o = 0; o < no; ++o) {
                                                  const double v = std::pow(norm, 2.0 * orders[o]);
                                                  acc[(j * no + o) * 2] += v;
                                                  acc[(j * no + o) * 2 + 1] += v * v;
                                                }
                                              });
  const auto tot = detail::sum_blocks(parts);
  const double nmc = static_cast<double>(setup.n_mc);
  std::vector<CheckSeries> out;
  for (std::size_t o = 0; o < no; ++o) {
    const int n = orders[o];
    CheckSeries cs;
    cs.name = std::string("moment_") + to_string(target) + "_n" + std::to_string(n);
    cs.statement = std::string("E(||N_t||^{2n} | X_s)^{1/n} <= ") + (target == Target::filter ? "n" : "2n") +
                   " sigma(Q)^2";
    cs.tolerance = "3 standard errors on the raw moment";
    cs.seed = noise.seed();
    cs.step = noise.step() * setup.stride;
    cs.n_mc = setup.n_mc;
    const double bound = (target == Target::filter ? 1.0 : 2.0) * n * sigma_q * sigma_q;
    for (std::size_t j = 0; j < nt; ++j) {
      const double sum = tot[(j * no + o) * 2], sq = tot[(j * no + o) * 2 + 1];
      const double mean = sum / nmc;
      const double se = detail::stderr_of_mean(sum, sq, nmc);
      const double value = std::pow(mean, 1.0 / n);
      cs.add(setup.t_grid[j], value, bound, std::pow(mean + 3.0 * se, 1.0 / n) - value);
    }
    out.push_back(std::move(cs));
  }
  return out;
}

struct ContractionInputs {
  Vec x1, x2;
  SymMat q1, q2;
};

// E(||psi(x1,Q1) - psi(x2,Q2)||^{2n})^{1/(2n)} against the displayed
// right-hand side; both processes share every noise source.
inline std::vector<CheckSeries> contraction_check(const SignalModel& model, const RiccatiTrajectory& traj1,
                                                  const RiccatiTrajectory& traj2, const StabilityConstants& k,
                                                  const ContractionInputs& in, const McSetup& setup,
                                                  const std::vector<int>& orders, const NoiseBundle& noise,
                                                  Target target) {
  detail::check_setup(model, setup);
  detail::require(in.x1.size() == model.r1() && in.x2.size() == model.r1(), "contraction_check: dimension mismatch");
  const EmGrid grid = EmGrid::make(noise, setup.s, setup.t_grid.back(), setup.stride);
  const CoupledKernel kernel(model, noise, grid, {&traj1, &traj2});
  const auto record = detail::record_positions(grid, setup.t_grid);
  const int r1 = model.r1();
  const bool diffusion = target == Target::diffusion;
  const std::size_t no = orders.size(), nt = record.size();
  std::vector<CoupledKernel::Member> members;
  if (diffusion) members = {{0, 0}, {1, 0}};
  const auto parts = detail::run_blocks(setup.n_mc, detail::kReplicaBlock, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(nt * no * 2, 0.0);
    std::vector<double> x, filt, mstate;
    for (std::size_t rep = lo; rep < hi; ++rep) {
      x.assign(setup.x_signal.data(), setup.x_signal.data() + r1);
      filt.assign(in.x1.data(), in.x1.data() + r1);
      filt.insert(filt.end(), in.x2.data(), in.x2.data() + r1);
      if (diffusion) mstate = filt;
      std::size_t j = 0;
      kernel.run(static_cast<std::uint32_t>(rep), x, filt, members, mstate, record,
                 [&](std::size_t, const auto&, const auto& fs, const auto& ms, const auto&) {
                   const double* p = diffusion ? ms.data() : fs.data();
                   const double d = std::sqrt(detail::vnorm2(p, p + r1, nullptr, r1));
                   for (std::size_t o = 0; o < no; ++o) {
                     const double v = std::pow(d, 2.0 * orders[o]);
                     acc[(j * no + o) * 2] += v;
                     acc[(j * no + o) * 2 + 1] += v * v;
                   }
                   ++j;
                 });
    }
    return acc;
  });
  const auto tot = detail::sum_blocks(parts);
  const double nmc = static_cast<double>(setup.n_mc);
  const double dx = (in.x1 - in.x2).norm();
  const double dq = (in.q1 - in.q2).norm();
  const double dx2 = (in.x2 - setup.x_signal).norm();
  const double ke = k.kappa_E(in.q1);
  const double c0 = dq > 0.0 ? k.chi0(in.q1, in.q2) : 0.0;
  const double c1 = dq > 0.0 ? k.chi1(in.q2) : 0.0;
  const double c2 = dq > 0.0 ? k.chi2(in.q1) : 0.0;
  std::vector<CheckSeries> out;
  for (std::size_t o = 0; o < no; ++o) {
    const int n = orders[o];
    CheckSeries cs;
    cs.name = std::string("contraction_") + to_string(target) + "_n" + std::to_string(n);
    cs.statement = "E(||psi(x1,Q1) - psi(x2,Q2)||^{2n} | X_s)^{1/(2n)} <= kappa_E(Q1) e^{-nu(t-s)} ||x1 - x2|| + " +
                   std::string(diffusion ? "sqrt(2) " : "") +
                   "e^{-nu(t-s)} chi0 (chi1(Q2) ||x2 - X_s|| + sqrt(n) chi2(Q1)) ||Q1 - Q2||";
    cs.tolerance = "3 standard errors on the raw moment";
    cs.seed = noise.seed();
    cs.step = grid.dt;
    cs.n_mc = setup.n_mc;
    for (std::size_t j = 0; j < nt; ++j) {
      const double t = setup.t_grid[j];
      const double decay = std::exp(-k.nu * (t - setup.s));
      double second = dq > 0.0 ? decay * c0 * (c1 * dx2 + std::sqrt(static_cast<double>(n)) * c2) * dq : 0.0;
      if (diffusion) second *= std::sqrt(2.0);
      const double bound = ke * decay * dx + second;
      const double sum = tot[(j * no + o) * 2], sq = tot[(j * no + o) * 2 + 1];
      const double mean = sum / nmc;
      const double se = detail::stderr_of_mean(sum, sq, nmc);
      const double value = std::pow(mean, 0.5 / n);
      cs.add(t, value, bound, std::pow(mean + 3.0 * se, 0.5 / n) - value);
    }
    out.push_back(std::move(cs));
  }
  return out;
}

enum class InitialLaw { dirac, gaussian, uniform };

struct CoupledPathBundle {
  std::vector<double> times;
  std::vector<Vec> X;
  std::vector<Vec> dY;  // dY[k] is the increment over [times[k-1], times[k]]; dY[0] = 0
  std::vector<Vec> psi;
  std::vector<std::vector<Vec>> psi_bar;  // [member][time]
  double s = 0.0;
  double step = 0.0;
  std::uint64_t seed = 0;

  void write_csv(std::ostream& os) const {
    const Eigen::Index r1 = X.front().size(), r2 = dY.front().size();
    os << "t";
    for (Eigen::Index i = 0; i < r1; ++i) os << ",X" << i;
    for (Eigen::Index i = 0; i < r2; ++i) os << ",dY" << i;
    for (Eigen::Index i = 0; i < r1; ++i) os << ",psi" << i;
    for (std::size_t m = 0; m < psi_bar.size(); ++m)
      for (Eigen::Index i = 0; i < r1; ++i) os << ",psibar" << m << '_' << i;
    os << '\n' << std::setprecision(17);
    for (std::size_t k = 0; k < times.size(); ++k) {
      os << times[k];
      for (Eigen::Index i = 0; i < r1; ++i) os << ',' << X[k](i);
      for (Eigen::Index i = 0; i < r2; ++i) os << ',' << dY[k](i);
      for (Eigen::Index i = 0; i < r1; ++i) os << ',' << psi[k](i);
      for (const auto& path : psi_bar)
        for (Eigen::Index i = 0; i < r1; ++i) os << ',' << path[k](i);
      os << '\n';
    }
  }
};

namespace detail {

// Member initial states: x plus Q^{1/2} times a unit-covariance draw.
inline std::vector<double> initial_members(const NoiseBundle& noise, std::uint32_t replica, const Vec& x,
                                           const SymMat& q, std::size_t n_members, InitialLaw law) {
  const int r1 = static_cast<int>(x.size());
  std::vector<double> out(n_members * r1);
  const Mat root = sym_sqrt(q).matrix();
  Vec xi(r1);
  for (std::size_t m = 0; m < n_members; ++m) {
    for (int i = 0; i < r1; ++i) {
      const auto mid = static_cast<std::uint32_t>(m);
      switch (law) {
        case InitialLaw::dirac: xi(i) = 0.0; break;
        case InitialLaw::gaussian: xi(i) = noise.normal(Stream::initial, replica, mid, 0, i); break;
        case InitialLaw::uniform:
          xi(i) = noise.zero_noise() ? 0.0 : std::sqrt(3.0) * (2.0 * noise.uniform(Stream::initial, replica, mid, 0, i) - 1.0);
          break;
      }
    }
    const Vec v = x + root * xi;
    std::copy(v.data(), v.data() + r1, out.begin() + m * r1);
  }
  return out;
}

}  // namespace detail

struct SimulationOptions {
  std::uint32_t replica = 0;
  std::uint32_t stride = 1;
  std::size_t record_every = 1;
  InitialLaw initial_law = InitialLaw::dirac;
};

// One realization of signal, observations, filter and diffusion ensemble on
// [s, t_end], s defaulting to traj.start(). Members start from N(x_filter, phi_s).
inline CoupledPathBundle simulate_coupled(const SignalModel& model, const RiccatiTrajectory& traj, const Vec& x_signal,
                                          const Vec& x_filter, const NoiseBundle& noise, std::size_t n_ensemble,
                                          double t_end, const SimulationOptions& opts = {},
                                          std::optional<double> start = std::nullopt) {
  detail::require(x_signal.size() == model.r1() && x_filter.size() == model.r1(), "simulate: dimension mismatch");
  detail::require(opts.record_every >= 1, "simulate: record_every must be positive");
  const double s0 = start.value_or(traj.start());
  const EmGrid grid = EmGrid::make(noise, s0, t_end, opts.stride);
  const CoupledKernel kernel(model, noise, grid, {&traj});
  const int r1 = model.r1(), r2 = model.r2();
  std::vector<std::size_t> record;
  for (std::size_t k = 0; k <= grid.steps; k += opts.record_every) record.push_back(k);
  if (record.back() != grid.steps) record.push_back(grid.steps);

  std::vector<CoupledKernel::Member> members;
  for (std::size_t m = 0; m < n_ensemble; ++m) members.push_back({0, static_cast<std::uint32_t>(m)});
  std::vector<double> x(x_signal.data(), x_signal.data() + r1);
  std::vector<double> filt(x_filter.data(), x_filter.data() + r1);
  std::vector<double> mstate =
      detail::initial_members(noise, opts.replica, x_filter, traj.at(s0), n_ensemble, opts.initial_law);

  CoupledPathBundle b;
  b.s = grid.s;
  b.step = grid.dt;
  b.seed = noise.seed();
  b.psi_bar.resize(n_ensemble);
  Vec y_acc = Vec::Zero(r2);
  std::size_t last = 0;
  // dY is accumulated between record points.
  std::vector<std::size_t> every(grid.steps + 1);
  for (std::size_t k = 0; k <= grid.steps; ++k) every[k] = k;
  kernel.run(opts.replica, x, filt, members, mstate, every,
             [&](std::size_t k, const auto& xs, const auto& fs, const auto& ms, const auto& dy) {
               if (k > 0)
                 for (int i = 0; i < r2; ++i) y_acc(i) += dy[i];
               if (last < record.size() && record[last] == k) {
                 b.times.push_back(grid.time(k));
                 b.X.push_back(Eigen::Map<const Vec>(xs.data(), r1));
                 b.dY.push_back(y_acc);
                 b.psi.push_back(Eigen::Map<const Vec>(fs.data(), r1));
                 for (std::size_t m = 0; m < n_ensemble; ++m)
                   b.psi_bar[m].push_back(Eigen::Map<const Vec>(ms.data() + m * r1, r1));
                 y_acc.setZero();
                 ++last;
               }
             });
  return b;
}

struct EnsembleResult {
  std::vector<std::size_t> sizes;
  std::vector<double> mean_error;  // RMS over repetitions of ||ensemble mean - psi_t||
  std::vector<double> cov_error;   // RMS over repetitions of ||ensemble cov - phi_t(Q)||_F
  double mean_exponent = 0.0;      // fitted e in error ~ n^{-e}
  double cov_exponent = 0.0;
  double t = 0.0;
  std::size_t repetitions = 0;
};

namespace detail {

inline double log_log_slope(const std::vector<std::size_t>& n, const std::vector<double>& err) {
  double mx = 0.0, my = 0.0;
  const double k = static_cast<double>(n.size());
  for (std::size_t i = 0; i < n.size(); ++i) {
    mx += std::log(static_cast<double>(n[i]));
    my += std::log(err[i]);
  }
  mx /= k;
  my /= k;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double dx = std::log(static_cast<double>(n[i])) - mx;
    sxy += dx * (std::log(err[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace detail

// Ensemble statistics of the diffusion against the filter and the Riccati
// flow at time t. Smaller ensembles are prefixes of the largest one; each
// repetition uses a fresh signal and observation path.
inline EnsembleResult ensemble_consistency(const SignalModel& model, const RiccatiTrajectory& traj, const Vec& x_signal,
                                           const Vec& x, double t, std::vector<std::size_t> sizes,
                                           std::size_t repetitions, const NoiseBundle& noise, InitialLaw law) {
  detail::require(!sizes.empty() && repetitions >= 1, "ensemble_consistency: empty configuration");
  std::sort(sizes.begin(), sizes.end());
  detail::require(sizes.front() >= 2, "ensemble_consistency: ensembles need at least two members");
  const EmGrid grid = EmGrid::make(noise, traj.start(), t, 1);
  const CoupledKernel kernel(model, noise, grid, {&traj});
  const int r1 = model.r1();
  const std::size_t nmax = sizes.back(), ns = sizes.size();
  std::vector<CoupledKernel::Member> members;
  for (std::size_t m = 0; m < nmax; ++m) members.push_back({0, static_cast<std::uint32_t>(m)});
  const Mat phi = traj.at(t).matrix();
  const auto parts = detail::run_blocks(repetitions, 1, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(ns * 2, 0.0);
    for (std::size_t rep = lo; rep < hi; ++rep) {
      const auto replica = static_cast<std::uint32_t>(rep);
      std::vector<double> xs(x_signal.data(), x_signal.data() + r1), filt(x.data(), x.data() + r1);
      std::vector<double> mstate = detail::initial_members(noise, replica, x, traj.initial(), nmax, law);
      kernel.run(replica, xs, filt, members, mstate, {grid.steps},
                 [&](std::size_t, const auto&, const auto& fs, const auto& ms, const auto&) {
                   const Eigen::Map<const Vec> psi(fs.data(), r1);
                   for (std::size_t si = 0; si < ns; ++si) {
                     const std::size_t n = sizes[si];
                     const Eigen::Map<const Mat> cloud(ms.data(), r1, static_cast<Eigen::Index>(n));
                     const Vec mean = cloud.rowwise().mean();
                     const Mat centred = cloud.colwise() - mean;
                     const Mat cov = centred * centred.transpose() / static_cast<double>(n - 1);
                     acc[si * 2] += (mean - psi).squaredNorm();
                     acc[si * 2 + 1] += (cov - phi).squaredNorm();
                   }
                 });
    }
    return acc;
  });
  const auto tot = detail::sum_blocks(parts);
  EnsembleResult res;
  res.sizes = sizes;
  res.t = t;
  res.repetitions = repetitions;
  for (std::size_t si = 0; si < ns; ++si) {
    res.mean_error.push_back(std::sqrt(tot[si * 2] / repetitions));
    res.cov_error.push_back(std::sqrt(tot[si * 2 + 1] / repetitions));
  }
  res.mean_exponent = -detail::log_log_slope(sizes, res.mean_error);
  res.cov_exponent = -detail::log_log_slope(sizes, res.cov_error);
  return res;
}

}  // namespace kbflow
