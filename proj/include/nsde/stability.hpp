#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nsde/brownian.hpp"
#include "nsde/dynamics.hpp"
#include "nsde/parallel.hpp"
#include "nsde/random.hpp"
#include "nsde/solver.hpp"

namespace nsde {

/// ||eps_t|| along a coupled pair of trajectories.
struct PerturbationTrace {
  std::vector<double> times;
  std::vector<double> eps_norms;
  std::vector<double> log_norms;
  bool overflowed = false;
  std::size_t overflow_step = 0;
};

/// Integrates h0 and h0 + eps0 on the same path and records the l2 norm of
/// their difference every `record_every` steps (and at T). Overflow ends the
/// trace early and is flagged rather than thrown.
inline PerturbationTrace perturbation_trace(const Dynamics& dyn, const Eigen::VectorXd& h0, const Eigen::VectorXd& eps0,
                                            const TimeGrid& grid, const BrownianPath& path,
                                            std::size_t record_every = 1) {
  if (eps0.size() != h0.size()) throw std::invalid_argument("perturbation_trace: perturbation dimension mismatch");
  if (record_every == 0) throw std::invalid_argument("perturbation_trace: record_every must be >= 1");
  PerturbationTrace trace;
  const Eigen::VectorXd h0_e = h0 + eps0;
  try {
    integrate_coupled_visit(dyn, h0, h0_e, grid, path,
                            [&](std::size_t k, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
                              if (k % record_every != 0 && k != grid.n_steps()) return;
                              const double norm = (b - a).norm();
                              trace.times.push_back(grid.time(k));
                              trace.eps_norms.push_back(norm);
                              trace.log_norms.push_back(std::log(norm));
                            });
  } catch (const NumericOverflow& e) {
    trace.overflowed = true;
    trace.overflow_step = e.step();
  }
  return trace;
}

/// Direct integration of the perturbation equation alongside the base path:
///   eps_{k+1} = eps_k + [f(h_k + eps_k) - f(h_k)] dt + [g(h_k + eps_k) - g(h_k)] (.) dB_k
/// Returns eps_k for every k = 0..N.
inline std::vector<Eigen::VectorXd> integrate_perturbation(const Dynamics& dyn, const Eigen::VectorXd& h0,
                                                           const Eigen::VectorXd& eps0, const TimeGrid& grid,
                                                           const BrownianPath& path) {
  detail::check_inputs(dyn, h0, grid, path);
  if (eps0.size() != h0.size()) throw std::invalid_argument("integrate_perturbation: perturbation dimension mismatch");
  StepWorkspace ws(dyn);
  Eigen::VectorXd h = h0, eps = eps0, next(h0.size());
  Eigen::VectorXd f_base, g_base, f_pert, g_pert;
  std::vector<Eigen::VectorXd> out{eps};
  out.reserve(grid.n_steps() + 1);
  const bool noisy = dyn.diffusion.kind != DiffusionKind::zero;
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    const double t = grid.time(k);
    const double dt = grid.dt();
    const auto dB = path.step(k);
    f_base = dyn.drift.forward(h, t, ws.drift);
    diffusion_eval(dyn.diffusion, h, t, &f_base, g_base);
    const Eigen::VectorXd shifted = h + eps;
    f_pert = dyn.drift.forward(shifted, t, ws.drift);
    diffusion_eval(dyn.diffusion, shifted, t, &f_pert, g_pert);
    if (noisy) {
      eps = eps + (f_pert - f_base) * dt + (g_pert - g_base).cwiseProduct(dB);
    } else {
      eps = eps + (f_pert - f_base) * dt;
    }
    em_update(dyn.diffusion.kind, h, f_base, g_base, dt, dB, next);
    h.swap(next);
    if (!h.allFinite() || !eps.allFinite()) throw NumericOverflow(k, "perturbation integration");
    out.push_back(eps);
  }
  return out;
}

/// Least-squares slope of y on t.
inline double ls_slope(std::span<const double> t, std::span<const double> y) {
  const auto n = static_cast<double>(t.size());
  double mt = 0.0, my = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    mt += t[i];
    my += y[i];
  }
  mt /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    sxy += (t[i] - mt) * (y[i] - my);
    sxx += (t[i] - mt) * (t[i] - mt);
  }
  return sxy / sxx;
}

struct FitWindow {
  double t_lo = 0.0;
  double t_hi = 0.0;
};

struct LyapunovEstimate {
  double lambda_hat = 0.0;
  double std_error = 0.0;
  FitWindow fit_window;
  std::size_t n_paths = 0;
  std::size_t n_overflowed = 0;
  bool overflow = false;  // every path overflowed; lambda_hat is +inf
};

struct LyapunovOptions {
  std::size_t n_paths = 64;
  std::optional<FitWindow> fit_window;  // default [0.2 T, T]
  std::size_t record_every = 1;
  Exec exec{};
};

/// Empirical top exponent of the perturbation: the least-squares slope of
/// log||eps_t|| over the fit window, averaged over paths (equal to the slope of
/// the path-mean log norm when no path overflows). Overflowed paths contribute
/// their pre-overflow samples when at least two fall inside the window; the
/// same applies to paths whose perturbation rounds to exactly zero.
inline LyapunovEstimate lyapunov_exponent(const Dynamics& dyn, const Eigen::VectorXd& h0, const Eigen::VectorXd& eps0,
                                          const TimeGrid& grid, const RandomStream& stream,
                                          const LyapunovOptions& opts = {}) {
  if (opts.n_paths == 0) throw std::invalid_argument("lyapunov_exponent: n_paths must be >= 1");
  const FitWindow window = opts.fit_window.value_or(FitWindow{0.2 * grid.t_end(), grid.t_end()});
  if (!(window.t_lo >= 0.0 && window.t_lo < window.t_hi && window.t_hi <= grid.t_end() + 1e-12)) {
    throw std::invalid_argument("lyapunov_exponent: fit window must lie inside [0, T]");
  }
  std::vector<std::optional<double>> slopes(opts.n_paths);
  std::vector<char> overflowed(opts.n_paths, 0);
  parallel_for(opts.n_paths, opts.exec, [&](std::size_t j) {
    const auto path = sample_brownian_path(stream.child(j), grid, dyn.noise_dim());
    const auto trace = perturbation_trace(dyn, h0, eps0, grid, path, opts.record_every);
    overflowed[j] = trace.overflowed ? 1 : 0;
    std::vector<double> t, y;
    for (std::size_t i = 0; i < trace.times.size(); ++i) {
      const double ti = trace.times[i];
      // a perturbation below the state's rounding resolution collapses to 0; stop there
      if (!std::isfinite(trace.log_norms[i])) break;
      if (ti + 1e-12 < window.t_lo || ti > window.t_hi + 1e-12) continue;
      t.push_back(ti);
      y.push_back(trace.log_norms[i]);
    }
    if (t.size() >= 2) slopes[j] = ls_slope(t, y);
  });
  LyapunovEstimate est;
  est.fit_window = window;
  est.n_paths = opts.n_paths;
  std::vector<double> usable;
  for (std::size_t j = 0; j < opts.n_paths; ++j) {
    est.n_overflowed += overflowed[j] ? 1u : 0u;
    if (slopes[j]) usable.push_back(*slopes[j]);
  }
  if (usable.empty()) {
    est.overflow = true;
    est.lambda_hat = std::numeric_limits<double>::infinity();
    est.std_error = std::numeric_limits<double>::quiet_NaN();
    return est;
  }
  double mean = 0.0;
  for (double s : usable) mean += s;
  mean /= static_cast<double>(usable.size());
  double var = 0.0;
  for (double s : usable) var += (s - mean) * (s - mean);
  est.lambda_hat = mean;
  est.std_error = usable.size() > 1 ? std::sqrt(var / static_cast<double>(usable.size() - 1) /
                                              static_cast<double>(usable.size()))
                                  : 0.0;
  return est;
}

/// x_t = x0 exp((a - sigma^2 / 2) t + sigma B_t) on the grid (Ito solution of dx = a x dt + sigma x dB).
inline Trajectory gbm_closed_form(double x0, double a, double sigma, const TimeGrid& grid, const BrownianPath& path) {
  if (path.dim() != 1) throw std::invalid_argument("gbm_closed_form: scalar path required");
  Trajectory traj;
  double b = 0.0;
  for (std::size_t k = 0; k <= grid.n_steps(); ++k) {
    if (k > 0) b += path.increments(static_cast<Eigen::Index>(k - 1), 0);
    const double t = grid.time(k);
    traj.times.push_back(t);
    traj.states.push_back(Eigen::VectorXd::Constant(1, x0 * std::exp((a - 0.5 * sigma * sigma) * t + sigma * b)));
  }
  return traj;
}

/// Lyapunov-function certificate with V = ||eps||^2 for multiplicative noise
/// and an L-Lipschitz drift.
struct StabilityCertificate {
  double p = 2.0;
  double c1 = 1.0;
  double c2 = 0.0;
  double c3 = 0.0;
  double bound = 0.0;  // upper bound on the a.s. exponent: -(c3 - 2 c2) / (2 p)
  bool stable = false; // bound < 0
};

inline StabilityCertificate corollary_bound(double lipschitz, double sigma) {
  if (!(lipschitz >= 0.0) || !(sigma >= 0.0)) throw std::invalid_argument("corollary_bound: L and sigma must be >= 0");
  StabilityCertificate c;
  c.c2 = 2.0 * lipschitz + sigma * sigma;
  c.c3 = 4.0 * sigma * sigma;
  c.bound = -(c.c3 - 2.0 * c.c2) / (2.0 * c.p);
  c.stable = c.c3 > 2.0 * c.c2;
  return c;
}

struct SweepRow {
  double sigma = 0.0;
  double lambda_hat = 0.0;
  double std_error = 0.0;
  double bound = 0.0;
  bool stable = false;
  double overflow_fraction = 0.0;
};

/// dynamics_for(sigma) builds the system for each sweep cell; lipschitz is the L used in the bound.
inline std::vector<SweepRow> stability_sweep(const std::function<Dynamics(double)>& dynamics_for,
                                             std::span<const double> sigmas, double lipschitz,
                                             const Eigen::VectorXd& h0, const Eigen::VectorXd& eps0,
                                             const TimeGrid& grid, const RandomStream& stream,
                                             const LyapunovOptions& opts = {}) {
  std::vector<SweepRow> rows(sigmas.size());
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    const double s = sigmas[i];
    // every cell reuses the same path family: differences across sigma are not path noise
    const auto est = lyapunov_exponent(dynamics_for(s), h0, eps0, grid, stream, opts);
    const auto cert = corollary_bound(lipschitz, s);
    rows[i] = SweepRow{s,          est.lambda_hat, est.std_error, cert.bound, cert.stable,
                       static_cast<double>(est.n_overflowed) / static_cast<double>(est.n_paths)};
  }
  return rows;
}

/// First sign change of lambda_hat (positive to non-positive) by linear interpolation.
inline std::optional<double> zero_crossing(std::span<const SweepRow> rows) {
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
    const double a = rows[i].lambda_hat, b = rows[i + 1].lambda_hat;
    if (!std::isfinite(a) || !std::isfinite(b)) continue;
    if (a > 0.0 && b <= 0.0) return rows[i].sigma + (rows[i + 1].sigma - rows[i].sigma) * a / (a - b);
  }
  return std::nullopt;
}

inline void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os << "sigma,lambda_hat,stderr,bound,stable,overflow_fraction\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.sigma << ',' << r.lambda_hat << ',' << r.std_error << ',' << r.bound << ',' << (r.stable ? 1 : 0) << ','
       << r.overflow_fraction << '\n';
  }
}

}  // namespace nsde
