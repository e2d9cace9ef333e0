#pragma once

#include <cstddef>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nsde/brownian.hpp"
#include "nsde/dynamics.hpp"

namespace nsde {

/// A state became non-finite. step() is the 0-based index of the step that produced it.
class NumericOverflow : public std::runtime_error {
 public:
  explicit NumericOverflow(std::size_t step, const std::string& context = {})
      : std::runtime_error("numeric overflow at step " + std::to_string(step) +
                           (context.empty() ? std::string{} : " (" + context + ")")),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

enum class Scheme { euler_maruyama };

struct SolveOptions {
  Scheme scheme = Scheme::euler_maruyama;
  std::size_t record_every = 0;  // 0: final state only

  static SolveOptions final_only() { return {}; }
  static SolveOptions every(std::size_t k) {
    if (k == 0) throw std::invalid_argument("SolveOptions::every: k must be >= 1");
    return {Scheme::euler_maruyama, k};
  }

  bool records(std::size_t k, std::size_t n_steps) const {
    if (k == n_steps) return true;
    return record_every != 0 && k % record_every == 0;
  }
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Eigen::VectorXd> states;

  const Eigen::VectorXd& final_state() const { return states.back(); }
};

/// Scratch space for one integration; not shareable between threads.
struct StepWorkspace {
  explicit StepWorkspace(const Dynamics& dyn) : drift(dyn.drift.make_workspace()) {}

  DriftNet::Workspace drift;
  Eigen::VectorXd g;
};

/// h + f dt + g (.) dB, the shared Euler-Maruyama update. The noise term is
/// omitted for the zero-diffusion variant so the result cannot depend on dB.
inline void em_update(DiffusionKind kind, const Eigen::Ref<const Eigen::VectorXd>& h, const Eigen::VectorXd& f,
                      const Eigen::VectorXd& g, double dt, const Eigen::Ref<const Eigen::VectorXd>& dB,
                      Eigen::VectorXd& out) {
  if (kind == DiffusionKind::zero) {
    out = h + f * dt;
  } else {
    out = h + f * dt + g.cwiseProduct(dB);
  }
}

inline void em_step(const Dynamics& dyn, const Eigen::Ref<const Eigen::VectorXd>& h, double t, double dt,
                    const Eigen::Ref<const Eigen::VectorXd>& dB, StepWorkspace& ws, Eigen::VectorXd& out,
                    std::size_t step = 0) {
  if (dB.size() != dyn.noise_dim()) throw std::invalid_argument("em_step: Brownian increment dimension mismatch");
  const Eigen::VectorXd& f = dyn.drift.forward(h, t, ws.drift);
  diffusion_eval(dyn.diffusion, h, t, &f, ws.g);
  em_update(dyn.diffusion.kind, h, f, ws.g, dt, dB, out);
  if (!out.allFinite()) throw NumericOverflow(step);
}

inline Eigen::VectorXd em_step(const Dynamics& dyn, const Eigen::Ref<const Eigen::VectorXd>& h, double t, double dt,
                               const Eigen::Ref<const Eigen::VectorXd>& dB) {
  StepWorkspace ws(dyn);
  Eigen::VectorXd out;
  em_step(dyn, h, t, dt, dB, ws, out);
  return out;
}

namespace detail {

inline void check_inputs(const Dynamics& dyn, const Eigen::VectorXd& h0, const TimeGrid& grid,
                         const BrownianPath& path) {
  if (h0.size() != dyn.state_dim()) throw std::invalid_argument("integrate: initial state dimension mismatch");
  if (!(path.grid == grid)) throw std::invalid_argument("integrate: Brownian path was sampled on a different grid");
  if (path.dim() != dyn.noise_dim()) throw std::invalid_argument("integrate: Brownian path dimension mismatch");
}

}  // namespace detail

/// Calls observer(k, h_k) for k = 0..N. Holds two states regardless of N.
template <typename Observer>
void integrate_visit(const Dynamics& dyn, const Eigen::VectorXd& h0, const TimeGrid& grid, const BrownianPath& path,
                     Observer&& observer) {
  detail::check_inputs(dyn, h0, grid, path);
  StepWorkspace ws(dyn);
  Eigen::VectorXd h = h0;
  Eigen::VectorXd next(h0.size());
  observer(std::size_t{0}, std::as_const(h));
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    em_step(dyn, h, grid.time(k), grid.dt(), path.step(k), ws, next, k);
    h.swap(next);
    observer(k + 1, std::as_const(h));
  }
}

inline Trajectory integrate(const Dynamics& dyn, const Eigen::VectorXd& h0, const TimeGrid& grid,
                            const BrownianPath& path, const SolveOptions& opts = {}) {
  Trajectory traj;
  integrate_visit(dyn, h0, grid, path, [&](std::size_t k, const Eigen::VectorXd& h) {
    if (opts.records(k, grid.n_steps())) {
      traj.times.push_back(grid.time(k));
      traj.states.push_back(h);
    }
  });
  return traj;
}

/// Two integrations advanced in lockstep on the same increments; observer(k, a_k, b_k).
template <typename Observer>
void integrate_coupled_visit(const Dynamics& dyn, const Eigen::VectorXd& h0_a, const Eigen::VectorXd& h0_b,
                             const TimeGrid& grid, const BrownianPath& path, Observer&& observer) {
  detail::check_inputs(dyn, h0_a, grid, path);
  detail::check_inputs(dyn, h0_b, grid, path);
  StepWorkspace ws(dyn);
  Eigen::VectorXd a = h0_a, b = h0_b;
  Eigen::VectorXd next(a.size());
  observer(std::size_t{0}, std::as_const(a), std::as_const(b));
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    const double t = grid.time(k);
    em_step(dyn, a, t, grid.dt(), path.step(k), ws, next, k);
    a.swap(next);
    em_step(dyn, b, t, grid.dt(), path.step(k), ws, next, k);
    b.swap(next);
    observer(k + 1, std::as_const(a), std::as_const(b));
  }
}

inline std::pair<Trajectory, Trajectory> integrate_coupled(const Dynamics& dyn, const Eigen::VectorXd& h0_a,
                                                           const Eigen::VectorXd& h0_b, const TimeGrid& grid,
                                                           const BrownianPath& path, const SolveOptions& opts = {}) {
  std::pair<Trajectory, Trajectory> out;
  integrate_coupled_visit(dyn, h0_a, h0_b, grid, path,
                          [&](std::size_t k, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
                            if (!opts.records(k, grid.n_steps())) return;
                            out.first.times.push_back(grid.time(k));
                            out.first.states.push_back(a);
                            out.second.times.push_back(grid.time(k));
                            out.second.states.push_back(b);
                          });
  return out;
}

/// CSV with header t,h_0,...,h_{n-1}; 17 significant digits.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  const auto n = traj.states.empty() ? 0 : traj.states.front().size();
  os << 't';
  for (Eigen::Index i = 0; i < n; ++i) os << ",h_" << i;
  os << '\n';
  os.precision(17);
  for (std::size_t r = 0; r < traj.times.size(); ++r) {
    os << traj.times[r];
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << traj.states[r](i);
    os << '\n';
  }
}

}  // namespace nsde
