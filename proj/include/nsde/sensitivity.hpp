#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nsde/brownian.hpp"
#include "nsde/dynamics.hpp"
#include "nsde/parallel.hpp"
#include "nsde/random.hpp"
#include "nsde/solver.hpp"

namespace nsde {

/// State at T with its sensitivities: beta = dh/dw (n x d), alpha = dh/dh0 (n x n).
struct AugmentedState {
  Eigen::VectorXd h;
  Eigen::MatrixXd beta;
  std::optional<Eigen::MatrixXd> alpha;
};

struct SensitivityRequest {
  bool beta = true;
  bool alpha = false;
};

/// Buffers reused across augmented integrations of the same dynamics.
struct AugmentedWorkspace {
  explicit AugmentedWorkspace(const Dynamics& dyn) : step(dyn) {}

  StepWorkspace step;
  Eigen::MatrixXd df_dh, df_dw, drive_w, drive_h;
  Eigen::VectorXd noise_scale, next;
};

/// Joint Euler-Maruyama integration of h with
///   beta_{k+1} = beta_k + (df/dw + df/dh beta_k) dt + (dG/dw + dG/dh beta_k) (.)row dB_k
///   alpha_{k+1} = alpha_k + df/dh alpha_k dt + dG/dh alpha_k (.)row dB_k
/// keeping only the current values. h follows exactly the solver's update.
inline AugmentedState integrate_augmented(const Dynamics& dyn, const Eigen::VectorXd& h0, const TimeGrid& grid,
                                          const BrownianPath& path, SensitivityRequest want, AugmentedWorkspace& ws) {
  detail::check_inputs(dyn, h0, grid, path);
  const auto n = static_cast<Eigen::Index>(dyn.state_dim());
  const auto d = static_cast<Eigen::Index>(dyn.drift.param_count());
  const DiffusionKind kind = dyn.diffusion.kind;
  const double dt = grid.dt();

  AugmentedState st;
  st.h = h0;
  if (want.beta) st.beta = Eigen::MatrixXd::Zero(n, d);
  if (want.alpha) st.alpha = Eigen::MatrixXd::Identity(n, n);

  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    const double t = grid.time(k);
    const auto dB = path.step(k);
    dyn.drift.jacobians(st.h, t, ws.step.drift, ws.df_dh, want.beta ? &ws.df_dw : nullptr);
    const Eigen::VectorXd& f = ws.step.drift.act.back();
    diffusion_eval(dyn.diffusion, st.h, t, &f, ws.step.g);
    ws.noise_scale = dyn.diffusion.sigma_at(t) * dB;

    if (want.beta) {
      auto& beta = st.beta;
      ws.drive_w = ws.df_dw;
      ws.drive_w.noalias() += ws.df_dh * beta;
      switch (kind) {
        case DiffusionKind::zero:
        case DiffusionKind::additive: beta += ws.drive_w * dt; break;
        case DiffusionKind::multiplicative:
          beta.array() += ws.drive_w.array() * dt + beta.array().colwise() * ws.noise_scale.array();
          break;
        case DiffusionKind::dropout:
          beta.array() += ws.drive_w.array() * dt + ws.drive_w.array().colwise() * ws.noise_scale.array();
          break;
      }
    }
    if (want.alpha) {
      auto& alpha = *st.alpha;
      ws.drive_h.noalias() = ws.df_dh * alpha;
      switch (kind) {
        case DiffusionKind::zero:
        case DiffusionKind::additive: alpha += ws.drive_h * dt; break;
        case DiffusionKind::multiplicative:
          alpha.array() += ws.drive_h.array() * dt + alpha.array().colwise() * ws.noise_scale.array();
          break;
        case DiffusionKind::dropout:
          alpha.array() += ws.drive_h.array() * dt + ws.drive_h.array().colwise() * ws.noise_scale.array();
          break;
      }
    }

    em_update(kind, st.h, f, ws.step.g, dt, dB, ws.next);
    st.h.swap(ws.next);
    const bool finite = st.h.allFinite() && (!want.beta || st.beta.allFinite()) &&
                        (!want.alpha || st.alpha->allFinite());
    if (!finite) throw NumericOverflow(k, "augmented integration");
  }
  return st;
}

inline AugmentedState integrate_augmented(const Dynamics& dyn, const Eigen::VectorXd& h0, const TimeGrid& grid,
                                          const BrownianPath& path, bool want_alpha) {
  AugmentedWorkspace ws(dyn);
  return integrate_augmented(dyn, h0, grid, path, SensitivityRequest{true, want_alpha}, ws);
}

struct GradientContribution {
  Eigen::VectorXd grad_w;
  std::optional<Eigen::VectorXd> grad_input;
};

/// Chain rule at the terminal state: grad_w = beta_T^T dl/dh_T, grad_input = alpha_T^T dl/dh_T.
inline GradientContribution pathwise_gradient(const Eigen::VectorXd& loss_grad, const AugmentedState& aug) {
  if (loss_grad.size() != aug.h.size()) throw std::invalid_argument("pathwise_gradient: loss gradient shape mismatch");
  GradientContribution out;
  if (aug.beta.size() != 0) {
    if (aug.beta.rows() != loss_grad.size()) throw std::invalid_argument("pathwise_gradient: beta shape mismatch");
    out.grad_w = aug.beta.transpose() * loss_grad;
  }
  if (aug.alpha) out.grad_input = aug.alpha->transpose() * loss_grad;
  return out;
}

struct LossValue {
  double value = 0.0;
  Eigen::VectorXd grad;  // dl/dh_T
};

/// Terminal loss l(h_T) for the given batch sample.
using TerminalLoss = std::function<LossValue(const Eigen::VectorXd& h_T, std::size_t sample)>;

inline TerminalLoss half_squared_norm_loss() {
  return [](const Eigen::VectorXd& h, std::size_t) { return LossValue{0.5 * h.squaredNorm(), h}; };
}

struct GradientEstimate {
  Eigen::VectorXd grad_w;
  std::optional<Eigen::VectorXd> grad_input;
  std::size_t n_paths = 0;
  double loss_mean = 0.0;
};

/// Overflow inside a Monte-Carlo estimate, identifying the sample and path.
class PathOverflow : public NumericOverflow {
 public:
  PathOverflow(std::size_t sample, std::size_t path, std::size_t step)
      : NumericOverflow(step, "sample " + std::to_string(sample) + ", path " + std::to_string(path)),
        sample_(sample),
        path_(path) {}
  std::size_t sample() const { return sample_; }
  std::size_t path() const { return path_; }

 private:
  std::size_t sample_, path_;
};

/// Key of the j-th Brownian path of batch sample i.
inline RandomStream path_stream(const RandomStream& root, std::size_t sample, std::size_t path) {
  return root.child(sample).child(path);
}

/// paths[i][j]: the j-th path of sample i, exactly as mc_gradient draws it.
using PathSet = std::vector<std::vector<BrownianPath>>;

inline PathSet make_path_set(const RandomStream& root, const TimeGrid& grid, int m, std::size_t n_samples,
                             std::size_t k_paths) {
  PathSet set(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (std::size_t j = 0; j < k_paths; ++j) set[i].push_back(sample_brownian_path(path_stream(root, i, j), grid, m));
  }
  return set;
}

namespace detail {

struct PathResult {
  double loss = 0.0;
  Eigen::VectorXd grad_w;
  Eigen::VectorXd grad_input;
};

template <typename PathFor>
GradientEstimate mc_gradient_impl(const Dynamics& dyn, const TimeGrid& grid, const TerminalLoss& loss,
                                  std::span<const Eigen::VectorXd> h0s, std::size_t k_paths, bool want_input,
                                  Exec exec, PathFor&& path_for) {
  if (k_paths < 1) throw std::invalid_argument("mc_gradient: k_paths must be >= 1");
  if (h0s.empty()) throw std::invalid_argument("mc_gradient: empty batch");
  // without diffusion every path gives the same result, so one per sample is exact
  const std::size_t k_eval = dyn.diffusion.kind == DiffusionKind::zero ? 1 : k_paths;
  const std::size_t total = h0s.size() * k_eval;
  std::vector<PathResult> results(total);
  parallel_for(h0s.size(), exec, [&](std::size_t i) {
    AugmentedWorkspace ws(dyn);
    for (std::size_t j = 0; j < k_eval; ++j) {
      AugmentedState aug;
      try {
        const BrownianPath& path = path_for(i, j);
        aug = integrate_augmented(dyn, h0s[i], grid, path, SensitivityRequest{true, want_input}, ws);
      } catch (const NumericOverflow& e) {
        throw PathOverflow(i, j, e.step());
      }
      const LossValue lv = loss(aug.h, i);
      auto contrib = pathwise_gradient(lv.grad, aug);
      auto& r = results[i * k_eval + j];
      r.loss = lv.value;
      r.grad_w = std::move(contrib.grad_w);
      if (contrib.grad_input) r.grad_input = std::move(*contrib.grad_input);
    }
  });
  GradientEstimate est;
  est.n_paths = k_paths;
  est.grad_w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dyn.drift.param_count()));
  if (want_input) est.grad_input = Eigen::VectorXd::Zero(dyn.state_dim());
  for (const auto& r : results) {
    est.loss_mean += r.loss;
    est.grad_w += r.grad_w;
    if (want_input) *est.grad_input += r.grad_input;
  }
  const double inv = 1.0 / static_cast<double>(total);
  est.loss_mean *= inv;
  est.grad_w *= inv;
  if (want_input) *est.grad_input *= inv;
  return est;
}

}  // namespace detail

/// Pathwise Monte-Carlo gradient of the mean terminal loss over the batch,
/// k_paths independent Brownian paths per sample keyed from `stream`.
inline GradientEstimate mc_gradient(const Dynamics& dyn, const TimeGrid& grid, const TerminalLoss& loss,
                                    std::span<const Eigen::VectorXd> h0s, std::size_t k_paths,
                                    const RandomStream& stream, Exec exec = {}, bool want_input = false) {
  const int m = dyn.noise_dim();
  // one cached path per worker-owned slot keeps memory at O(batch) paths, not O(batch * k)
  std::vector<BrownianPath> scratch(h0s.size());
  return detail::mc_gradient_impl(dyn, grid, loss, h0s, k_paths, want_input, exec,
                                  [&](std::size_t i, std::size_t j) -> const BrownianPath& {
                                    scratch[i] = sample_brownian_path(path_stream(stream, i, j), grid, m);
                                    return scratch[i];
                                  });
}

/// Same estimator over an explicit path set (paths[i][j]).
inline GradientEstimate mc_gradient(const Dynamics& dyn, const TimeGrid& grid, const TerminalLoss& loss,
                                    std::span<const Eigen::VectorXd> h0s, const PathSet& paths, Exec exec = {},
                                    bool want_input = false) {
  if (paths.size() != h0s.size() || paths.empty()) throw std::invalid_argument("mc_gradient: path set shape mismatch");
  const std::size_t k = paths.front().size();
  for (const auto& p : paths) {
    if (p.size() != k) throw std::invalid_argument("mc_gradient: ragged path set");
  }
  return detail::mc_gradient_impl(dyn, grid, loss, h0s, k, want_input, exec,
                                  [&](std::size_t i, std::size_t j) -> const BrownianPath& { return paths[i][j]; });
}

/// Path-averaged terminal loss under plain integration.
inline double mean_terminal_loss(const Dynamics& dyn, const TimeGrid& grid, const TerminalLoss& loss,
                                 std::span<const Eigen::VectorXd> h0s, const PathSet& paths) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < h0s.size(); ++i) {
    for (const auto& path : paths[i]) {
      sum += loss(integrate(dyn, h0s[i], grid, path).final_state(), i).value;
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

/// Central differences of the path-averaged loss in the selected parameter
/// coordinates. `plus_paths` and `minus_paths` should be the same set (common
/// random numbers); passing different sets is only useful as a negative control.
inline Eigen::VectorXd fd_gradient_oracle(const Dynamics& dyn, const TimeGrid& grid, const TerminalLoss& loss,
                                          std::span<const Eigen::VectorXd> h0s, const PathSet& plus_paths,
                                          const PathSet& minus_paths, double delta,
                                          std::span<const std::size_t> coords) {
  if (!(delta > 0.0)) throw std::invalid_argument("fd_gradient_oracle: delta must be > 0");
  Eigen::VectorXd out(static_cast<Eigen::Index>(coords.size()));
  Dynamics shifted = dyn;
  for (std::size_t c = 0; c < coords.size(); ++c) {
    const auto idx = static_cast<Eigen::Index>(coords[c]);
    if (coords[c] >= dyn.drift.param_count()) throw std::invalid_argument("fd_gradient_oracle: coordinate out of range");
    const double w = dyn.drift.params()(idx);
    shifted.drift.params()(idx) = w + delta;
    const double up = mean_terminal_loss(shifted, grid, loss, h0s, plus_paths);
    shifted.drift.params()(idx) = w - delta;
    const double down = mean_terminal_loss(shifted, grid, loss, h0s, minus_paths);
    shifted.drift.params()(idx) = w;
    out(static_cast<Eigen::Index>(c)) = (up - down) / (2.0 * delta);
  }
  return out;
}

inline Eigen::VectorXd fd_gradient_oracle(const Dynamics& dyn, const TimeGrid& grid, const TerminalLoss& loss,
                                          std::span<const Eigen::VectorXd> h0s, const PathSet& paths, double delta,
                                          std::span<const std::size_t> coords) {
  return fd_gradient_oracle(dyn, grid, loss, h0s, paths, paths, delta, coords);
}

/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheckRow {
  std::size_t coordinate = 0;
  double pathwise = 0.0;
  double fd = 0.0;
  double rel_err = 0.0;
};

inline void write_gradcheck_csv(std::ostream& os, std::span<const GradCheckRow> rows) {
  os << "coordinate,pathwise,fd,rel_err\n";
  os.precision(17);
  for (const auto& r : rows) os << r.coordinate << ',' << r.pathwise << ',' << r.fd << ',' << r.rel_err << '\n';
}

/// `count` distinct coordinates in [0, d), drawn from the stream, in draw order.
inline std::vector<std::size_t> pick_coordinates(RandomStream& stream, std::size_t d, std::size_t count) {
  count = std::min(count, d);
  std::vector<std::size_t> all(d);
  for (std::size_t i = 0; i < d; ++i) all[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(stream.bits() % (d - i));
    std::swap(all[i], all[j]);
  }
  all.resize(count);
  return all;
}

}  // namespace nsde
