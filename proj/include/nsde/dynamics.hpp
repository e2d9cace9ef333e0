#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "nsde/brownian.hpp"
#include "nsde/random.hpp"

namespace nsde {

enum class Activation { tanh, relu };

inline std::string_view to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

/// Drift f(h, t; w): an MLP on [h; t / horizon] with layer_dims
/// {n + 1, hidden..., n}. The activation is applied after every layer but the last.
///
/// Parameters are stored flat, layer by layer: the row-major weight matrix
/// (out x in) followed by the bias (out).
class DriftNet {
 public:
  /// Per-evaluation scratch buffers; reuse one per thread to avoid allocations.
  struct Workspace {
    std::vector<Eigen::VectorXd> act;    // act[0] = input, act[l + 1] = output of layer l
    std::vector<Eigen::VectorXd> deriv;  // activation derivative at layer l output
    std::vector<Eigen::MatrixXd> back;   // df / d(pre-activation of layer l), n x out_l
    std::vector<Eigen::MatrixXd> pulled; // back[l] * W_l, n x in_l
  };

  DriftNet() = default;

  DriftNet(std::vector<int> layer_dims, Activation activation, double horizon = 1.0)
      : dims_(std::move(layer_dims)), activation_(activation), horizon_(horizon) {
    if (dims_.size() < 2) throw std::invalid_argument("DriftNet: need at least one layer");
    for (int d : dims_) {
      if (d < 1) throw std::invalid_argument("DriftNet: layer dimensions must be positive");
    }
    if (dims_.front() != dims_.back() + 1) {
      throw std::invalid_argument("DriftNet: input width must be state_dim + 1 (time feature)");
    }
    if (!(horizon > 0.0)) throw std::invalid_argument("DriftNet: horizon must be > 0");
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      offsets_.push_back(offset);
      offset += static_cast<std::size_t>(dims_[l + 1]) * (dims_[l] + 1);
    }
    params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(offset));
  }

  /// Convenience: {n + 1, hidden..., n}.
  static DriftNet mlp(int state_dim, const std::vector<int>& hidden, Activation activation, double horizon = 1.0) {
    std::vector<int> dims{state_dim + 1};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(state_dim);
    return DriftNet(std::move(dims), activation, horizon);
  }

  /// f(h, t) = A h: one affine layer with zero time weight and zero bias.
  static DriftNet linear(const Eigen::MatrixXd& a) {
    if (a.rows() != a.cols()) throw std::invalid_argument("DriftNet::linear: matrix must be square");
    const int n = static_cast<int>(a.rows());
    DriftNet net({n + 1, n}, Activation::tanh);
    net.weight(0).leftCols(n) = a;
    return net;
  }

  int state_dim() const { return dims_.back(); }
  int layer_count() const { return static_cast<int>(dims_.size()) - 1; }
  const std::vector<int>& layer_dims() const { return dims_; }
  Activation activation() const { return activation_; }
  double horizon() const { return horizon_; }
  void set_horizon(double horizon) {
    if (!(horizon > 0.0)) throw std::invalid_argument("DriftNet: horizon must be > 0");
    horizon_ = horizon;
  }
  std::size_t param_count() const { return static_cast<std::size_t>(params_.size()); }

  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }

  std::size_t weight_offset(int l) const { return offsets_[static_cast<std::size_t>(l)]; }
  std::size_t bias_offset(int l) const {
    return weight_offset(l) + static_cast<std::size_t>(dims_[l + 1]) * dims_[l];
  }

  Eigen::Map<RowMatrix> weight(int l) {
    return {params_.data() + weight_offset(l), dims_[l + 1], dims_[l]};
  }
  Eigen::Map<const RowMatrix> weight(int l) const {
    return {params_.data() + weight_offset(l), dims_[l + 1], dims_[l]};
  }
  Eigen::Map<Eigen::VectorXd> bias(int l) { return {params_.data() + bias_offset(l), dims_[l + 1]}; }
  Eigen::Map<const Eigen::VectorXd> bias(int l) const { return {params_.data() + bias_offset(l), dims_[l + 1]}; }

  /// Weights ~ N(0, 1 / fan_in), biases zero.
  void init_params(RandomStream& stream) {
    params_.setZero();
    for (int l = 0; l < layer_count(); ++l) {
      auto w = weight(l);
      const double sd = 1.0 / std::sqrt(static_cast<double>(dims_[l]));
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = sd * stream.gaussian();
      }
    }
  }

  Workspace make_workspace() const {
    Workspace ws;
    const int n = state_dim();
    ws.act.emplace_back(dims_.front());
    for (int l = 0; l < layer_count(); ++l) {
      ws.act.emplace_back(dims_[l + 1]);
      ws.deriv.emplace_back(dims_[l + 1]);
      ws.back.emplace_back(n, dims_[l + 1]);
      ws.pulled.emplace_back(n, dims_[l]);
    }
    return ws;
  }

  const Eigen::VectorXd& forward(const Eigen::Ref<const Eigen::VectorXd>& h, double t, Workspace& ws) const {
    const int n = state_dim();
    if (h.size() != n) throw std::invalid_argument("DriftNet: state dimension mismatch");
    ws.act[0].head(n) = h;
    ws.act[0](n) = t / horizon_;
    const int last = layer_count() - 1;
    for (int l = 0; l <= last; ++l) {
      auto& out = ws.act[l + 1];
      out.noalias() = weight(l) * ws.act[l];
      out += bias(l);
      if (l == last) break;
      if (activation_ == Activation::tanh) {
        out = out.array().tanh();
        ws.deriv[l] = 1.0 - out.array().square();
      } else {
        // subgradient at 0 taken as 0
        ws.deriv[l] = (out.array() > 0.0).cast<double>();
        out = out.cwiseMax(0.0);
      }
    }
    return ws.act.back();
  }

  Eigen::VectorXd operator()(const Eigen::Ref<const Eigen::VectorXd>& h, double t) const {
    auto ws = make_workspace();
    return forward(h, t, ws);
  }

  /// Evaluates f (left in ws.act.back()) and its Jacobians by the layer-wise chain rule.
  /// df_dw may be null when only df_dh is needed.
  void jacobians(const Eigen::Ref<const Eigen::VectorXd>& h, double t, Workspace& ws, Eigen::MatrixXd& df_dh,
                 Eigen::MatrixXd* df_dw) const {
    forward(h, t, ws);
    const int n = state_dim();
    const int last = layer_count() - 1;
    ws.back[last].setIdentity();
    for (int l = last; l > 0; --l) {
      ws.pulled[l].noalias() = ws.back[l] * weight(l);
      ws.back[l - 1] = ws.pulled[l] * ws.deriv[l - 1].asDiagonal();
    }
    ws.pulled[0].noalias() = ws.back[0] * weight(0);
    df_dh = ws.pulled[0].leftCols(n);
    if (df_dw == nullptr) return;
    df_dw->resize(n, static_cast<Eigen::Index>(param_count()));
    for (int l = 0; l <= last; ++l) {
      const auto in = dims_[l];
      const auto out = dims_[l + 1];
      const auto w0 = static_cast<Eigen::Index>(weight_offset(l));
      for (int i = 0; i < out; ++i) {
        df_dw->middleCols(w0 + static_cast<Eigen::Index>(i) * in, in).noalias() =
            ws.back[l].col(i) * ws.act[l].transpose();
      }
      df_dw->middleCols(static_cast<Eigen::Index>(bias_offset(l)), out) = ws.back[l];
    }
  }

 private:
  std::vector<int> dims_;
  std::vector<std::size_t> offsets_;
  Activation activation_ = Activation::tanh;
  double horizon_ = 1.0;
  Eigen::VectorXd params_;
};

enum class DiffusionKind { zero, additive, multiplicative, dropout };
enum class SigmaSchedule { constant, linear_decay };

inline std::string_view to_string(DiffusionKind k) {
  switch (k) {
    case DiffusionKind::zero: return "ode";
    case DiffusionKind::additive: return "additive";
    case DiffusionKind::multiplicative: return "multiplicative";
    case DiffusionKind::dropout: return "dropout";
  }
  return "?";
}

inline DiffusionKind parse_diffusion_kind(std::string_view s) {
  if (s == "ode" || s == "zero") return DiffusionKind::zero;
  if (s == "additive") return DiffusionKind::additive;
  if (s == "multiplicative") return DiffusionKind::multiplicative;
  if (s == "dropout") return DiffusionKind::dropout;
  throw std::invalid_argument("unknown diffusion variant '" + std::string(s) + "'");
}

/// sigma for dropout with keep probability p.
inline double dropout_sigma(double keep_prob) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw std::invalid_argument("dropout keep probability must lie in (0, 1]");
  return std::sqrt((1.0 - keep_prob) / keep_prob);
}

/// Diagonal diffusion G(h, t) = diag(g): zero, sigma*1, sigma*h or sigma*f(h, t).
struct DiffusionSpec {
  DiffusionKind kind = DiffusionKind::zero;
  double sigma = 0.0;
  SigmaSchedule schedule = SigmaSchedule::constant;
  double horizon = 1.0;  // only used by linear_decay

  static DiffusionSpec zero() { return {}; }
  static DiffusionSpec additive(double s) { return make(DiffusionKind::additive, s); }
  static DiffusionSpec multiplicative(double s) { return make(DiffusionKind::multiplicative, s); }
  static DiffusionSpec dropout(double s) { return make(DiffusionKind::dropout, s); }
  static DiffusionSpec dropout_keep(double p) { return make(DiffusionKind::dropout, dropout_sigma(p)); }

  static DiffusionSpec make(DiffusionKind kind, double s) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw std::invalid_argument("DiffusionSpec: sigma must be finite and >= 0");
    if (kind == DiffusionKind::zero) return {};
    return {kind, s, SigmaSchedule::constant, 1.0};
  }

  double sigma_at(double t) const {
    if (schedule == SigmaSchedule::linear_decay) return sigma * (1.0 - t / horizon);
    return sigma;
  }
};

/// Diagonal of G. `f` is required for the dropout variant.
inline void diffusion_eval(const DiffusionSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& h, double t,
                           const Eigen::VectorXd* f, Eigen::VectorXd& g) {
  const double s = spec.sigma_at(t);
  switch (spec.kind) {
    case DiffusionKind::zero: g.setZero(h.size()); break;
    case DiffusionKind::additive: g.setConstant(h.size(), s); break;
    case DiffusionKind::multiplicative: g = s * h; break;
    case DiffusionKind::dropout:
      if (f == nullptr) throw std::invalid_argument("diffusion_eval: dropout variant needs the drift value");
      if (f->size() != h.size()) throw std::invalid_argument("diffusion_eval: drift dimension mismatch");
      g = s * (*f);
      break;
  }
}

inline Eigen::VectorXd diffusion_eval(const DiffusionSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& h, double t,
                                      const Eigen::VectorXd* f = nullptr) {
  Eigen::VectorXd g;
  diffusion_eval(spec, h, t, f, g);
  return g;
}

struct DiffusionJacobians {
  Eigen::MatrixXd dG_dh;  // row i: gradient of g_i with respect to h
  Eigen::MatrixXd dG_dw;
};

inline DiffusionJacobians diffusion_jacobians(const DiffusionSpec& spec, double t, const Eigen::MatrixXd& df_dh,
                                              const Eigen::MatrixXd& df_dw) {
  const auto n = df_dh.rows();
  const double s = spec.sigma_at(t);
  DiffusionJacobians j{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, df_dw.cols())};
  if (spec.kind == DiffusionKind::multiplicative) {
    j.dG_dh.diagonal().setConstant(s);
  } else if (spec.kind == DiffusionKind::dropout) {
    j.dG_dh = s * df_dh;
    j.dG_dw = s * df_dw;
  }
  return j;
}

/// Drift plus diffusion: the right-hand side of dh = f dt + G dB.
struct Dynamics {
  DriftNet drift;
  DiffusionSpec diffusion;

  int state_dim() const { return drift.state_dim(); }
  int noise_dim() const { return drift.state_dim(); }
};

/// Largest singular value by power iteration on A^T A.
inline double spectral_norm(const Eigen::MatrixXd& a, int iterations = 50) {
  if (a.size() == 0) return 0.0;
  Eigen::VectorXd v = Eigen::VectorXd::Ones(a.cols()) / std::sqrt(static_cast<double>(a.cols()));
  double norm = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const Eigen::VectorXd av = a * v;
    Eigen::VectorXd w = a.transpose() * av;
    const double wn = w.norm();
    if (wn == 0.0) return (a * v).norm();
    v = w / wn;
    norm = (a * v).norm();
  }
  return norm;
}

/// Empirical Lipschitz constant in h: max spectral norm of df/dh over the sample
/// states at three times spanning [t_lo, t_hi]. A lower bound on the true constant.
inline double lipschitz_estimate(const DriftNet& net, std::span<const Eigen::VectorXd> states, double t_lo,
                                 double t_hi) {
  if (states.empty()) throw std::invalid_argument("lipschitz_estimate: empty sample set");
  auto ws = net.make_workspace();
  Eigen::MatrixXd df_dh;
  double best = 0.0;
  for (const double t : {t_lo, 0.5 * (t_lo + t_hi), t_hi}) {
    for (const auto& h : states) {
      net.jacobians(h, t, ws, df_dh, nullptr);
      best = std::max(best, spectral_norm(df_dh));
    }
  }
  return best;
}

/// Upper bound on the h-Lipschitz constant: product of layer spectral norms
/// (first layer restricted to its state columns); valid for 1-Lipschitz activations.
inline double layer_norm_product_bound(const DriftNet& net) {
  const auto largest = [](const Eigen::MatrixXd& m) { return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0); };
  const int n = net.state_dim();
  double bound = largest(net.weight(0).leftCols(n));
  for (int l = 1; l < net.layer_count(); ++l) bound *= largest(net.weight(l));
  return bound;
}

}  // namespace nsde
