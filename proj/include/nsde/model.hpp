#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nsde/brownian.hpp"
#include "nsde/dynamics.hpp"
#include "nsde/parallel.hpp"
#include "nsde/params_io.hpp"
#include "nsde/random.hpp"
#include "nsde/sensitivity.hpp"
#include "nsde/solver.hpp"

namespace nsde {

struct AffineMap {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;

  AffineMap() = default;
  AffineMap(int in, int out) : weight(Eigen::MatrixXd::Zero(out, in)), bias(Eigen::VectorXd::Zero(out)) {}

  int in_dim() const { return static_cast<int>(weight.cols()); }
  int out_dim() const { return static_cast<int>(weight.rows()); }
  std::size_t param_count() const { return static_cast<std::size_t>(weight.size() + bias.size()); }

  Eigen::VectorXd operator()(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (x.size() != weight.cols()) throw std::invalid_argument("AffineMap: input dimension mismatch");
    return weight * x + bias;
  }

  void init(RandomStream& stream) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(weight.cols()));
    for (Eigen::Index i = 0; i < weight.rows(); ++i) {
      for (Eigen::Index j = 0; j < weight.cols(); ++j) weight(i, j) = sd * stream.gaussian();
    }
    bias.setZero();
  }
};

struct ModelSpec {
  int input_dim = 2;
  int state_dim = 16;
  int n_classes = 2;
  std::vector<int> hidden{32};
  Activation activation = Activation::tanh;
  DiffusionSpec diffusion;
  double t_end = 1.0;
  std::size_t n_steps = 100;
};

/// encoder (affine) -> SDE block -> linear head.
struct ClassifierModel {
  AffineMap encoder;
  Dynamics sde;
  TimeGrid grid;
  AffineMap head;

  int input_dim() const { return encoder.in_dim(); }
  int state_dim() const { return sde.state_dim(); }
  int n_classes() const { return head.out_dim(); }

  std::size_t param_count() const {
    return encoder.param_count() + sde.drift.param_count() + head.param_count();
  }

  /// Flat parameters: encoder W (row-major), encoder b, drift w, head W (row-major), head b.
  Eigen::VectorXd pack() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(param_count()));
    Eigen::Index o = 0;
    const auto put_matrix = [&](const Eigen::MatrixXd& m) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) v(o++) = m(i, j);
      }
    };
    const auto put_vector = [&](const Eigen::VectorXd& x) {
      v.segment(o, x.size()) = x;
      o += x.size();
    };
    put_matrix(encoder.weight);
    put_vector(encoder.bias);
    put_vector(sde.drift.params());
    put_matrix(head.weight);
    put_vector(head.bias);
    return v;
  }

  void unpack(const Eigen::VectorXd& v) {
    if (static_cast<std::size_t>(v.size()) != param_count()) throw std::invalid_argument("unpack: length mismatch");
    Eigen::Index o = 0;
    const auto get_matrix = [&](Eigen::MatrixXd& m) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = v(o++);
      }
    };
    const auto get_vector = [&](auto& x) {
      x = v.segment(o, x.size());
      o += x.size();
    };
    get_matrix(encoder.weight);
    get_vector(encoder.bias);
    get_vector(sde.drift.params());
    get_matrix(head.weight);
    get_vector(head.bias);
  }
};

inline ClassifierModel make_classifier(const ModelSpec& spec, RandomStream& init) {
  if (spec.input_dim < 1 || spec.state_dim < 1 || spec.n_classes < 2) {
    throw std::invalid_argument("make_classifier: bad dimensions");
  }
  ClassifierModel m;
  m.grid = TimeGrid(spec.t_end, spec.n_steps);
  m.encoder = AffineMap(spec.input_dim, spec.state_dim);
  m.sde.drift = DriftNet::mlp(spec.state_dim, spec.hidden, spec.activation, spec.t_end);
  m.sde.diffusion = spec.diffusion;
  m.sde.diffusion.horizon = spec.t_end;
  m.head = AffineMap(spec.state_dim, spec.n_classes);
  m.encoder.init(init);
  m.sde.drift.init_params(init);
  m.head.init(init);
  return m;
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double mx = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - mx).exp();
  return e / e.sum();
}

/// Lowest index among maximal entries.
inline int argmax(const Eigen::VectorXd& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = static_cast<int>(i);
  }
  return best;
}

inline Eigen::VectorXd sde_terminal_state(const ClassifierModel& model, const Eigen::VectorXd& h0,
                                          const RandomStream& stream) {
  if (model.sde.diffusion.kind == DiffusionKind::zero) {
    return integrate(model.sde, h0, model.grid, zero_brownian_path(model.grid, model.sde.noise_dim())).final_state();
  }
  const auto path = sample_brownian_path(stream, model.grid, model.sde.noise_dim());
  return integrate(model.sde, h0, model.grid, path).final_state();
}

/// One stochastic pass; the Brownian path is keyed by `stream`.
inline Eigen::VectorXd forward(const ClassifierModel& model, const Eigen::VectorXd& x, const RandomStream& stream) {
  if (x.size() != model.input_dim()) throw std::invalid_argument("forward: input dimension mismatch");
  return model.head(sde_terminal_state(model, model.encoder(x), stream));
}

struct PredictOptions {
  int ttn_passes = 10;
  RandomStream stream;
};

struct Prediction {
  Eigen::VectorXd probabilities;
  int label = 0;
  int dropped = 0;
};

/// Mean of softmax probabilities over independent passes (pass j keyed by
/// stream.child(j)). Passes that overflow are dropped and counted.
inline Prediction predict_ttn(const ClassifierModel& model, const Eigen::VectorXd& x, const PredictOptions& opts) {
  if (opts.ttn_passes < 1) throw std::invalid_argument("predict_ttn: need at least one pass");
  // the ODE is deterministic: extra passes would only perturb the last bits of the mean
  const int passes = model.sde.diffusion.kind == DiffusionKind::zero ? 1 : opts.ttn_passes;
  Prediction out;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(model.n_classes());
  int used = 0;
  for (int j = 0; j < passes; ++j) {
    try {
      sum += softmax(forward(model, x, opts.stream.child(static_cast<std::uint64_t>(j))));
      ++used;
    } catch (const NumericOverflow&) {
      ++out.dropped;
    }
  }
  if (used == 0) throw NumericOverflow(model.grid.n_steps(), "predict_ttn: every pass overflowed");
  out.probabilities = used == 1 ? sum : Eigen::VectorXd(sum / static_cast<double>(used));
  out.label = argmax(out.probabilities);
  return out;
}

struct LossGrad {
  double loss = 0.0;
  Eigen::VectorXd dlogits;
};

/// Softmax cross-entropy.
inline LossGrad loss_and_grad(const Eigen::VectorXd& logits, int label) {
  if (label < 0 || label >= logits.size()) throw std::invalid_argument("loss_and_grad: label out of range");
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  LossGrad out;
  out.loss = lse - logits(label);
  out.dlogits = (logits.array() - lse).exp();
  out.dlogits(label) -= 1.0;
  return out;
}

struct ModelGradient {
  Eigen::VectorXd flat;  // ClassifierModel::pack() layout
  double loss_mean = 0.0;
  std::size_t n_used = 0;     // (sample, path) pairs averaged
  std::size_t n_skipped = 0;  // samples dropped after overflow
};

/// Mean cross-entropy gradient over the batch and k_paths paths per sample.
/// Path j of batch sample i is keyed by path_stream(stream, i, j). Samples whose
/// integration overflows are skipped and counted.
inline ModelGradient model_gradient(const ClassifierModel& model, std::span<const Eigen::VectorXd> xs,
                                    std::span<const int> labels, std::size_t k_paths, const RandomStream& stream,
                                    Exec exec = {}) {
  if (xs.empty()) throw std::invalid_argument("model_gradient: empty batch");
  if (xs.size() != labels.size()) throw std::invalid_argument("model_gradient: labels and inputs differ in length");
  if (k_paths < 1) throw std::invalid_argument("model_gradient: k_paths must be >= 1");
  const bool deterministic = model.sde.diffusion.kind == DiffusionKind::zero;
  const std::size_t paths = deterministic ? 1 : k_paths;
  const int n = model.state_dim();
  const auto enc_w = model.encoder.weight.size();
  const auto enc_b = model.encoder.bias.size();
  const auto drift_d = static_cast<Eigen::Index>(model.sde.drift.param_count());
  const auto head_w = model.head.weight.size();

  struct SampleResult {
    Eigen::VectorXd grad;
    double loss = 0.0;
    bool skipped = false;
  };
  std::vector<SampleResult> results(xs.size());
  parallel_for(xs.size(), exec, [&](std::size_t i) {
    AugmentedWorkspace ws(model.sde);
    auto& r = results[i];
    r.grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.param_count()));
    const Eigen::VectorXd h0 = model.encoder(xs[i]);
    try {
      for (std::size_t j = 0; j < paths; ++j) {
        const auto path = deterministic ? zero_brownian_path(model.grid, n)
                                        : sample_brownian_path(path_stream(stream, i, j), model.grid, n);
        const auto aug = integrate_augmented(model.sde, h0, model.grid, path, SensitivityRequest{true, true}, ws);
        const auto lg = loss_and_grad(model.head(aug.h), labels[i]);
        const Eigen::VectorXd dh_T = model.head.weight.transpose() * lg.dlogits;
        const Eigen::VectorXd dh_0 = aug.alpha->transpose() * dh_T;
        Eigen::Index o = 0;
        for (Eigen::Index a = 0; a < n; ++a) {
          r.grad.segment(o + a * xs[i].size(), xs[i].size()) += dh_0(a) * xs[i];
        }
        o += enc_w;
        r.grad.segment(o, enc_b) += dh_0;
        o += enc_b;
        r.grad.segment(o, drift_d).noalias() += aug.beta.transpose() * dh_T;
        o += drift_d;
        for (Eigen::Index c = 0; c < lg.dlogits.size(); ++c) r.grad.segment(o + c * n, n) += lg.dlogits(c) * aug.h;
        o += head_w;
        r.grad.segment(o, lg.dlogits.size()) += lg.dlogits;
        r.loss += lg.loss;
      }
    } catch (const NumericOverflow&) {
      r.skipped = true;
    }
  });

  ModelGradient out;
  out.flat = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.param_count()));
  for (const auto& r : results) {
    if (r.skipped) {
      ++out.n_skipped;
      continue;
    }
    out.flat += r.grad;
    out.loss_mean += r.loss;
    out.n_used += paths;
  }
  if (out.n_used == 0) throw NumericOverflow(model.grid.n_steps(), "model_gradient: every sample overflowed");
  const double inv = 1.0 / static_cast<double>(out.n_used);
  out.flat *= inv;
  out.loss_mean *= inv;
  return out;
}

/// Gradient of the cross-entropy with respect to the model input, averaged over
/// `paths` Brownian paths keyed by stream.child(j).
inline Eigen::VectorXd input_gradient(const ClassifierModel& model, const Eigen::VectorXd& x, int label,
                                      std::size_t paths, const RandomStream& stream, double* loss_out = nullptr) {
  const bool deterministic = model.sde.diffusion.kind == DiffusionKind::zero;
  if (deterministic) paths = 1;
  AugmentedWorkspace ws(model.sde);
  const int n = model.state_dim();
  const Eigen::VectorXd h0 = model.encoder(x);
  Eigen::VectorXd dh_0 = Eigen::VectorXd::Zero(n);
  double loss = 0.0;
  for (std::size_t j = 0; j < paths; ++j) {
    const auto path = deterministic ? zero_brownian_path(model.grid, n)
                                    : sample_brownian_path(stream.child(j), model.grid, n);
    const auto aug = integrate_augmented(model.sde, h0, model.grid, path, SensitivityRequest{false, true}, ws);
    const auto lg = loss_and_grad(model.head(aug.h), label);
    dh_0 += aug.alpha->transpose() * (model.head.weight.transpose() * lg.dlogits);
    loss += lg.loss;
  }
  if (loss_out) *loss_out = loss / static_cast<double>(paths);
  return model.encoder.weight.transpose() * (dh_0 / static_cast<double>(paths));
}

// Checkpoint: "NSDC", u32 version, u32 input_dim, u32 state_dim, u32 n_classes,
// u32 layer-dim count, u32 dims..., u32 activation, u32 variant, f64 sigma,
// u32 schedule, f64 T, u64 N, then three parameter blobs (encoder W row-major
// followed by b, drift w, head W row-major followed by b).
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const ClassifierModel& m) {
  os.write("NSDC", 4);
  io::put_u32(os, kCheckpointVersion);
  io::put_u32(os, static_cast<std::uint32_t>(m.input_dim()));
  io::put_u32(os, static_cast<std::uint32_t>(m.state_dim()));
  io::put_u32(os, static_cast<std::uint32_t>(m.n_classes()));
  const auto& dims = m.sde.drift.layer_dims();
  io::put_u32(os, static_cast<std::uint32_t>(dims.size()));
  for (int d : dims) io::put_u32(os, static_cast<std::uint32_t>(d));
  io::put_u32(os, static_cast<std::uint32_t>(m.sde.drift.activation()));
  io::put_u32(os, static_cast<std::uint32_t>(m.sde.diffusion.kind));
  io::put_f64(os, m.sde.diffusion.sigma);
  io::put_u32(os, static_cast<std::uint32_t>(m.sde.diffusion.schedule));
  io::put_f64(os, m.grid.t_end());
  io::put_u64(os, m.grid.n_steps());
  const Eigen::VectorXd flat = m.pack();
  const auto enc = static_cast<Eigen::Index>(m.encoder.param_count());
  const auto drift = static_cast<Eigen::Index>(m.sde.drift.param_count());
  write_param_blob(os, flat.head(enc));
  write_param_blob(os, flat.segment(enc, drift));
  write_param_blob(os, flat.tail(static_cast<Eigen::Index>(m.head.param_count())));
  if (!os) throw FormatError("failed to write checkpoint");
}

inline ClassifierModel read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (is.gcount() != 4 || std::string(magic.data(), 4) != "NSDC") throw FormatError("checkpoint: bad magic");
  if (io::get_u32(is) != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  ModelSpec spec;
  spec.input_dim = static_cast<int>(io::get_u32(is));
  spec.state_dim = static_cast<int>(io::get_u32(is));
  spec.n_classes = static_cast<int>(io::get_u32(is));
  const auto n_dims = io::get_u32(is);
  if (n_dims < 2 || n_dims > 64) throw FormatError("checkpoint: bad layer count");
  std::vector<int> dims(n_dims);
  for (auto& d : dims) d = static_cast<int>(io::get_u32(is));
  spec.hidden.assign(dims.begin() + 1, dims.end() - 1);
  const auto act = io::get_u32(is);
  const auto kind = io::get_u32(is);
  if (act > 1 || kind > 3) throw FormatError("checkpoint: bad enumeration value");
  spec.activation = static_cast<Activation>(act);
  spec.diffusion.kind = static_cast<DiffusionKind>(kind);
  spec.diffusion.sigma = io::get_f64(is);
  spec.diffusion.schedule = static_cast<SigmaSchedule>(io::get_u32(is));
  spec.t_end = io::get_f64(is);
  spec.n_steps = io::get_u64(is);
  RandomStream unused(0);
  ClassifierModel m = make_classifier(spec, unused);
  if (m.sde.drift.layer_dims() != dims) throw FormatError("checkpoint: inconsistent layer dims");
  Eigen::VectorXd flat(static_cast<Eigen::Index>(m.param_count()));
  Eigen::Index o = 0;
  for (int b = 0; b < 3; ++b) {
    const Eigen::VectorXd blob = read_param_blob(is);
    if (o + blob.size() > flat.size()) throw FormatError("checkpoint: parameter blob too long");
    flat.segment(o, blob.size()) = blob;
    o += blob.size();
  }
  if (o != flat.size()) throw FormatError("checkpoint: parameter count mismatch");
  m.unpack(flat);
  return m;
}

inline void save_checkpoint(const std::string& path, const ClassifierModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_checkpoint(os, m);
}

inline ClassifierModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace nsde
