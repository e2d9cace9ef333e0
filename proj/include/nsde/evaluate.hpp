#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "nsde/attack.hpp"
#include "nsde/corrupt.hpp"
#include "nsde/data.hpp"
#include "nsde/model.hpp"
#include "nsde/parallel.hpp"
#include "nsde/random.hpp"
#include "nsde/stability.hpp"

namespace nsde {

struct CorruptionCell {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;
  double accuracy = 0.0;
};

struct Metrics {
  double accuracy_top1 = 0.0;
  std::map<int, double> per_severity;  // accuracy averaged over kinds
  double m_acc = 0.0;                  // mean over every (kind, severity) cell
  std::vector<CorruptionCell> cells;
  std::size_t dropped_passes = 0;
};

/// Top-1 accuracy of test-time averaged predictions. Sample i uses
/// opts.stream.child(i) as its prediction stream.
inline Metrics evaluate(const ClassifierModel& model, const Dataset& data, const PredictOptions& opts, Exec exec = {}) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<int> hit(data.size(), 0), dropped(data.size(), 0);
  parallel_for(data.size(), exec, [&](std::size_t i) {
    PredictOptions o = opts;
    o.stream = opts.stream.child(i);
    const auto pred = predict_ttn(model, data.sample(i), o);
    hit[i] = pred.label == data.labels[i] ? 1 : 0;
    dropped[i] = pred.dropped;
  });
  Metrics m;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    correct += static_cast<std::size_t>(hit[i]);
    m.dropped_passes += static_cast<std::size_t>(dropped[i]);
  }
  m.accuracy_top1 = static_cast<double>(correct) / static_cast<double>(data.size());
  return m;
}

/// Clean accuracy plus accuracy on every (kind, severity) corruption of `data`.
inline Metrics evaluate_corruptions(const ClassifierModel& model, const Dataset& data,
                                    std::span<const CorruptionKind> kinds, std::uint64_t corruption_seed,
                                    const PredictOptions& opts, Exec exec = {}) {
  if (kinds.empty()) throw std::invalid_argument("evaluate_corruptions: no corruption kinds");
  Metrics m = evaluate(model, data, opts, exec);
  double total = 0.0;
  for (int s = 1; s <= 5; ++s) {
    double level = 0.0;
    for (auto kind : kinds) {
      const auto corrupted = corrupt(data, CorruptionConfig{kind, s}, corruption_seed);
      const auto r = evaluate(model, corrupted, opts, exec);
      m.cells.push_back({kind, s, r.accuracy_top1});
      m.dropped_passes += r.dropped_passes;
      level += r.accuracy_top1;
    }
    m.per_severity[s] = level / static_cast<double>(kinds.size());
    total += level;
  }
  m.m_acc = total / static_cast<double>(5 * kinds.size());
  return m;
}

struct RobustnessPoint {
  double epsilon = 0.0;
  double accuracy = 0.0;
  int skipped_steps = 0;
};

/// Accuracy under PGD for each budget. Sample i is attacked with stream
/// attack_stream.child(i) and evaluated with opts.stream.child(i), so the
/// epsilon = 0 point equals the clean accuracy.
inline std::vector<RobustnessPoint> robustness_curve(const ClassifierModel& model, const Dataset& data,
                                                     std::span<const double> epsilons, AttackConfig attack,
                                                     bool step_from_budget, const RandomStream& attack_stream,
                                                     const PredictOptions& opts, Exec exec = {}) {
  const FeatureRange range{data.feature_lo, data.feature_hi};
  std::vector<RobustnessPoint> out;
  for (double eps : epsilons) {
    AttackConfig cfg = attack;
    cfg.epsilon = eps;
    if (step_from_budget) cfg.step_size = 2.5 * eps / cfg.steps;
    std::vector<int> hit(data.size(), 0), skipped(data.size(), 0);
    parallel_for(data.size(), exec, [&](std::size_t i) {
      AttackReport rep;
      const auto x = data.sample(i);
      const auto adv = pgd_attack(model, x, data.labels[i], cfg, attack_stream.child(i), range, &rep);
      PredictOptions o = opts;
      o.stream = opts.stream.child(i);
      hit[i] = predict_ttn(model, adv, o).label == data.labels[i] ? 1 : 0;
      skipped[i] = rep.skipped_steps;
    });
    RobustnessPoint p{eps, 0.0, 0};
    for (std::size_t i = 0; i < data.size(); ++i) {
      p.accuracy += hit[i];
      p.skipped_steps += skipped[i];
    }
    p.accuracy /= static_cast<double>(data.size());
    out.push_back(p);
  }
  return out;
}

/// Hidden-state perturbation along depth between a clean input and its
/// adversarial counterpart: both are encoded, then integrated on the same path.
inline PerturbationTrace depth_probe(const ClassifierModel& model, const Eigen::VectorXd& x,
                                     const Eigen::VectorXd& x_adv, const RandomStream& stream,
                                     std::size_t record_every = 1) {
  const Eigen::VectorXd h0 = model.encoder(x);
  const Eigen::VectorXd eps0 = model.encoder(x_adv) - h0;
  const int n = model.state_dim();
  const auto path = model.sde.diffusion.kind == DiffusionKind::zero
                        ? zero_brownian_path(model.grid, n)
                        : sample_brownian_path(stream, model.grid, n);
  return perturbation_trace(model.sde, h0, eps0, model.grid, path, record_every);
}

}  // namespace nsde
