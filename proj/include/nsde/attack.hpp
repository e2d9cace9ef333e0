#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "nsde/model.hpp"
#include "nsde/random.hpp"

namespace nsde {

enum class AttackNorm { linf, l2 };

inline std::string_view to_string(AttackNorm n) { return n == AttackNorm::linf ? "linf" : "l2"; }

inline AttackNorm parse_attack_norm(std::string_view s) {
  if (s == "linf") return AttackNorm::linf;
  if (s == "l2") return AttackNorm::l2;
  throw std::invalid_argument("unknown attack norm '" + std::string(s) + "'");
}

struct AttackConfig {
  AttackNorm norm = AttackNorm::linf;
  double epsilon = 0.0;
  int steps = 20;
  double step_size = 0.0;
  std::size_t grad_paths = 8;  // paths averaged per gradient; ignored by the ODE

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("AttackConfig: epsilon must be >= 0");
    if (steps < 1) throw std::invalid_argument("AttackConfig: steps must be >= 1");
    if (!(step_size >= 0.0)) throw std::invalid_argument("AttackConfig: step_size must be >= 0");
    if (grad_paths < 1) throw std::invalid_argument("AttackConfig: grad_paths must be >= 1");
  }
};

struct FeatureRange {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

struct AttackReport {
  int skipped_steps = 0;  // steps with an all-zero gradient
};

/// Projected gradient ascent on the cross-entropy inside the epsilon ball
/// around x. Step s averages the input gradient over grad_paths paths keyed
/// by stream.child(s).child(j); the direction is sign(g) for linf and g / |g|
/// for l2. Every iterate is projected onto the ball and clipped to `range`.
inline Eigen::VectorXd pgd_attack(const ClassifierModel& model, const Eigen::VectorXd& x, int label,
                                  const AttackConfig& cfg, const RandomStream& stream, FeatureRange range = {},
                                  AttackReport* report = nullptr) {
  cfg.validate();
  Eigen::VectorXd adv = x;
  if (cfg.epsilon == 0.0) return adv;
  for (int s = 0; s < cfg.steps; ++s) {
    const Eigen::VectorXd g =
        input_gradient(model, adv, label, cfg.grad_paths, stream.child(static_cast<std::uint64_t>(s)));
    Eigen::VectorXd dir;
    if (cfg.norm == AttackNorm::linf) {
      dir = g.array().sign().matrix();
      if (dir.isZero(0.0)) {
        if (report) ++report->skipped_steps;
        continue;
      }
    } else {
      const double gn = g.norm();
      if (gn == 0.0) {
        if (report) ++report->skipped_steps;
        continue;
      }
      dir = g / gn;
    }
    adv += cfg.step_size * dir;
    Eigen::VectorXd delta = adv - x;
    if (cfg.norm == AttackNorm::linf) {
      delta = delta.cwiseMax(-cfg.epsilon).cwiseMin(cfg.epsilon);
    } else {
      const double dn = delta.norm();
      if (dn > cfg.epsilon) delta *= cfg.epsilon / dn;
    }
    adv = (x + delta).cwiseMax(range.lo).cwiseMin(range.hi);
  }
  return adv;
}

inline double perturbation_size(const Eigen::VectorXd& delta, AttackNorm norm) {
  return norm == AttackNorm::linf ? delta.cwiseAbs().maxCoeff() : delta.norm();
}

}  // namespace nsde
