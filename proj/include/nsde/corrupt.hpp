#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "nsde/data.hpp"
#include "nsde/random.hpp"

namespace nsde {

enum class CorruptionKind { gaussian_noise, impulse_noise, blur, contrast, fog_like_additive };

inline constexpr std::array<CorruptionKind, 5> kAllCorruptions{
    CorruptionKind::gaussian_noise, CorruptionKind::impulse_noise, CorruptionKind::blur, CorruptionKind::contrast,
    CorruptionKind::fog_like_additive};

inline std::string_view to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::impulse_noise: return "impulse_noise";
    case CorruptionKind::blur: return "blur";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::fog_like_additive: return "fog_like_additive";
  }
  return "?";
}

inline CorruptionKind parse_corruption(std::string_view s) {
  for (auto k : kAllCorruptions) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown corruption kind '" + std::string(s) + "'");
}

struct CorruptionConfig {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;
};

// Kept byte-identical to assets/corruption_severity_v1.txt.
inline constexpr std::string_view kSeverityTableText =
    "# corruption severity table v1\n"
    "# kind              s1    s2    s3    s4    s5    transform\n"
    "gaussian_noise      0.04  0.08  0.12  0.18  0.26  x + N(0, s^2) per feature\n"
    "impulse_noise       0.01  0.02  0.04  0.07  0.10  fraction s of features set to range min or max\n"
    "blur                0.5   0.75  1.0   1.5   2.0   Gaussian kernel with sd s pixels, edge clamped\n"
    "contrast            0.4   0.5   0.6   0.7   0.8   m + (1 - s)(x - m), m = per-sample mean\n"
    "fog_like_additive   0.1   0.2   0.3   0.4   0.5   x + s * smooth random field in [0, 1]\n";

inline constexpr std::string_view kSeverityTableVersion = "corruption_severity_v1";

inline double severity_parameter(CorruptionKind kind, int severity) {
  static constexpr double table[5][5] = {
      {0.04, 0.08, 0.12, 0.18, 0.26},
      {0.01, 0.02, 0.04, 0.07, 0.10},
      {0.5, 0.75, 1.0, 1.5, 2.0},
      {0.4, 0.5, 0.6, 0.7, 0.8},
      {0.1, 0.2, 0.3, 0.4, 0.5},
  };
  if (severity < 1 || severity > 5) throw std::invalid_argument("severity must be in 1..5");
  return table[static_cast<int>(kind)][severity - 1];
}

namespace detail {

inline void blur_sample(Eigen::Ref<Eigen::VectorXd> x, int height, int width, double sd) {
  const int radius = static_cast<int>(std::ceil(3.0 * sd));
  std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    w[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sd * sd));
    total += w[static_cast<std::size_t>(k + radius)];
  }
  for (auto& v : w) v /= total;
  const auto at = [&](const Eigen::VectorXd& img, int r, int c) {
    r = std::clamp(r, 0, height - 1);
    c = std::clamp(c, 0, width - 1);
    return img(static_cast<Eigen::Index>(r) * width + c);
  };
  Eigen::VectorXd src = x;
  Eigen::VectorXd tmp(src.size());
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += w[static_cast<std::size_t>(k + radius)] * at(src, r, c + k);
      tmp(static_cast<Eigen::Index>(r) * width + c) = s;
    }
  }
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += w[static_cast<std::size_t>(k + radius)] * at(tmp, r + k, c);
      x(static_cast<Eigen::Index>(r) * width + c) = s;
    }
  }
}

}  // namespace detail

/// Applies one corruption to every sample. Sample i draws from
/// RandomStream(seed, 1000 * kind + severity).child(i), so the result is a pure
/// function of (dataset, cfg, seed). Non-image data is treated as a 1 x D image.
/// Outputs are clipped to the dataset's feature range when it is finite.
inline Dataset corrupt(const Dataset& data, const CorruptionConfig& cfg, std::uint64_t seed) {
  const double s = severity_parameter(cfg.kind, cfg.severity);
  Dataset out = data;
  const int dim = data.input_dim();
  const int height = data.image ? data.image->height : 1;
  const int width = data.image ? data.image->width : dim;
  if (height * width != dim) throw std::invalid_argument("corrupt: image shape does not match feature count");
  const bool bounded = std::isfinite(data.feature_lo) && std::isfinite(data.feature_hi);
  const double lo = bounded ? data.feature_lo : (data.size() ? data.features.minCoeff() : 0.0);
  const double hi = bounded ? data.feature_hi : (data.size() ? data.features.maxCoeff() : 0.0);
  const RandomStream root(seed, 1000u * static_cast<std::uint64_t>(cfg.kind) + static_cast<std::uint64_t>(cfg.severity));

  for (std::size_t i = 0; i < data.size(); ++i) {
    RandomStream rs = root.child(i);
    Eigen::VectorXd x = data.sample(i);
    switch (cfg.kind) {
      case CorruptionKind::gaussian_noise:
        for (Eigen::Index j = 0; j < x.size(); ++j) x(j) += s * rs.gaussian();
        break;
      case CorruptionKind::impulse_noise:
        for (Eigen::Index j = 0; j < x.size(); ++j) {
          if (rs.uniform() <= s) x(j) = rs.uniform() <= 0.5 ? lo : hi;
        }
        break;
      case CorruptionKind::blur:
        detail::blur_sample(x, height, width, s);
        break;
      case CorruptionKind::contrast: {
        const double m = x.mean();
        x = (m + (1.0 - s) * (x.array() - m)).matrix();
        break;
      }
      case CorruptionKind::fog_like_additive: {
        // sum of two random low-frequency plane waves, rescaled to [0, 1]
        const double two_pi = 2.0 * std::numbers::pi;
        double fx[2], fy[2], phase[2];
        for (int w = 0; w < 2; ++w) {
          fx[w] = 0.5 + rs.uniform();
          fy[w] = 0.5 + rs.uniform();
          phase[w] = two_pi * rs.uniform();
        }
        for (int r = 0; r < height; ++r) {
          for (int c = 0; c < width; ++c) {
            double f = 0.0;
            for (int w = 0; w < 2; ++w) {
              f += std::sin(two_pi * (fx[w] * c / width + fy[w] * r / height) + phase[w]);
            }
            x(static_cast<Eigen::Index>(r) * width + c) += s * 0.25 * (f + 2.0);
          }
        }
        break;
      }
    }
    if (bounded) x = x.cwiseMax(lo).cwiseMin(hi);
    out.features.row(static_cast<Eigen::Index>(i)) = x.transpose();
  }
  return out;
}

}  // namespace nsde
