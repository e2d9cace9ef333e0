#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nsde/brownian.hpp"
#include "nsde/random.hpp"

namespace nsde {

enum class Split { train, test };

struct ImageShape {
  int height = 0;
  int width = 0;
};

struct Dataset {
  RowMatrix features;  // n_samples x input_dim
  std::vector<int> labels;
  int n_classes = 2;
  Split split = Split::train;
  std::optional<ImageShape> image;
  double feature_lo = -std::numeric_limits<double>::infinity();
  double feature_hi = std::numeric_limits<double>::infinity();

  std::size_t size() const { return labels.size(); }
  int input_dim() const { return static_cast<int>(features.cols()); }
  Eigen::VectorXd sample(std::size_t i) const { return features.row(static_cast<Eigen::Index>(i)).transpose(); }
  std::vector<Eigen::VectorXd> samples() const {
    std::vector<Eigen::VectorXd> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(sample(i));
    return out;
  }

  /// First `n` samples (or all, when n exceeds the size).
  Dataset head(std::size_t n) const {
    Dataset d = *this;
    n = std::min(n, size());
    d.features = features.topRows(static_cast<Eigen::Index>(n));
    d.labels.resize(n);
    return d;
  }

  /// `n` samples at evenly spaced indices floor(i * size / n), in order.
  Dataset spread(std::size_t n) const {
    if (n >= size()) return *this;
    Dataset d = *this;
    d.features.resize(static_cast<Eigen::Index>(n), features.cols());
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t src = i * size() / n;
      d.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(src));
      d.labels[i] = labels[src];
    }
    return d;
  }
};

/// Two interleaving half circles of radius 1: class 0 is (cos s, sin s),
/// class 1 is (1 - cos s, 1 - sin s - 0.5), s evenly spaced on [0, pi], plus
/// N(0, noise_sd^2) jitter. Samples alternate classes.
inline Dataset make_two_moons(std::size_t n, double noise_sd, std::uint64_t seed, Split split = Split::train) {
  if (n < 2 || n % 2 != 0) throw std::invalid_argument("make_two_moons: n must be even and >= 2");
  if (!(noise_sd >= 0.0)) throw std::invalid_argument("make_two_moons: noise_sd must be >= 0");
  const std::size_t half = n / 2;
  Dataset d;
  d.split = split;
  d.features.resize(static_cast<Eigen::Index>(n), 2);
  d.labels.resize(n);
  RandomStream noise(seed, 0x6d6f6f6e);
  for (std::size_t i = 0; i < half; ++i) {
    const double s = half == 1 ? 0.0 : std::numbers::pi * static_cast<double>(i) / static_cast<double>(half - 1);
    const auto r0 = static_cast<Eigen::Index>(2 * i), r1 = r0 + 1;
    d.features(r0, 0) = std::cos(s);
    d.features(r0, 1) = std::sin(s);
    d.features(r1, 0) = 1.0 - std::cos(s);
    d.features(r1, 1) = 1.0 - std::sin(s) - 0.5;
    d.labels[2 * i] = 0;
    d.labels[2 * i + 1] = 1;
  }
  if (noise_sd > 0.0) {
    for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
      for (Eigen::Index j = 0; j < 2; ++j) d.features(i, j) += noise_sd * noise.gaussian();
    }
  }
  return d;
}

/// Two interleaved spirals: r = u, angle = turns * 2 pi u + class * pi, with u
/// evenly spaced on (0, 1], plus N(0, noise_sd^2) jitter.
inline Dataset make_spirals(std::size_t n, double turns, double noise_sd, std::uint64_t seed,
                            Split split = Split::train) {
  if (n < 2 || n % 2 != 0) throw std::invalid_argument("make_spirals: n must be even and >= 2");
  if (!(turns > 0.0) || !(noise_sd >= 0.0)) throw std::invalid_argument("make_spirals: bad turns or noise");
  const std::size_t half = n / 2;
  Dataset d;
  d.split = split;
  d.features.resize(static_cast<Eigen::Index>(n), 2);
  d.labels.resize(n);
  RandomStream noise(seed, 0x7370697261);
  for (std::size_t i = 0; i < half; ++i) {
    const double u = static_cast<double>(i + 1) / static_cast<double>(half);
    for (int c = 0; c < 2; ++c) {
      const double angle = turns * 2.0 * std::numbers::pi * u + c * std::numbers::pi;
      const auto r = static_cast<Eigen::Index>(2 * i + static_cast<std::size_t>(c));
      d.features(r, 0) = u * std::cos(angle);
      d.features(r, 1) = u * std::sin(angle);
      d.labels[static_cast<std::size_t>(r)] = c;
    }
  }
  if (noise_sd > 0.0) {
    for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
      for (Eigen::Index j = 0; j < 2; ++j) d.features(i, j) += noise_sd * noise.gaussian();
    }
  }
  return d;
}

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IdxError(IdxError::Kind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at, const std::string& path) {
  if (at + 4 > b.size()) throw IdxError(IdxError::Kind::truncated, path + ": truncated header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace detail

/// IDX image/label pair (big-endian; images magic 0x00000803, labels 0x00000801,
/// unsigned bytes). Pixels are scaled by 1/255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, Split split = Split::train) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  const auto img_magic = detail::be32(img, 0, images_path);
  if (img_magic != 0x00000803u) throw IdxError(IdxError::Kind::bad_magic, images_path + ": bad magic");
  const auto lab_magic = detail::be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801u) throw IdxError(IdxError::Kind::bad_magic, labels_path + ": bad magic");
  const auto count = detail::be32(img, 4, images_path);
  const auto rows = detail::be32(img, 8, images_path);
  const auto cols = detail::be32(img, 12, images_path);
  const auto n_labels = detail::be32(lab, 4, labels_path);
  if (count != n_labels) {
    throw IdxError(IdxError::Kind::count_mismatch, "image count " + std::to_string(count) +
                                                       " differs from label count " + std::to_string(n_labels));
  }
  const std::size_t pixels = std::size_t{rows} * cols;
  if (img.size() < 16 + std::size_t{count} * pixels) throw IdxError(IdxError::Kind::truncated, images_path + ": truncated");
  if (lab.size() < 8 + std::size_t{count}) throw IdxError(IdxError::Kind::truncated, labels_path + ": truncated");
  Dataset d;
  d.split = split;
  d.image = ImageShape{static_cast<int>(rows), static_cast<int>(cols)};
  d.feature_lo = 0.0;
  d.feature_hi = 1.0;
  d.features.resize(count, static_cast<Eigen::Index>(pixels));
  d.labels.resize(count);
  int max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) {
      d.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = img[16 + i * pixels + p] / 255.0;
    }
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.n_classes = std::max(2, max_label + 1);
  return d;
}

}  // namespace nsde
