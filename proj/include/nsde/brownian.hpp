#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include <Eigen/Dense>

#include "nsde/random.hpp"

namespace nsde {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Uniform grid on [0, T] with N steps.
class TimeGrid {
 public:
  TimeGrid() = default;
  TimeGrid(double t_end, std::size_t n_steps) : t_end_(t_end), n_steps_(n_steps) {
    if (!(t_end > 0.0) || !std::isfinite(t_end)) throw std::invalid_argument("TimeGrid: T must be finite and > 0");
    if (n_steps == 0) throw std::invalid_argument("TimeGrid: N must be >= 1");
    dt_ = t_end / static_cast<double>(n_steps);
  }

  double t_start() const { return 0.0; }
  double t_end() const { return t_end_; }
  std::size_t n_steps() const { return n_steps_; }
  double dt() const { return dt_; }
  double time(std::size_t k) const { return static_cast<double>(k) * dt_; }

  friend bool operator==(const TimeGrid&, const TimeGrid&) = default;

 private:
  double t_end_ = 1.0;
  std::size_t n_steps_ = 1;
  double dt_ = 1.0;
};

inline TimeGrid make_time_grid(double t_end, long long n_steps) {
  if (n_steps <= 0) throw std::invalid_argument("make_time_grid: N must be >= 1");
  return TimeGrid(t_end, static_cast<std::size_t>(n_steps));
}

/// Brownian increments: row k holds B(t_{k+1}) - B(t_k).
struct BrownianPath {
  TimeGrid grid;
  RowMatrix increments;

  int dim() const { return static_cast<int>(increments.cols()); }

  auto step(std::size_t k) const { return increments.row(static_cast<Eigen::Index>(k)).transpose(); }

  /// Positions B(t_k) for k = 0..N (row 0 is zero).
  RowMatrix positions() const {
    RowMatrix pos = RowMatrix::Zero(increments.rows() + 1, increments.cols());
    for (Eigen::Index k = 0; k < increments.rows(); ++k) pos.row(k + 1) = pos.row(k) + increments.row(k);
    return pos;
  }
};

/// Pure function of (stream, grid, m): reads from the stream's current counter
/// without advancing it. Entry (k, j) uses counter offset k*m + j.
inline BrownianPath sample_brownian_path(const RandomStream& stream, const TimeGrid& grid, int m) {
  if (m < 1) throw std::invalid_argument("sample_brownian_path: dimension must be >= 1");
  const auto n = static_cast<Eigen::Index>(grid.n_steps());
  const double scale = std::sqrt(grid.dt());
  BrownianPath path{grid, RowMatrix(n, m)};
  std::uint64_t c = stream.counter();
  for (Eigen::Index k = 0; k < n; ++k) {
    for (Eigen::Index j = 0; j < m; ++j) path.increments(k, j) = scale * stream.gaussian_at(c++);
  }
  return path;
}

inline BrownianPath zero_brownian_path(const TimeGrid& grid, int m) {
  if (m < 1) throw std::invalid_argument("zero_brownian_path: dimension must be >= 1");
  return BrownianPath{grid, RowMatrix::Zero(static_cast<Eigen::Index>(grid.n_steps()), m)};
}

}  // namespace nsde
