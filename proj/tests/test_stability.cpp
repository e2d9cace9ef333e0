#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "nsde/stability.hpp"

using namespace nsde;

namespace {

Dynamics scalar_linear(double a, DiffusionSpec d) { return {DriftNet::linear(Eigen::MatrixXd::Constant(1, 1, a)), d}; }

Eigen::VectorXd vec1(double x) { return Eigen::VectorXd::Constant(1, x); }

Dynamics tanh_dynamics(int n, DiffusionSpec d, std::uint64_t seed, double gain = 1.0) {
  auto net = DriftNet::mlp(n, {8}, Activation::tanh);
  RandomStream s(seed);
  net.init_params(s);
  net.params() *= gain;
  return {net, d};
}

LyapunovOptions with_paths(std::size_t n) {
  LyapunovOptions o;
  o.n_paths = n;
  return o;
}

LyapunovOptions window_opts(double lo, double hi) {
  LyapunovOptions o;
  o.fit_window = FitWindow{lo, hi};
  return o;
}

// Fine path on n_fine steps summed into blocks of `factor` steps.
BrownianPath coarsen(const BrownianPath& fine, std::size_t factor) {
  const auto grid = make_time_grid(fine.grid.t_end(), static_cast<long long>(fine.grid.n_steps() / factor));
  BrownianPath out{grid, RowMatrix::Zero(static_cast<Eigen::Index>(grid.n_steps()), fine.dim())};
  for (Eigen::Index k = 0; k < fine.increments.rows(); ++k) {
    out.increments.row(k / static_cast<Eigen::Index>(factor)) += fine.increments.row(k);
  }
  return out;
}

}  // namespace

TEST(PerturbationTrace, ZeroPerturbationStaysExactlyZero) {
  const auto grid = make_time_grid(2.0, 400);
  for (auto d : {DiffusionSpec::zero(), DiffusionSpec::additive(0.5), DiffusionSpec::multiplicative(1.5),
                 DiffusionSpec::dropout(0.7)}) {
    const auto dyn = tanh_dynamics(3, d, 11);
    const auto path = sample_brownian_path(RandomStream(2), grid, 3);
    const Eigen::Vector3d h0(0.4, -0.2, 0.9);
    const auto trace = perturbation_trace(dyn, h0, Eigen::VectorXd::Zero(3), grid, path);
    for (double e : trace.eps_norms) ASSERT_EQ(e, 0.0);
    for (const auto& e : integrate_perturbation(dyn, h0, Eigen::VectorXd::Zero(3), grid, path)) {
      ASSERT_EQ(e.norm(), 0.0);
    }
  }
}

TEST(PerturbationTrace, LinearOdeGrowsExponentially) {
  const auto grid = make_time_grid(1.0, 1000);
  const double delta = 1e-3;
  const auto trace =
      perturbation_trace(scalar_linear(1.0, DiffusionSpec::zero()), vec1(0.5), vec1(delta), grid, zero_brownian_path(grid, 1));
  ASSERT_EQ(trace.times.size(), 1001u);
  for (std::size_t i = 0; i < trace.times.size(); ++i) {
    const double expected = delta * std::exp(trace.times[i]);
    ASSERT_NEAR(trace.eps_norms[i], expected, grid.dt() * expected);
  }
}

TEST(PerturbationTrace, NormsNonNegativeAndLogsFinite) {
  const auto grid = make_time_grid(1.0, 200);
  const auto trace = perturbation_trace(tanh_dynamics(2, DiffusionSpec::dropout(0.5), 3), Eigen::Vector2d(0.1, 0.2),
                                        Eigen::Vector2d(1e-3, 0), grid, sample_brownian_path(RandomStream(4), grid, 2), 7);
  EXPECT_EQ(trace.times.back(), 1.0);
  for (std::size_t i = 0; i < trace.eps_norms.size(); ++i) {
    EXPECT_GE(trace.eps_norms[i], 0.0);
    if (trace.eps_norms[i] > 0) {
      EXPECT_TRUE(std::isfinite(trace.log_norms[i]));
    }
  }
}

TEST(PerturbationTrace, OverflowIsFlaggedNotThrown) {
  const auto grid = make_time_grid(10.0, 10);
  const auto trace = perturbation_trace(scalar_linear(1e300, DiffusionSpec::zero()), vec1(1.0), vec1(1.0), grid,
                                        zero_brownian_path(grid, 1));
  EXPECT_TRUE(trace.overflowed);
  EXPECT_EQ(trace.overflow_step, 1u);
}

// Strict bit-equality is not achievable in floating point (the acceptance
// binary reports the exact count); here the two agree to rounding.
TEST(PerturbationDirect, MatchesCoupledDifferenceToRounding) {
  const auto grid = make_time_grid(1.0, 100);
  RandomStream cfg(77);
  for (int trial = 0; trial < 10; ++trial) {
    for (auto kind : {DiffusionKind::zero, DiffusionKind::additive, DiffusionKind::multiplicative,
                      DiffusionKind::dropout}) {
      const auto dyn = tanh_dynamics(3, DiffusionSpec::make(kind, 0.5), 100 + trial);
      const Eigen::Vector3d h0(cfg.gaussian(), cfg.gaussian(), cfg.gaussian());
      const Eigen::Vector3d eps0 = 1e-2 * Eigen::Vector3d(cfg.gaussian(), cfg.gaussian(), cfg.gaussian());
      const auto path = sample_brownian_path(cfg.child(static_cast<std::uint64_t>(trial)), grid, 3);
      const auto direct = integrate_perturbation(dyn, h0, eps0, grid, path);
      const auto [a, b] = integrate_coupled(dyn, h0, Eigen::VectorXd(h0 + eps0), grid, path, SolveOptions::every(1));
      ASSERT_EQ(direct.size(), a.states.size());
      for (std::size_t k = 0; k < direct.size(); ++k) {
        const Eigen::VectorXd coupled = b.states[k] - a.states[k];
        ASSERT_LT((direct[k] - coupled).norm(), 1e-12) << "trial " << trial << " step " << k;
      }
    }
  }
}

TEST(PerturbationTrace, NeverReachesZeroUnderStateDependentNoise) {
  const auto grid = make_time_grid(10.0, 10000);
  for (auto d : {DiffusionSpec::multiplicative(2.0), DiffusionSpec::dropout(1.0)}) {
    const auto dyn = d.kind == DiffusionKind::multiplicative ? scalar_linear(1.0, d) : tanh_dynamics(1, d, 5);
    for (std::uint64_t j = 0; j < 64; ++j) {
      const auto path = sample_brownian_path(RandomStream(31, 0).child(j), grid, 1);
      const auto trace = perturbation_trace(dyn, vec1(0.5), vec1(1e-3), grid, path);
      ASSERT_FALSE(trace.overflowed);
      ASSERT_GT(*std::min_element(trace.eps_norms.begin(), trace.eps_norms.end()), 0.0) << "path " << j;
    }
  }
}

TEST(LsSlope, ExactLine) {
  const std::vector<double> t{0, 1, 2, 3}, y{1, 3.5, 6, 8.5};
  EXPECT_DOUBLE_EQ(ls_slope(t, y), 2.5);
}

TEST(Lyapunov, OdeUnitRate) {
  const auto grid = make_time_grid(10.0, 10000);
  const auto est = lyapunov_exponent(scalar_linear(1.0, DiffusionSpec::zero()), vec1(1.0), vec1(1.0), grid,
                                     RandomStream(1), with_paths(4));
  EXPECT_NEAR(est.lambda_hat, 1.0, 0.02);
  EXPECT_EQ(est.std_error, 0.0);
  EXPECT_DOUBLE_EQ(est.fit_window.t_lo, 2.0);
  EXPECT_DOUBLE_EQ(est.fit_window.t_hi, 10.0);
}

TEST(Lyapunov, StrongMultiplicativeNoiseStabilises) {
  const auto grid = make_time_grid(10.0, 10000);
  const auto est = lyapunov_exponent(scalar_linear(1.0, DiffusionSpec::multiplicative(2.8)), vec1(1.0), vec1(1.0), grid,
                                     RandomStream(2024), with_paths(64));
  EXPECT_NEAR(est.lambda_hat, 1.0 - 2.8 * 2.8 / 2.0, 0.15);
  EXPECT_EQ(est.n_overflowed, 0u);
  EXPECT_GT(est.std_error, 0.0);
}

TEST(Lyapunov, AdditiveNoiseLeavesPerturbationUnchanged) {
  const auto grid = make_time_grid(10.0, 1000);
  const auto still = lyapunov_exponent(scalar_linear(0.0, DiffusionSpec::additive(1.0)), vec1(0.0), vec1(1e-3), grid,
                                       RandomStream(3), with_paths(8));
  EXPECT_NEAR(still.lambda_hat, 0.0, 1e-9);
  const auto ode = lyapunov_exponent(scalar_linear(0.5, DiffusionSpec::zero()), vec1(0.2), vec1(1e-3), grid,
                                     RandomStream(3), with_paths(8));
  const auto add = lyapunov_exponent(scalar_linear(0.5, DiffusionSpec::additive(0.8)), vec1(0.2), vec1(1e-3), grid,
                                     RandomStream(3), with_paths(8));
  EXPECT_NEAR(add.lambda_hat, ode.lambda_hat, 1e-6);
}

TEST(Lyapunov, AllPathsOverflowGivesInfinity) {
  const auto grid = make_time_grid(10.0, 10);
  const auto est = lyapunov_exponent(scalar_linear(1e300, DiffusionSpec::zero()), vec1(1.0), vec1(1.0), grid,
                                     RandomStream(1), with_paths(3));
  EXPECT_TRUE(est.overflow);
  EXPECT_TRUE(std::isinf(est.lambda_hat));
  EXPECT_EQ(est.n_overflowed, 3u);
}

TEST(Lyapunov, RejectsBadOptions) {
  const auto grid = make_time_grid(1.0, 10);
  const auto dyn = scalar_linear(1.0, DiffusionSpec::zero());
  EXPECT_THROW(lyapunov_exponent(dyn, vec1(1), vec1(1), grid, RandomStream(1), with_paths(0)), std::invalid_argument);
  EXPECT_THROW(lyapunov_exponent(dyn, vec1(1), vec1(1), grid, RandomStream(1), window_opts(0.5, 2.0)),
               std::invalid_argument);
}

TEST(GbmClosedForm, Examples) {
  const auto grid = make_time_grid(1.0, 10);
  const auto still = gbm_closed_form(2.0, 1.0, 0.0, grid, sample_brownian_path(RandomStream(1), grid, 1));
  for (std::size_t k = 0; k <= 10; ++k) EXPECT_DOUBLE_EQ(still.states[k](0), 2.0 * std::exp(grid.time(k)));
  const auto flat = gbm_closed_form(3.0, 1.0, 2.0, grid, zero_brownian_path(grid, 1));
  EXPECT_DOUBLE_EQ(flat.final_state()(0), 3.0 * std::exp(-1.0));
}

TEST(GbmClosedForm, EulerMaruyamaCloseAtFineStep) {
  const auto grid = make_time_grid(1.0, 10000);
  const auto dyn = scalar_linear(1.0, DiffusionSpec::multiplicative(1.0));
  double worst_mean = 0.0;
  for (std::uint64_t j = 0; j < 20; ++j) {
    const auto path = sample_brownian_path(RandomStream(8).child(j), grid, 1);
    const auto em = integrate(dyn, vec1(1.0), grid, path, SolveOptions::every(1));
    const auto exact = gbm_closed_form(1.0, 1.0, 1.0, grid, path);
    double worst = 0.0;
    for (std::size_t k = 0; k <= grid.n_steps(); ++k) {
      worst = std::max(worst, std::abs(em.states[k](0) / exact.states[k](0) - 1.0));
    }
    worst_mean += worst / 20.0;
  }
  EXPECT_LT(worst_mean, 0.01);
}

// Strong order 1/2: quartering dt halves the mean terminal error (band x1.5).
TEST(GbmClosedForm, StrongOrderOneHalf) {
  const std::size_t fine = 1u << 14;
  const auto fine_grid = make_time_grid(1.0, static_cast<long long>(fine));
  const auto dyn = scalar_linear(1.0, DiffusionSpec::multiplicative(1.0));
  std::vector<double> errors;
  for (std::size_t factor : {256u, 64u, 16u, 4u}) {
    double err = 0.0;
    const int n_paths = 200;
    for (int j = 0; j < n_paths; ++j) {
      const auto path = coarsen(sample_brownian_path(RandomStream(12).child(static_cast<std::uint64_t>(j)), fine_grid, 1), factor);
      const double em = integrate(dyn, vec1(1.0), path.grid, path).final_state()(0);
      err += std::abs(em - gbm_closed_form(1.0, 1.0, 1.0, path.grid, path).final_state()(0)) / n_paths;
    }
    errors.push_back(err);
  }
  for (std::size_t i = 0; i + 1 < errors.size(); ++i) {
    const double ratio = errors[i] / errors[i + 1];
    EXPECT_GT(ratio, 2.0 / 1.5) << "level " << i;
    EXPECT_LT(ratio, 2.0 * 1.5) << "level " << i;
  }
}

TEST(CorollaryBound, Examples) {
  const auto strong = corollary_bound(1.0, 2.8);
  EXPECT_NEAR(strong.bound, -2.92, 1e-12);
  EXPECT_TRUE(strong.stable);
  EXPECT_EQ(strong.p, 2.0);
  EXPECT_EQ(strong.c1, 1.0);
  EXPECT_DOUBLE_EQ(strong.c2, 2.0 + 2.8 * 2.8);
  EXPECT_DOUBLE_EQ(strong.c3, 4.0 * 2.8 * 2.8);
  const auto edge = corollary_bound(1.0, std::sqrt(2.0));
  EXPECT_NEAR(edge.bound, 0.0, 1e-15);
  const auto ode = corollary_bound(1.0, 0.0);
  EXPECT_EQ(ode.bound, 1.0);
  EXPECT_FALSE(ode.stable);
  EXPECT_THROW(corollary_bound(-1.0, 1.0), std::invalid_argument);
}

TEST(CorollaryBound, BoundIsLMinusHalfSigmaSquared) {
  for (double l : {0.0, 0.3, 1.0, 4.0}) {
    for (double s : {0.0, 0.5, 1.0, 2.0, 3.0}) {
      const auto c = corollary_bound(l, s);
      EXPECT_NEAR(c.bound, l - s * s / 2, 1e-12);
      EXPECT_EQ(c.stable, s * s > 2 * l);
    }
  }
}

TEST(StabilitySweep, LinearDriftFollowsClosedFormAndCrossesAtRootTwo) {
  const std::vector<double> sigmas{0, 0.5, 1, 1.2, 1.5, 2, 2.8};
  const auto grid = make_time_grid(10.0, 10000);
  const auto rows = stability_sweep([](double s) { return scalar_linear(1.0, DiffusionSpec::multiplicative(s)); }, sigmas,
                                    1.0, vec1(1.0), vec1(1.0), grid, RandomStream(2024));
  ASSERT_EQ(rows.size(), sigmas.size());
  for (const auto& r : rows) {
    EXPECT_NEAR(r.lambda_hat, 1.0 - r.sigma * r.sigma / 2, 0.15) << "sigma " << r.sigma;
    EXPECT_DOUBLE_EQ(r.bound, corollary_bound(1.0, r.sigma).bound);
  }
  const auto crossing = zero_crossing(rows);
  ASSERT_TRUE(crossing.has_value());
  EXPECT_GE(*crossing, 1.31);
  EXPECT_LE(*crossing, 1.52);
}

TEST(StabilitySweep, TanhDriftStaysBelowCertificate) {
  const int n = 3;
  const auto base = tanh_dynamics(n, DiffusionSpec::zero(), 41);
  RandomStream s(5);
  std::vector<Eigen::VectorXd> states;
  for (int i = 0; i < 200; ++i) states.push_back(Eigen::Vector3d(s.gaussian(), s.gaussian(), s.gaussian()) * 2.0);
  states.push_back(Eigen::VectorXd::Zero(n));
  const double l_hat = lipschitz_estimate(base.drift, states, 0.0, 1.0);
  const std::vector<double> sigmas{std::sqrt(2 * l_hat) + 0.2, std::sqrt(2 * l_hat) + 0.5};
  const auto grid = make_time_grid(5.0, 5000);
  const auto rows = stability_sweep(
      [&](double sig) { return Dynamics{base.drift, DiffusionSpec::multiplicative(sig)}; }, sigmas, l_hat,
      Eigen::Vector3d(0.3, -0.1, 0.2), Eigen::Vector3d(1e-3, 1e-3, 0), grid, RandomStream(6), with_paths(16));
  for (const auto& r : rows) {
    ASSERT_TRUE(r.stable);
    EXPECT_LE(r.lambda_hat, -(r.sigma * r.sigma / 2 - l_hat) + 0.2) << "sigma " << r.sigma;
  }
}

TEST(StabilitySweep, ZeroCrossingInterpolates) {
  const std::vector<SweepRow> rows{{.sigma = 1.0, .lambda_hat = 0.5}, {.sigma = 2.0, .lambda_hat = -1.5}};
  EXPECT_DOUBLE_EQ(*zero_crossing(rows), 1.25);
  const std::vector<SweepRow> never{{.sigma = 1.0, .lambda_hat = 0.5}, {.sigma = 2.0, .lambda_hat = 0.1}};
  EXPECT_FALSE(zero_crossing(never).has_value());
}

TEST(StabilitySweep, CsvHeader) {
  std::ostringstream os;
  const std::vector<SweepRow> rows{{.sigma = 1.5, .lambda_hat = -0.125, .std_error = 0.25, .bound = -0.125, .stable = true}};
  write_sweep_csv(os, rows);
  EXPECT_EQ(os.str(), "sigma,lambda_hat,stderr,bound,stable,overflow_fraction\n1.5,-0.125,0.25,-0.125,1,0\n");
}
