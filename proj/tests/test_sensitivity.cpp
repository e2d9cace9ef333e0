#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "nsde/sensitivity.hpp"
#include "oracles/unrolled.hpp"

using namespace nsde;

namespace {

Dynamics tanh_dynamics(int n, int hidden, DiffusionSpec d, std::uint64_t seed) {
  auto net = DriftNet::mlp(n, {hidden}, Activation::tanh);
  RandomStream s(seed);
  net.init_params(s);
  for (Eigen::Index i = 0; i < net.params().size(); ++i) net.params()(i) += 0.1 * s.gaussian();
  return {net, d};
}

oracle::Sde to_oracle(const Dynamics& dyn, const TimeGrid& grid, const BrownianPath& path) {
  oracle::Sde s;
  s.drift.dims = dyn.drift.layer_dims();
  s.drift.relu = dyn.drift.activation() == Activation::relu;
  s.drift.horizon = dyn.drift.horizon();
  s.drift.w.assign(dyn.drift.params().data(), dyn.drift.params().data() + dyn.drift.params().size());
  s.noise = static_cast<oracle::Noise>(static_cast<int>(dyn.diffusion.kind));
  s.sigma = dyn.diffusion.sigma;
  s.t_end = grid.t_end();
  s.n_steps = grid.n_steps();
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    const Eigen::VectorXd db = path.step(k);
    s.dB.emplace_back(db.data(), db.data() + db.size());
  }
  return s;
}

oracle::Vec to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

// f(h, t) = w h on a scalar state; parameter 0 is w, 1 the time weight, 2 the bias.
Dynamics scalar_linear(double w) { return {DriftNet::linear(Eigen::MatrixXd::Constant(1, 1, w)), DiffusionSpec::zero()}; }

Eigen::VectorXd vec1(double x) { return Eigen::VectorXd::Constant(1, x); }

}  // namespace

TEST(IntegrateAugmented, ScalarLinearSensitivity) {
  const auto grid = make_time_grid(1.0, 10000);
  const auto path = zero_brownian_path(grid, 1);
  const auto at_zero = integrate_augmented(scalar_linear(0.0), vec1(1.0), grid, path, false);
  EXPECT_EQ(at_zero.h(0), 1.0);
  EXPECT_LT(std::abs(at_zero.beta(0, 0) - 1.0), 3 * grid.dt());
  const double w = 0.5;
  const auto aug = integrate_augmented(scalar_linear(w), vec1(1.0), grid, path, true);
  const double analytic = std::exp(w);  // T h0 e^{wT}
  EXPECT_LT(std::abs(aug.beta(0, 0) - analytic), 3 * grid.dt());
  EXPECT_NEAR((*aug.alpha)(0, 0), std::exp(w), 3 * grid.dt());
  // bias sensitivity: d h_T / d b = (e^{wT} - 1) / w
  EXPECT_NEAR(aug.beta(0, 2), (std::exp(w) - 1) / w, 3 * grid.dt());
}

TEST(IntegrateAugmented, ForcingOnlyWhenParametersDoNotReachTheState) {
  // f = b (constant): beta_b grows as t, other columns stay zero
  DriftNet net({2, 1}, Activation::tanh);
  net.bias(0)(0) = 0.3;
  const auto grid = make_time_grid(2.0, 100);
  const auto aug = integrate_augmented({net, DiffusionSpec::zero()}, vec1(0.0), grid, zero_brownian_path(grid, 1), false);
  EXPECT_NEAR(aug.beta(0, 2), 2.0, 1e-12);
  EXPECT_NEAR(aug.beta(0, 0), 0.3 * 2.0 * 2.0 / 2.0, 0.02);  // integral of h_t = 0.3 t
}

TEST(IntegrateAugmented, EqualsUnrolledChainRuleForEveryVariant) {
  const auto grid = make_time_grid(1.0, 50);
  RandomStream cfg(123);
  for (auto kind : {DiffusionKind::zero, DiffusionKind::additive, DiffusionKind::multiplicative,
                    DiffusionKind::dropout}) {
    for (int trial = 0; trial < 3; ++trial) {
      const auto dyn = tanh_dynamics(3, 6, DiffusionSpec::make(kind, 0.5), 10 + static_cast<std::uint64_t>(trial));
      const Eigen::Vector3d h0(cfg.gaussian(), cfg.gaussian(), cfg.gaussian());
      const auto path = sample_brownian_path(cfg.child(static_cast<std::uint64_t>(trial)), grid, 3);
      const auto aug = integrate_augmented(dyn, h0, grid, path, true);
      const Eigen::Vector3d cot(0.7, -1.1, 0.4);
      const auto g = pathwise_gradient(cot, aug);

      const auto s = to_oracle(dyn, grid, path);
      const auto fw = oracle::sde_forward(s, to_vec(h0));
      const auto bw = oracle::sde_backward(s, fw, to_vec(cot));
      for (int i = 0; i < 3; ++i) ASSERT_NEAR(aug.h(i), fw.h.back()[static_cast<std::size_t>(i)], 1e-13);
      for (std::size_t c = 0; c < bw.grad_w.size(); ++c) {
        ASSERT_LT(relative_error(g.grad_w(static_cast<Eigen::Index>(c)), bw.grad_w[c], 1e-10), 1e-8)
            << to_string(kind) << " coordinate " << c;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        ASSERT_LT(relative_error((*g.grad_input)(static_cast<Eigen::Index>(c)), bw.grad_h0[c], 1e-10), 1e-8);
      }
    }
  }
}

TEST(PathwiseGradient, Examples) {
  AugmentedState aug;
  aug.h = Eigen::Vector2d(1, 2);
  aug.beta = Eigen::MatrixXd::Identity(2, 2);
  EXPECT_EQ(pathwise_gradient(Eigen::Vector2d::Zero(), aug).grad_w.norm(), 0.0);
  EXPECT_EQ(pathwise_gradient(Eigen::Vector2d(3, -4), aug).grad_w, Eigen::VectorXd(Eigen::Vector2d(3, -4)));
  EXPECT_FALSE(pathwise_gradient(Eigen::Vector2d(3, -4), aug).grad_input.has_value());
  EXPECT_THROW(pathwise_gradient(Eigen::Vector3d(1, 1, 1), aug), std::invalid_argument);
}

TEST(PathwiseGradient, HalfSquaredNormOnScalarSystem) {
  const auto grid = make_time_grid(1.0, 1000);
  const auto aug = integrate_augmented(scalar_linear(0.3), vec1(2.0), grid, zero_brownian_path(grid, 1), false);
  const auto loss = half_squared_norm_loss()(aug.h, 0);
  const auto g = pathwise_gradient(loss.grad, aug);
  EXPECT_DOUBLE_EQ(g.grad_w(0), aug.h(0) * aug.beta(0, 0));
}

TEST(PathwiseGradient, LinearInLossGradient) {
  const auto grid = make_time_grid(1.0, 40);
  const auto dyn = tanh_dynamics(2, 5, DiffusionSpec::dropout(0.4), 3);
  const auto aug = integrate_augmented(dyn, Eigen::Vector2d(0.2, -0.3), grid,
                                       sample_brownian_path(RandomStream(1), grid, 2), false);
  const Eigen::Vector2d lg(0.37, -1.9);
  EXPECT_EQ(pathwise_gradient(2.0 * lg, aug).grad_w, 2.0 * pathwise_gradient(lg, aug).grad_w);
}

TEST(McGradient, ZeroVariantIndependentOfPathCount) {
  const auto grid = make_time_grid(1.0, 30);
  const auto dyn = tanh_dynamics(2, 5, DiffusionSpec::zero(), 4);
  const std::vector<Eigen::VectorXd> h0s{Eigen::Vector2d(0.1, 0.2), Eigen::Vector2d(-0.5, 0.3)};
  const auto one = mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, 1, RandomStream(1));
  const auto five = mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, 5, RandomStream(2));
  EXPECT_EQ(one.grad_w, five.grad_w);
  EXPECT_EQ(one.loss_mean, five.loss_mean);
  EXPECT_EQ(five.n_paths, 5u);
}

TEST(McGradient, DeterministicForFixedKeyingAndThreadCount) {
  const auto grid = make_time_grid(1.0, 30);
  const auto dyn = tanh_dynamics(2, 5, DiffusionSpec::multiplicative(0.5), 4);
  std::vector<Eigen::VectorXd> h0s;
  for (int i = 0; i < 7; ++i) h0s.push_back(Eigen::Vector2d(0.1 * i, -0.2 * i));
  const auto a = mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, 9, RandomStream(5), Exec{1}, true);
  const auto b = mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, 9, RandomStream(5), Exec{1}, true);
  const auto c = mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, 9, RandomStream(5), Exec{4}, true);
  EXPECT_EQ(a.grad_w, b.grad_w);
  EXPECT_EQ(a.grad_w, c.grad_w);
  EXPECT_EQ(*a.grad_input, *c.grad_input);
  EXPECT_NE(a.grad_w, mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, 9, RandomStream(6)).grad_w);
  // the explicit path set reproduces the keyed draw
  const auto set = make_path_set(RandomStream(5), grid, 2, h0s.size(), 9);
  EXPECT_EQ(a.grad_w, mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, set).grad_w);
}

TEST(McGradient, MatchesCrnFiniteDifferences) {
  const auto grid = make_time_grid(1.0, 50);
  const std::vector<Eigen::VectorXd> h0s{Eigen::Vector3d(0.3, -0.2, 0.5), Eigen::Vector3d(-0.4, 0.1, 0.2)};
  for (auto kind : {DiffusionKind::additive, DiffusionKind::multiplicative, DiffusionKind::dropout}) {
    const auto dyn = tanh_dynamics(3, 6, DiffusionSpec::make(kind, 0.5), 8);
    const auto paths = make_path_set(RandomStream(9), grid, 3, h0s.size(), 256);
    const auto est = mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, paths);
    RandomStream pick(3);
    const auto coords = pick_coordinates(pick, dyn.drift.param_count(), 20);
    const auto fd = fd_gradient_oracle(dyn, grid, half_squared_norm_loss(), h0s, paths, 1e-4, coords);
    for (std::size_t c = 0; c < coords.size(); ++c) {
      EXPECT_LT(relative_error(est.grad_w(static_cast<Eigen::Index>(coords[c])), fd(static_cast<Eigen::Index>(c)), 1e-6),
                1e-3)
          << to_string(kind) << " coordinate " << coords[c];
    }
  }
}

// Independent paths on the two sides of the difference: Monte-Carlo noise
// swamps the signal, which is why the oracle reuses paths.
TEST(FdOracle, DifferentPathsAreANegativeControl) {
  const auto grid = make_time_grid(1.0, 50);
  const std::vector<Eigen::VectorXd> h0s{Eigen::Vector3d(0.3, -0.2, 0.5)};
  const auto dyn = tanh_dynamics(3, 6, DiffusionSpec::multiplicative(0.5), 8);
  const auto plus = make_path_set(RandomStream(1), grid, 3, 1, 64);
  const auto minus = make_path_set(RandomStream(2), grid, 3, 1, 64);
  const std::vector<std::size_t> coords{0, 5, 11};
  const auto crn = fd_gradient_oracle(dyn, grid, half_squared_norm_loss(), h0s, plus, 1e-4, coords);
  const auto indep = fd_gradient_oracle(dyn, grid, half_squared_norm_loss(), h0s, plus, minus, 1e-4, coords);
  const auto est = mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, plus);
  for (std::size_t c = 0; c < coords.size(); ++c) {
    const double truth = est.grad_w(static_cast<Eigen::Index>(coords[c]));
    EXPECT_LT(std::abs(crn(static_cast<Eigen::Index>(c)) - truth), 1e-6);
    EXPECT_GT(std::abs(indep(static_cast<Eigen::Index>(c)) - truth), 100 * std::abs(truth));
  }
}

TEST(FdOracle, ZeroDiffusionMatchesPathwise) {
  const auto grid = make_time_grid(1.0, 50);
  const auto dyn = tanh_dynamics(3, 6, DiffusionSpec::zero(), 12);
  const std::vector<Eigen::VectorXd> h0s{Eigen::Vector3d(0.3, -0.2, 0.5)};
  const auto paths = make_path_set(RandomStream(1), grid, 3, 1, 1);
  const auto est = mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, paths);
  std::vector<std::size_t> coords(dyn.drift.param_count());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  const double delta = 1e-4;
  const auto fd = fd_gradient_oracle(dyn, grid, half_squared_norm_loss(), h0s, paths, delta, coords);
  const double tol = std::max(1e-6, delta * delta * dyn.drift.params().norm());
  for (std::size_t c = 0; c < coords.size(); ++c) {
    EXPECT_NEAR(est.grad_w(static_cast<Eigen::Index>(c)), fd(static_cast<Eigen::Index>(c)), tol);
  }
}

TEST(FdOracle, QuadraticLossOnLinearScalarSystem) {
  const auto grid = make_time_grid(1.0, 100);
  const double w = 0.4, h0 = 1.5, dt = grid.dt();
  const double n = 100;
  const double h_t = std::pow(1 + w * dt, n) * h0;
  const double analytic = h_t * n * dt * std::pow(1 + w * dt, n - 1) * h0;
  const std::vector<Eigen::VectorXd> h0s{vec1(h0)};
  const auto paths = make_path_set(RandomStream(1), grid, 1, 1, 1);
  const std::vector<std::size_t> coords{0};
  const auto fd = fd_gradient_oracle(scalar_linear(w), grid, half_squared_norm_loss(), h0s, paths, 1e-4, coords);
  EXPECT_NEAR(fd(0), analytic, 1e-7);
  EXPECT_THROW(fd_gradient_oracle(scalar_linear(w), grid, half_squared_norm_loss(), h0s, paths, 0.0, coords),
               std::invalid_argument);
}

TEST(McGradient, OverflowNamesSampleAndPath) {
  const auto grid = make_time_grid(10.0, 10);
  const Dynamics dyn{DriftNet::linear(Eigen::MatrixXd::Constant(1, 1, 1e300)), DiffusionSpec::additive(0.1)};
  const std::vector<Eigen::VectorXd> h0s{vec1(0.0), vec1(1.0)};
  try {
    mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, 2, RandomStream(1));
    FAIL() << "expected overflow";
  } catch (const PathOverflow& e) {
    EXPECT_LE(e.sample(), 1u);
    EXPECT_EQ(e.path(), 0u);
    EXPECT_NE(std::string(e.what()).find("path 0"), std::string::npos);
  }
  EXPECT_THROW(mc_gradient(dyn, grid, half_squared_norm_loss(), h0s, 0, RandomStream(1)), std::invalid_argument);
}

TEST(PickCoordinates, DistinctAndInRange) {
  RandomStream s(4);
  const auto c = pick_coordinates(s, 50, 20);
  ASSERT_EQ(c.size(), 20u);
  std::vector<bool> seen(50, false);
  for (auto i : c) {
    ASSERT_LT(i, 50u);
    EXPECT_FALSE(seen[i]);
    seen[i] = true;
  }
  RandomStream t(4);
  EXPECT_EQ(pick_coordinates(t, 50, 20), c);
  RandomStream u(4);
  EXPECT_EQ(pick_coordinates(u, 3, 20).size(), 3u);
}

TEST(GradcheckCsv, Format) {
  std::ostringstream os;
  const std::vector<GradCheckRow> rows{{3, 0.5, 0.25, 1.0}};
  write_gradcheck_csv(os, rows);
  EXPECT_EQ(os.str(), "coordinate,pathwise,fd,rel_err\n3,0.5,0.25,1\n");
}
