#include <gtest/gtest.h>

#include "support.hpp"

using namespace rded;
using namespace testing_support;

TEST(Oracle, KnownPieces) {
  const DelayedDecayOracle x(3);
  EXPECT_NEAR(x(0.5), 0.5, 1e-14);
  EXPECT_NEAR(x(1.0), 0.0, 1e-14);
  EXPECT_NEAR(x(1.5), 1.5 * 1.5 / 2 - 3 + 1.5, 1e-14);
  EXPECT_NEAR(x(2.0), -0.5, 1e-14);
}

TEST(SolveSteps, DelayedDecayValues) {
  double x2 = 0;
  (void)delayed_decay_error(0.01, 2.0, &x2);
  EXPECT_NEAR(x2, -0.5, 1e-3);
  RdedSpec spec;
  spec.historyCoef = [](double) { return -1.0; };
  spec.lagConfig = LagConfig{100, {}, 100};
  spec.initial = [](double) { return 1.0; };
  const auto x = solve_steps(spec, {}, TimeGrid{0, 0.01, 201});
  EXPECT_NEAR(x.values[100], 0.0, 1e-3);
}

TEST(SolveSteps, SecondOrderConvergence) {
  const double e1 = delayed_decay_error(0.04, 4.0);
  const double e2 = delayed_decay_error(0.02, 4.0);
  const double e3 = delayed_decay_error(0.01, 4.0);
  EXPECT_GE(e1 / e2, 3.5);
  EXPECT_LE(e1 / e2, 4.5);
  EXPECT_GE(e2 / e3, 3.5);
  EXPECT_LE(e2 / e3, 4.5);
}

TEST(SolveSteps, ZeroRightHandSideKeepsInitialValue) {
  RdedSpec spec;
  spec.lagConfig = LagConfig{3, {}, 3};
  spec.initial = [](double t) { return 2.5 + t; };  // g(t0) = 2.5 at t0 = 0
  const auto x = solve_steps(spec, {}, TimeGrid{0, 1, 20});
  for (double v : x.values) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(SolveSteps, PureIntegrationOfIntercept) {
  RdedSpec spec;
  spec.intercept = [](double) { return 1.0; };
  spec.historyWeight = [](double, double) { return 0.0; };
  spec.lagConfig = LagConfig{5, {}, 5};
  spec.initial = [](double) { return 0.0; };
  const TimeGrid g{3, 0.5, 40};
  const auto x = solve_steps(spec, {}, g);
  for (std::size_t k = 0; k < g.count; ++k) EXPECT_NEAR(x.values[k], g.at(k) - 3, 1e-12);
}

TEST(SolveSteps, IntervalsChainContinuously) {
  RdedSpec spec;
  spec.historyCoef = [](double t) { return -0.5 + 0.1 * std::sin(t); };
  spec.lagConfig = LagConfig{7, {}, 7};
  spec.initial = [](double t) { return std::cos(t); };
  const auto path = solve_path(spec, {}, TimeGrid{0, 0.1, 50});
  EXPECT_EQ(path.intervals, 7u);
  // The trapezoid recursion holds across every interval boundary.
  for (std::size_t k = 1; k < 50; ++k)
    EXPECT_NEAR(path.state[k], path.state[k - 1] + 0.05 * (path.rate[k - 1] + path.rate[k]), 1e-13);
}

TEST(SolveSteps, ConcentratedKernelApproachesDiscreteDelay) {
  const double h = 0.01;
  const TimeGrid g{0, h, 301};
  RdedSpec discrete;
  discrete.historyCoef = [](double) { return -1.0; };
  discrete.lagConfig = LagConfig{100, {}, 100};
  discrete.initial = [](double t) { return 1.0 + 0.5 * t; };
  const auto ref = solve_steps(discrete, {}, g);
  double prev = std::numeric_limits<double>::infinity();
  for (double w : {0.4, 0.2, 0.1, 0.05}) {
    // Triangular bump on [1 - w, 1] with unit trapezoid mass.
    auto bump = [w](double s) { return s >= 1 - w - 1e-12 ? 2.0 / w * (s - (1 - w)) / w : 0.0; };
    double mass = 0;
    const auto q = trapezoid_weights(100, h);
    for (std::size_t s = 0; s <= 100; ++s) mass += q[s] * bump(s * h);
    RdedSpec spec = discrete;
    spec.historyWeight = [bump, mass](double s, double) { return bump(s) / mass; };
    const auto x = solve_steps(spec, {}, g);
    double err = 0;
    for (std::size_t k = 0; k < g.count; ++k) err = std::max(err, std::abs(x.values[k] - ref.values[k]));
    EXPECT_LT(err, prev);
    prev = err;
  }
  EXPECT_LT(prev, 0.05);
}

TEST(SolveSteps, CovariateShorterThanLagUnderflows) {
  RdedSpec spec;
  spec.covariateCoefs = {[](double) { return 1.0; }};
  spec.lagConfig = LagConfig{2, {5}, 21};
  spec.initial = [](double) { return 0.0; };
  CovariatePath u{3, std::vector<double>(23, 1.0)};
  try {
    (void)solve_steps(spec, {u}, TimeGrid{0, 1, 20});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DomainUnderflow);
  }
}

TEST(SolveSteps, LaggedCovariateEntersRate) {
  RdedSpec spec;
  spec.covariateCoefs = {[](double) { return 2.0; }};
  spec.lagConfig = LagConfig{1, {4}, 21};
  spec.initial = [](double) { return 0.0; };
  CovariatePath u{4, {}};
  for (int k = -4; k < 20; ++k) u.values.push_back(k);
  const auto path = solve_path(spec, {u}, TimeGrid{0, 1, 20});
  for (std::size_t k = 0; k < 20; ++k) EXPECT_DOUBLE_EQ(path.rate[k], 2.0 * (static_cast<double>(k) - 4));
}

TEST(SolveOde, ExponentialGrowth) {
  RdedSpec spec;
  spec.historyCoef = [](double) { return 0.1; };
  spec.initial = [](double) { return 1.0; };
  const auto x = solve_ode(spec, {}, TimeGrid{0, 0.01, 1001});
  EXPECT_NEAR(x.values.back(), std::exp(1.0), 1e-4);
}

TEST(SolveOde, ConstantRate) {
  RdedSpec spec;
  spec.intercept = [](double) { return 0.7; };
  spec.initial = [](double) { return -2.0; };
  const TimeGrid g{1, 0.25, 30};
  const auto x = solve_ode(spec, {}, g);
  for (std::size_t k = 0; k < g.count; ++k) EXPECT_NEAR(x.values[k], -2.0 + 0.7 * (g.at(k) - 1), 1e-12);
}

TEST(SolveOde, RelaxationToOne) {
  RdedSpec spec;
  spec.intercept = [](double) { return 1.0; };
  spec.historyCoef = [](double) { return -1.0; };
  spec.initial = [](double) { return 0.0; };
  const auto x = solve_ode(spec, {}, TimeGrid{0, 0.01, 501});
  EXPECT_NEAR(x.values.back(), 1 - std::exp(-5.0), 1e-4);
}

TEST(SolveOde, RejectsDelay) {
  RdedSpec spec;
  spec.lagConfig.tau0 = 2;
  spec.initial = [](double) { return 0.0; };
  EXPECT_THROW((void)solve_ode(spec, {}, TimeGrid{0, 1, 5}), Error);
  spec.lagConfig.tau0 = 0;
  EXPECT_THROW((void)solve_steps(spec, {}, TimeGrid{0, 1, 5}), Error);
}

namespace {

GeneratorSpec small_generator() {
  GeneratorSpec g;
  g.grid = TimeGrid{0, 1, 40};
  g.subjects = 5;
  g.model.lagConfig = LagConfig{4, {0, 3}, 21};
  g.model.historyWeight = [](double s, double) { return 0.01 * (1 - s / 2); };
  g.model.covariateCoefs = {[](double) { return 0.5; }, [](double) { return -0.5; }};
  g.covariateNames = {"A", "B"};
  g.covariateLaws = {SmoothNoiseLaw{}, SmoothNoiseLaw{}};
  g.drift = SmoothNoiseLaw{0, 0.1, 2};
  g.noiseSd = 0.05;
  return g;
}

}  // namespace

TEST(Generator, SameSeedSamePanel) {
  const auto g = small_generator();
  EXPECT_EQ(generate_panel(g, 7), generate_panel(g, 7));
  EXPECT_NE(generate_panel(g, 7).response[0].values, generate_panel(g, 8).response[0].values);
}

TEST(Generator, IdenticalInputsGiveIdenticalSubjects) {
  auto g = small_generator();
  g.noiseSd = 0;
  g.drift.sd = 0;
  g.covariateLaws = {SmoothNoiseLaw{0.3, 0.0, 1.5}, SmoothNoiseLaw{-1, 0.0, 1.5}};
  g.initialLaw = InitialLaw{2.0, 0.0, 0.0, SmoothNoiseLaw{0, 0, 2}};
  const auto p = generate_panel(g, 99);
  for (std::size_t i = 1; i < p.n(); ++i) EXPECT_EQ(p.response[i].values, p.response[0].values);
}

TEST(Generator, ShapeAndExactDerivatives) {
  auto g = small_generator();
  g.noiseSd = 0;
  const auto p = generate_panel(g, 1);
  EXPECT_TRUE(check_panel(p).empty());
  EXPECT_EQ(p.n(), 5u);
  EXPECT_EQ(p.J(), 2u);
  EXPECT_EQ(p.subjects[0], "S001");
  for (std::size_t k = 1; k < 40; ++k)
    EXPECT_NEAR(p.response[2].values[k],
                p.response[2].values[k - 1] + 0.5 * (p.derivatives[2].values[k - 1] + p.derivatives[2].values[k]),
                1e-12);
}

TEST(Generator, SubjectStreamsIndependentOfPanelSize) {
  auto g = small_generator();
  const auto a = generate_panel(g, 5);
  g.subjects = 3;
  const auto b = generate_panel(g, 5);
  EXPECT_EQ(a.response[1].values, b.response[1].values);
}

TEST(Generator, SmoothNoiseHasUnitScale) {
  std::mt19937_64 rng(4);
  const auto v = SmoothNoiseLaw{0, 1, 1.5}.draw(20000, 1.0, rng);
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= v.size();
  for (double x : v) s += (x - m) * (x - m);
  EXPECT_NEAR(m, 0.0, 0.1);
  EXPECT_NEAR(std::sqrt(s / v.size()), 1.0, 0.05);
}

TEST(Generator, RejectsSingleSubject) {
  auto g = small_generator();
  g.subjects = 1;
  EXPECT_THROW((void)generate_panel(g, 1), Error);
}
