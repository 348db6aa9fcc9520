#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "rlrnmpc/dynamics.hpp"
#include "rlrnmpc/random.hpp"

using namespace rlrnmpc;

namespace {

StateVec euler_reference(StateVec x, const ControlVec& u, double ts, int steps) {
  const double h = ts / steps;
  for (int i = 0; i < steps; ++i) x += h * wmr_continuous(x, u);
  return x;
}

// Exact unicycle solution for constant inputs with omega != 0.
StateVec exact_arc(const StateVec& x, const ControlVec& u, double ts) {
  const double v = u(0), w = u(1), p = x(2);
  return {x(0) + v / w * (std::sin(p + w * ts) - std::sin(p)), x(1) - v / w * (std::cos(p + w * ts) - std::cos(p)),
          p + w * ts};
}

}  // namespace

TEST(Dynamics, ContinuousModelExamples) {
  EXPECT_TRUE(wmr_continuous(StateVec(0, 0, 0), ControlVec(1, 0)).isApprox(Eigen::Vector3d(1, 0, 0)));
  const Eigen::Vector3d up = wmr_continuous(StateVec(0, 0, std::numbers::pi / 2), ControlVec(1, 0));
  EXPECT_NEAR(up(0), 0.0, 1e-15);
  EXPECT_NEAR(up(1), 1.0, 1e-15);
  EXPECT_TRUE(wmr_continuous(StateVec(5, -3, 0), ControlVec(0, 1)).isApprox(Eigen::Vector3d(0, 0, 1)));
}

TEST(Dynamics, Rk4TrivialCases) {
  const StateVec x(0.3, -1.2, 2.0);
  EXPECT_EQ(rk4_step(x, ControlVec(0, 0), 0.2), x);
  const StateVec r = rk4_step(StateVec(0, 0, 0), ControlVec(0, 1), 0.2);
  EXPECT_NEAR(r(0), 0.0, 1e-15);
  EXPECT_NEAR(r(1), 0.0, 1e-15);
  EXPECT_NEAR(r(2), 0.2, 1e-15);
}

TEST(Dynamics, Rk4ExactWithoutTranslation) {
  RandomSource rng(3);
  for (int i = 0; i < 20; ++i) {
    const StateVec x(rng.normal(), rng.normal(), rng.normal());
    const double w = rng.normal();
    const StateVec r = rk4_step(x, ControlVec(0, w), 0.2);
    EXPECT_NEAR((r - StateVec(x(0), x(1), x(2) + 0.2 * w)).norm(), 0.0, 1e-12);
  }
}

TEST(Dynamics, Rk4MatchesFineEuler) {
  const StateVec r = rk4_step(StateVec(0, 0, 0), ControlVec(1, 0.5), 0.2);
  // Plain Euler with 1000 substeps is only first-order accurate (about 1e-5
  // here); one Richardson extrapolation with 2000 substeps cancels that term.
  const StateVec e1 = euler_reference(StateVec(0, 0, 0), ControlVec(1, 0.5), 0.2, 1000);
  const StateVec e2 = euler_reference(StateVec(0, 0, 0), ControlVec(1, 0.5), 0.2, 2000);
  const StateVec e = 2.0 * e2 - e1;
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r(i), e(i), 1e-6);
  EXPECT_LT((r - e1).norm(), 1e-4);
  // RK4 local error is O(h^5) against the closed-form arc.
  const StateVec a = exact_arc(StateVec(0, 0, 0), ControlVec(1, 0.5), 0.2);
  EXPECT_LT((r - a).norm(), 1e-8);
}

TEST(Dynamics, NominalModelChannels) {
  const StateVec x(0.4, -0.2, 0.9);
  const ControlVec u(0.8, -0.3);
  EXPECT_EQ(nominal_discrete(x, u, DisturbanceVec::Zero()), rk4_step(x, u));
  EXPECT_EQ(nominal_discrete(x, ControlVec(0, 0.7), DisturbanceVec(0.3, -0.5, 1.1)), rk4_step(x, ControlVec(0, 0.7)));
  const StateVec a = nominal_discrete(StateVec::Zero(), ControlVec(1, 0), DisturbanceVec(0.1, 0, 0));
  EXPECT_NEAR((a - rk4_step(StateVec::Zero(), ControlVec(1.1, 0), 0.2)).norm(), 0.0, 1e-15);
  // d2 acts on the turn rate, d3 adds ts v d3 to the heading.
  const StateVec b = nominal_discrete(x, u, DisturbanceVec(0, 0.25, 0));
  EXPECT_NEAR((b - rk4_step(x, ControlVec(0.8, -0.3 + 0.8 * 0.25))).norm(), 0.0, 1e-15);
  const StateVec c = nominal_discrete(x, u, DisturbanceVec(0, 0, 0.5));
  const StateVec c0 = rk4_step(x, u);
  EXPECT_NEAR(c(2) - c0(2), 0.2 * 0.8 * 0.5, 1e-15);
  EXPECT_EQ(c(0), c0(0));
}

TEST(Dynamics, JacobiansMatchCentralDifferences) {
  RandomSource rng(11);
  const double h = 1e-6;
  for (int trial = 0; trial < 100; ++trial) {
    const StateVec x(-3 + 6 * rng.uniform(), -3 + 6 * rng.uniform(), -std::numbers::pi + 2 * std::numbers::pi * rng.uniform());
    const ControlVec u(1.5 * rng.uniform(), -1.5 + 3 * rng.uniform());
    const DisturbanceVec d(0.3 * rng.normal(), 0.3 * rng.normal(), 0.3 * rng.normal());
    const ModelJacobians J = jacobians(x, u, d);
    for (int j = 0; j < 3; ++j) {
      StateVec e = StateVec::Zero();
      e(j) = h;
      const Eigen::Vector3d fd = (nominal_discrete(x + e, u, d) - nominal_discrete(x - e, u, d)) / (2 * h);
      EXPECT_LT((fd - J.dfdx.col(j)).cwiseAbs().maxCoeff(), 1e-6);
      DisturbanceVec ed = DisturbanceVec::Zero();
      ed(j) = h;
      const Eigen::Vector3d fdd = (nominal_discrete(x, u, d + ed) - nominal_discrete(x, u, d - ed)) / (2 * h);
      EXPECT_LT((fdd - J.dfdd.col(j)).cwiseAbs().maxCoeff(), 1e-6);
    }
    for (int j = 0; j < 2; ++j) {
      ControlVec e = ControlVec::Zero();
      e(j) = h;
      const Eigen::Vector3d fd = (nominal_discrete(x, u + e, d) - nominal_discrete(x, u - e, d)) / (2 * h);
      EXPECT_LT((fd - J.dfdu.col(j)).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(Dynamics, JacobianTrivialCases) {
  const ModelJacobians J = jacobians(StateVec(1, 2, 0.3), ControlVec(0, 0), DisturbanceVec::Zero());
  EXPECT_TRUE(J.dfdx.isApprox(Mat3::Identity()));
  const ModelJacobians K = jacobians(StateVec(1, 2, 0.3), ControlVec(0, 0.8), DisturbanceVec(0.1, 0.2, 0.3));
  EXPECT_TRUE(K.dfdd.isZero(0.0));
}

TEST(Dynamics, PlantIsDeterministicWithoutSpeed) {
  RandomSource rng(5);
  const StateVec x(0.1, 0.2, 0.3);
  EXPECT_EQ(plant_step(x, ControlVec(0, 0.4), rng), rk4_step(x, ControlVec(0, 0.4)));
}

TEST(Dynamics, PlantReproducibleUnderSeed) {
  RandomSource a(42), b(42);
  const StateVec x(0.1, 0.2, 0.3);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(plant_step(x, ControlVec(0.7, 0.1), a), plant_step(x, ControlVec(0.7, 0.1), b));
}

TEST(Dynamics, PlantHeadingIncrementVariance) {
  // With v = 1 and omega = 0 the heading moves by ts v d2 through the input
  // channel and again by ts v d2 additively: increment = 2 ts d2.
  RandomSource rng(2024);
  const int n = 100000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double dpsi = plant_step(StateVec::Zero(), ControlVec(1, 0), rng)(2);
    sum += dpsi;
    sum2 += dpsi * dpsi;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  const double expected = std::pow(2 * 0.2 * 0.4, 2);
  EXPECT_NEAR(var / expected, 1.0, 0.05);
}
