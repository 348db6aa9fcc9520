#include <gtest/gtest.h>

#include <cmath>

#include "analytic_problems.hpp"
#include "rnmpc_fixtures.hpp"
#include "rlrnmpc/nlp/sensitivity.hpp"
#include "rlrnmpc/nlp/sqp.hpp"
#include "rlrnmpc/rnmpc.hpp"

using namespace rlrnmpc;
using analytic::AutoNlp;
using analytic::Outputs;
using analytic::Vars;
using nlp::Scope;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

nlp::PrimalDualSolution solve(const AutoNlp& P) {
  const nlp::PrimalDualSolution sol = nlp::SqpSolver().solve(P);
  EXPECT_TRUE(sol.converged());
  return sol;
}

}  // namespace

TEST(ValueSensitivity, ParameterInInactiveConstraintHasZeroGradient) {
  // min (p - 1)^2  s.t.  p - theta - 5 <= 0
  AutoNlp P(1, vec({0.0}), 0, 1,
            [](const Vars& z) {
              Outputs o;
              o.objective = (z[0] - 1.0) * (z[0] - 1.0);
              o.ineq = {z[0] - z[1] - 5.0};
              return o;
            },
            vec({0.0}));
  const auto sol = solve(P);
  const auto s = nlp::value_sensitivity(P, sol);
  EXPECT_EQ(s.gradient(0), 0.0);
  EXPECT_FALSE(s.degenerate_active_set);
}

TEST(ValueSensitivity, UnconstrainedEnvelopeGradientIsZero) {
  // min (p - theta)^2 at theta = 0.7
  AutoNlp P(1, vec({0.7}), 0, 0,
            [](const Vars& z) {
              Outputs o;
              o.objective = (z[0] - z[1]) * (z[0] - z[1]);
              return o;
            },
            vec({0.0}));
  const auto sol = solve(P);
  EXPECT_NEAR(sol.primal(0), 0.7, 1e-10);
  EXPECT_NEAR(nlp::value_gradient_theta(P, sol)(0), 0.0, 1e-9);
}

TEST(ValueSensitivity, LinearParameterGivesZeroHessian) {
  // min p^2 + theta p: V = -theta^2 / 4, dL/dtheta = p* = -theta / 2.
  AutoNlp P(1, vec({0.6}), 0, 0,
            [](const Vars& z) {
              Outputs o;
              o.objective = z[0] * z[0] + z[1] * z[0];
              return o;
            },
            vec({1.0}));
  const auto sol = solve(P);
  EXPECT_NEAR(nlp::value_gradient_theta(P, sol)(0), -0.3, 1e-9);
  EXPECT_EQ(nlp::value_hessian_theta(P, sol)(0, 0), 0.0);
}

TEST(ValueSensitivity, QuadraticParameterTermGivesItsWeightAsHessian) {
  // min (p - 1)^2 + 1/2 theta' W theta
  const Eigen::Matrix2d W = (Eigen::Matrix2d() << 2.0, 0.5, 0.5, 1.0).finished();
  AutoNlp P(1, vec({0.3, -0.4}), 0, 0,
            [W](const Vars& z) {
              Outputs o;
              o.objective = (z[0] - 1.0) * (z[0] - 1.0) + 0.5 * W(0, 0) * z[1] * z[1] + W(0, 1) * z[1] * z[2] +
                            0.5 * W(1, 1) * z[2] * z[2];
              return o;
            },
            vec({0.0}));
  const auto sol = solve(P);
  const Eigen::MatrixXd H = nlp::value_hessian_theta(P, sol);
  EXPECT_LT((H - W).lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_LT((nlp::value_gradient_theta(P, sol) - W * vec({0.3, -0.4})).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(ValueSensitivity, ActiveConstraintGradientMatchesClosedForm) {
  // min p^2 / 2  s.t.  theta - p <= 0: V = theta^2 / 2 for theta > 0.
  AutoNlp P(1, vec({1.3}), 0, 1,
            [](const Vars& z) {
              Outputs o;
              o.objective = 0.5 * z[0] * z[0];
              o.ineq = {z[1] - z[0]};
              return o;
            },
            vec({0.0}));
  const auto sol = solve(P);
  EXPECT_NEAR(sol.ineq_multipliers(0), 1.3, 1e-9);
  const auto s = nlp::value_sensitivity(P, sol);
  EXPECT_NEAR(s.gradient(0), 1.3, 1e-9);
  EXPECT_FALSE(s.degenerate_active_set);
}

TEST(ValueSensitivity, WeaklyActiveConstraintIsFlagged) {
  // min p^2  s.t.  -p <= 0: active at p = 0 with a zero multiplier.
  AutoNlp P(1, vec({0.0}), 0, 1,
            [](const Vars& z) {
              Outputs o;
              o.objective = z[0] * z[0] + 0.0 * z[1];
              o.ineq = {-z[0]};
              return o;
            },
            vec({1.0}));
  const auto sol = solve(P);
  EXPECT_TRUE(nlp::value_sensitivity(P, sol).degenerate_active_set);
}

namespace {

struct RnmpcCase {
  MpcConfig cfg = fixtures::desk_config(6);
  StateVec s;
  double t = 12.0;
  std::optional<ControlVec> action;
  ParamSet theta;

  RnmpcProblem make(const Eigen::VectorXd& th) const {
    return RnmpcProblem(cfg, s, t, ParamSet::from_vector(th, cfg.horizon), true, action);
  }
};

std::vector<int> strongly_active(const RnmpcProblem& P, const nlp::PrimalDualSolution& sol) {
  const auto ev = P.evaluate(sol.primal, Scope::kValues);
  std::vector<int> rows;
  for (Eigen::Index i = 0; i < ev.ineq.size(); ++i)
    if (sol.ineq_multipliers(i) > 1e-8 || ev.ineq(i) > -1e-8) rows.push_back(static_cast<int>(i));
  return rows;
}

RnmpcCase near_obstacle(bool pinned, RandomSource& rng) {
  RnmpcCase c;
  c.s = c.cfg.reference.pose(c.t) + StateVec(0.05, -0.1, 0.1);
  c.theta = fixtures::random_theta(c.cfg.horizon, rng);
  if (pinned) c.action = ControlVec(0.4, -0.3);
  return c;
}

double lagrangian_at(const RnmpcProblem& P, const nlp::PrimalDualSolution& sol) {
  const auto ev = P.evaluate(sol.primal, Scope::kValues);
  return ev.objective + ev.eq.dot(sol.eq_multipliers) + ev.ineq.dot(sol.ineq_multipliers);
}

class RnmpcSensitivity : public ::testing::TestWithParam<bool> {};

}  // namespace

TEST_P(RnmpcSensitivity, GradientMatchesResolvedValueDifferences) {
  RandomSource rng(GetParam() ? 101 : 202);
  const RnmpcCase c = near_obstacle(GetParam(), rng);
  const Eigen::VectorXd th0 = c.theta.to_vector();
  const RnmpcProblem P0 = c.make(th0);
  const nlp::SqpSolver solver;
  nlp::PrimalDualSolution sol0 = solver.solve(P0);
  ASSERT_TRUE(sol0.converged());
  const std::vector<int> active0 = strongly_active(P0, sol0);
  ASSERT_FALSE(active0.empty());
  const nlp::ValueSensitivity sens = nlp::value_sensitivity(P0, sol0, false);
  ASSERT_FALSE(sens.degenerate_active_set);

  const double h = 1e-5;
  int compared = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd dir(th0.size());
    for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = rng.normal();
    dir.normalize();
    const RnmpcProblem Pp = c.make(th0 + h * dir);
    const RnmpcProblem Pm = c.make(th0 - h * dir);
    const auto sp = solver.solve(Pp, &sol0);
    const auto sm = solver.solve(Pm, &sol0);
    ASSERT_TRUE(sp.converged());
    ASSERT_TRUE(sm.converged());
    if (strongly_active(Pp, sp) != active0 || strongly_active(Pm, sm) != active0) continue;
    ++compared;
    const double fd = (sp.objective - sm.objective) / (2.0 * h);
    const double an = sens.gradient.dot(dir);
    EXPECT_NEAR(an, fd, 1e-4 * std::max(std::abs(fd), 1.0)) << "direction " << trial;
  }
  EXPECT_GE(compared, 15);
}

TEST_P(RnmpcSensitivity, HessianDiagonalMatchesFixedPointSecondDifferences) {
  RandomSource rng(GetParam() ? 303 : 404);
  const RnmpcCase c = near_obstacle(GetParam(), rng);
  const Eigen::VectorXd th0 = c.theta.to_vector();
  const RnmpcProblem P0 = c.make(th0);
  const nlp::PrimalDualSolution sol = nlp::SqpSolver().solve(P0);
  ASSERT_TRUE(sol.converged());
  const Eigen::MatrixXd H = nlp::value_hessian_theta(P0, sol);
  EXPECT_LT((H - H.transpose()).lpNorm<Eigen::Infinity>(), 1e-12 * (1.0 + H.lpNorm<Eigen::Infinity>()));
  const double h = 1e-4;
  const double L0 = lagrangian_at(P0, sol);
  for (Eigen::Index i = 0; i < th0.size(); ++i) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(th0.size());
    e(i) = h;
    const double second = (lagrangian_at(c.make(th0 + e), sol) - 2.0 * L0 + lagrangian_at(c.make(th0 - e), sol)) / (h * h);
    EXPECT_NEAR(H(i, i), second, 1e-4 * (1.0 + std::abs(second))) << "component " << i;
  }
}

TEST_P(RnmpcSensitivity, RadiiOfStagesWithoutActiveRowsHaveZeroGradient) {
  RandomSource rng(GetParam() ? 505 : 606);
  const RnmpcCase c = near_obstacle(GetParam(), rng);
  const RnmpcProblem P = c.make(c.theta.to_vector());
  const nlp::PrimalDualSolution sol = nlp::SqpSolver().solve(P);
  ASSERT_TRUE(sol.converged());
  const Eigen::VectorXd g = nlp::value_gradient_theta(P, sol);
  const ThetaLayout l{c.cfg.horizon};
  int checked = 0;
  for (int k = 0; k <= c.cfg.horizon; ++k) {
    bool any = false;
    for (int j = 0; j < c.cfg.num_obstacles(); ++j) any = any || sol.ineq_multipliers(P.obstacle_row(k, j)) > 0.0;
    if (any) continue;
    ++checked;
    EXPECT_EQ(g(l.radius(k)), 0.0) << "stage " << k;
  }
  EXPECT_GT(checked, 0);
}

INSTANTIATE_TEST_SUITE_P(Rnmpc, RnmpcSensitivity, ::testing::Values(false, true),
                         [](const auto& info) { return info.param ? std::string("ActionValue") : std::string("Value"); });
