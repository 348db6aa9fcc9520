#include <gtest/gtest.h>

#include <cmath>

#include "rnmpc_fixtures.hpp"
#include "rlrnmpc/rnmpc.hpp"

using namespace rlrnmpc;
using nlp::Scope;

namespace {

struct DerivativeCase {
  MpcConfig cfg;
  StateVec s;
  double t;
  ParamSet theta;
  std::optional<ControlVec> action;
  bool robust = true;

  RnmpcProblem make(const Eigen::VectorXd& theta_vec) const {
    return RnmpcProblem(cfg, s, t, ParamSet::from_vector(theta_vec, cfg.horizon), robust, action);
  }
};

// Trajectory passing close to the first obstacle so the margins and the
// obstacle curvature are exercised.
DerivativeCase near_obstacle_case(bool pinned, RandomSource& rng) {
  DerivativeCase c;
  c.cfg = fixtures::desk_config(5);
  c.t = 12.0;
  c.s = c.cfg.reference.pose(c.t) + StateVec(0.05, -0.1, 0.1);
  c.theta = fixtures::random_theta(5, rng);
  if (pinned) c.action = ControlVec(0.3, -0.2);
  return c;
}

Eigen::VectorXd random_primal(const RnmpcProblem& P, RandomSource& rng) {
  Eigen::VectorXd p = P.initial_guess();
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) += 0.05 * rng.normal();
  for (int k = 0; k <= P.horizon(); ++k)
    for (int j = 0; j < P.config().num_obstacles(); ++j) p(P.slack_index(k, j)) = std::abs(p(P.slack_index(k, j)));
  return p;
}

}  // namespace

class ProblemDerivatives : public ::testing::TestWithParam<bool> {};

TEST_P(ProblemDerivatives, JointJacobiansMatchCentralDifferences) {
  RandomSource rng(GetParam() ? 5 : 6);
  const DerivativeCase c = near_obstacle_case(GetParam(), rng);
  const Eigen::VectorXd th = c.theta.to_vector();
  const RnmpcProblem P = c.make(th);
  const Eigen::VectorXd p = random_primal(P, rng);
  const nlp::NlpEvaluation ev = P.evaluate(p, Scope::kJoint);
  const int n = P.num_primal();
  const double h = 1e-6;
  double worst = 0.0;
  for (int col = 0; col < n + P.num_params(); ++col) {
    nlp::NlpEvaluation up, dn;
    if (col < n) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
      e(col) = h;
      up = P.evaluate(p + e, Scope::kValues);
      dn = P.evaluate(p - e, Scope::kValues);
    } else {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(th.size());
      e(col - n) = h;
      up = c.make(th + e).evaluate(p, Scope::kValues);
      dn = c.make(th - e).evaluate(p, Scope::kValues);
    }
    const double scale = 1.0;
    worst = std::max(worst, std::abs((up.objective - dn.objective) / (2 * h) - ev.gradient(col)) / scale);
    worst = std::max(worst, ((up.eq - dn.eq) / (2 * h) - ev.eq_jacobian.col(col)).lpNorm<Eigen::Infinity>());
    const double e_in = ((up.ineq - dn.ineq) / (2 * h) - ev.ineq_jacobian.col(col)).lpNorm<Eigen::Infinity>();
    EXPECT_LT(e_in, 1e-5) << "column " << col;
    worst = std::max(worst, e_in);
  }
  EXPECT_LT(worst, 1e-5);
}

TEST_P(ProblemDerivatives, JointLagrangianHessianMatchesGradientDifferences) {
  RandomSource rng(GetParam() ? 7 : 8);
  const DerivativeCase c = near_obstacle_case(GetParam(), rng);
  const Eigen::VectorXd th = c.theta.to_vector();
  const RnmpcProblem P = c.make(th);
  const Eigen::VectorXd p = random_primal(P, rng);
  Eigen::VectorXd lambda(P.num_eq()), mu(P.num_ineq());
  for (Eigen::Index i = 0; i < lambda.size(); ++i) lambda(i) = rng.normal();
  for (Eigen::Index i = 0; i < mu.size(); ++i) mu(i) = rng.uniform();
  const Eigen::MatrixXd H = P.lagrangian_hessian(p, lambda, mu, Scope::kJoint);
  EXPECT_LT((H - H.transpose()).lpNorm<Eigen::Infinity>(), 1e-12);
  const int n = P.num_primal();
  const double h = 1e-6;
  Eigen::MatrixXd fd(H.rows(), H.cols());
  for (int col = 0; col < n + P.num_params(); ++col) {
    Eigen::VectorXd gu, gd;
    if (col < n) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
      e(col) = h;
      gu = fixtures::lagrangian_gradient(P, p + e, lambda, mu, Scope::kJoint);
      gd = fixtures::lagrangian_gradient(P, p - e, lambda, mu, Scope::kJoint);
    } else {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(th.size());
      e(col - n) = h;
      gu = fixtures::lagrangian_gradient(c.make(th + e), p, lambda, mu, Scope::kJoint);
      gd = fixtures::lagrangian_gradient(c.make(th - e), p, lambda, mu, Scope::kJoint);
    }
    fd.col(col) = (gu - gd) / (2 * h);
  }
  const double err = (fd - H).lpNorm<Eigen::Infinity>();
  EXPECT_LT(err, 1e-4 * std::max(1.0, H.lpNorm<Eigen::Infinity>()));
  Eigen::Index r = 0, cc = 0;
  (fd - H).cwiseAbs().maxCoeff(&r, &cc);
  EXPECT_LT(err, 1e-4) << "worst entry (" << r << ", " << cc << "): fd " << fd(r, cc) << " exact " << H(r, cc);
}

INSTANTIATE_TEST_SUITE_P(Rnmpc, ProblemDerivatives, ::testing::Bool());

namespace {

// Objective, dynamics residuals and tightened obstacle rows recomputed from
// the public dynamics and uncertainty functions.
struct IndependentEvaluation {
  double objective = 0.0;
  Eigen::VectorXd eq;
  Eigen::VectorXd obstacle_rows;
};

IndependentEvaluation evaluate_independently(const RnmpcProblem& P, const Eigen::VectorXd& p) {
  const MpcConfig& cfg = P.config();
  const int N = P.horizon();
  const int nobs = cfg.num_obstacles();
  IndependentEvaluation out;
  out.eq = Eigen::VectorXd::Zero(3 * N);
  out.obstacle_rows = Eigen::VectorXd::Zero((N + 1) * nobs);
  Mat3 sigma = cfg.initial_covariance;
  double disc = 1.0;
  for (int k = 0; k <= N; ++k, disc *= cfg.discount) {
    const StateVec x = P.predicted_state(p, k);
    const double t = P.time() + k * cfg.sampling_time;
    if (k < N) {
      out.objective += disc * modified_stage_cost(x, P.input(p, k), sigma, t, P.theta(), cfg);
    } else {
      const StateVec dx = x - cfg.reference.pose(t);
      out.objective += disc * cfg.terminal_scale * dx.dot(cfg.tracking.state.cwiseProduct(dx));
    }
    for (int j = 0; j < nobs; ++j) {
      const Obstacle& o = cfg.obstacles[static_cast<std::size_t>(j)];
      const double zeta = p(P.slack_index(k, j));
      const auto& w = k < N ? cfg.slack_weight : cfg.terminal_slack_weight;
      out.objective += disc * w[static_cast<std::size_t>(j)] * zeta;
      const Eigen::RowVector3d h_x(-2.0 * (x(0) - o.center(0)) / (o.semi_axes(0) * o.semi_axes(0)),
                                   -2.0 * (x(1) - o.center(1)) / (o.semi_axes(1) * o.semi_axes(1)), 0.0);
      const Eigen::Vector3d b = constraint_gradient(h_x, Eigen::RowVector2d::Zero(), Mat23::Zero());
      out.obstacle_rows(k * nobs + j) = obstacle_constraints(x, cfg.obstacles)(j) +
                                        tightening_margin(b, sigma, P.theta().radius(k)) - zeta;
    }
    if (k == N) break;
    const ControlVec u = P.input(p, k);
    const DisturbanceVec d = P.theta().disturbance_mean[static_cast<std::size_t>(k)];
    out.eq.segment<3>(3 * k) = P.predicted_state(p, k + 1) - nominal_discrete(x, u, d, cfg.sampling_time);
    const ClosedLoopMatrices cl = closed_loop_matrices(x, u, d, P.gains()[static_cast<std::size_t>(k)], cfg.sampling_time);
    sigma = propagate_covariance(sigma, cl.A, cl.B, P.theta().covariance);
  }
  return out;
}

SchemeSolution solve_cold(const MpcConfig& cfg, const StateVec& s, const ParamSet& theta, double t, bool robust = true) {
  RnmpcController c(cfg, robust);
  return c.solve_value(s, theta, t);
}

StateVec sample_state(const MpcConfig& cfg, double t, RandomSource& rng) {
  return cfg.reference.pose(t) + StateVec(0.3 * rng.normal(), 0.3 * rng.normal(), 0.3 * rng.normal());
}

}  // namespace

TEST(RnmpcProblem, DecisionVectorSizeAtHorizonFifteen) {
  MpcConfig cfg;
  const RnmpcProblem P(cfg, cfg.initial_covariance.diagonal(), 0.0, ParamSet::initial(15), true);
  EXPECT_EQ(P.num_primal(), 15 * 2 + 15 * 3 + 16 * 3);
  EXPECT_EQ(P.num_eq(), 45);
  EXPECT_EQ(P.num_params(), 6 + 45 + 6 + 16);
}

TEST(RnmpcProblem, FunctionsMatchIndependentEvaluator) {
  RandomSource rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    MpcConfig cfg = fixtures::desk_config(6);
    const double t = 4.0 * trial + 10.0;
    const StateVec s = sample_state(cfg, t, rng);
    const RnmpcProblem P(cfg, s, t, fixtures::random_theta(6, rng), true);
    Eigen::VectorXd p = P.initial_guess();
    for (Eigen::Index i = 0; i < p.size(); ++i) p(i) += 0.02 * rng.normal();
    P.fill_slacks(p);
    const auto ev = P.evaluate(p, Scope::kValues);
    const IndependentEvaluation ref = evaluate_independently(P, p);
    EXPECT_NEAR(ev.objective, ref.objective, 1e-9 * (1.0 + std::abs(ref.objective)));
    EXPECT_LT((ev.eq - ref.eq).lpNorm<Eigen::Infinity>(), 1e-12);
    EXPECT_LT((ev.ineq.head(ref.obstacle_rows.size()) - ref.obstacle_rows).lpNorm<Eigen::Infinity>(), 1e-9);
  }
}

TEST(RnmpcProblem, InitialGuessIsFeasible) {
  MpcConfig cfg = fixtures::desk_config();
  const RnmpcProblem P(cfg, StateVec(-1.0, 2.0, 0.0), 0.0, ParamSet::initial(8), true);
  const auto ev = P.evaluate(P.initial_guess(), Scope::kValues);
  EXPECT_LT(ev.eq.lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_LE(ev.ineq.maxCoeff(), 1e-12);
}

TEST(RnmpcProblem, TightenedRowsDominateRawConstraints) {
  RandomSource rng(5);
  MpcConfig cfg = fixtures::desk_config(6);
  const RnmpcProblem P(cfg, cfg.reference.pose(11.0), 11.0, fixtures::random_theta(6, rng), true);
  Eigen::VectorXd p = P.initial_guess();
  p.segment(P.slack_index(0, 0), 7 * cfg.num_obstacles()).setZero();
  const auto ev = P.evaluate(p, Scope::kValues);
  for (int k = 0; k <= 6; ++k) {
    const Eigen::VectorXd h = obstacle_constraints(P.predicted_state(p, k), cfg.obstacles);
    for (int j = 0; j < cfg.num_obstacles(); ++j) EXPECT_GE(ev.ineq(P.obstacle_row(k, j)), h(j));
  }
}

TEST(RnmpcScheme, ConvergedSolvesMeetKktTolerance) {
  RandomSource rng(7);
  MpcConfig cfg = fixtures::desk_config();
  for (int trial = 0; trial < 10; ++trial) {
    const double t = 6.4 * trial;
    const SchemeSolution sol = solve_cold(cfg, sample_state(cfg, t, rng), ParamSet::initial(8), t);
    ASSERT_TRUE(sol.converged()) << "trial " << trial;
    EXPECT_LE(sol.solution.kkt.max(), 1e-8);
    EXPECT_GE(sol.value, 0.0);
    EXPECT_TRUE((sol.solution.ineq_multipliers.array() >= 0.0).all());
  }
}

TEST(RnmpcScheme, WarmResolveOfSameProblemTakesAtMostTwoIterations) {
  MpcConfig cfg = fixtures::desk_config();
  RnmpcController c(cfg);
  const ParamSet th = ParamSet::initial(8);
  const StateVec s(1.6, 0.6, -0.5);
  ASSERT_TRUE(c.solve_value(s, th, 10.0).converged());
  const SchemeSolution again = c.solve_value(s, th, 10.0);
  ASSERT_TRUE(again.converged());
  EXPECT_LE(again.solution.iterations, 2);
}

TEST(RnmpcScheme, OnReferenceWithoutObstaclesHasNearZeroValue) {
  MpcConfig cfg = fixtures::desk_config();
  cfg.obstacles.clear();
  cfg.slack_weight.clear();
  cfg.terminal_slack_weight.clear();
  ParamSet th = ParamSet::initial(8);
  const double t = 3.0;
  const SchemeSolution sol = solve_cold(cfg, cfg.reference.pose(t), th, t, false);
  ASSERT_TRUE(sol.converged());
  const double stage = cfg.tracking(StateVec::Zero(), StateVec::Zero(), cfg.reference.feedforward(t), ControlVec::Zero());
  EXPECT_LE(sol.value, 1e-3 * stage);
  EXPECT_LT((sol.first_input - cfg.reference.feedforward(t)).norm(), 1e-2);
}

TEST(RnmpcScheme, DoublingInactiveSlackWeightsKeepsSolution) {
  MpcConfig cfg = fixtures::desk_config();
  const double t = 9.0;
  const StateVec s = cfg.reference.pose(t);
  const SchemeSolution a = solve_cold(cfg, s, ParamSet::initial(8), t);
  ASSERT_TRUE(a.converged());
  const RnmpcProblem P(cfg, s, t, ParamSet::initial(8), true);
  ASSERT_LT(a.solution.primal.segment(P.slack_index(0, 0), 9 * cfg.num_obstacles()).lpNorm<Eigen::Infinity>(), 1e-10);
  for (auto& w : cfg.slack_weight) w *= 2.0;
  for (auto& w : cfg.terminal_slack_weight) w *= 2.0;
  const SchemeSolution b = solve_cold(cfg, s, ParamSet::initial(8), t);
  ASSERT_TRUE(b.converged());
  EXPECT_NEAR(a.value, b.value, 1e-9);
  EXPECT_LT((a.solution.primal - b.solution.primal).lpNorm<Eigen::Infinity>(), 1e-7);
}

TEST(RnmpcScheme, ActionValueAtPolicyEqualsValue) {
  RandomSource rng(11);
  MpcConfig cfg = fixtures::desk_config();
  for (int trial = 0; trial < 8; ++trial) {
    const double t = 8.0 * trial + 1.0;
    const StateVec s = sample_state(cfg, t, rng);
    const ParamSet th = trial % 2 == 0 ? ParamSet::initial(8) : fixtures::random_theta(8, rng);
    RnmpcController c(cfg);
    const SchemeSolution v = c.solve_value(s, th, t);
    ASSERT_TRUE(v.converged());
    const SchemeSolution warm = c.solve_action_value(s, v.first_input, th, t, &v.solution);
    ASSERT_TRUE(warm.converged());
    EXPECT_NEAR(warm.value, v.value, 1e-6);
  }
}

TEST(RnmpcScheme, ActionValueDominatesValue) {
  RandomSource rng(13);
  MpcConfig cfg = fixtures::desk_config();
  const ParamSet th = ParamSet::initial(8);
  for (int trial = 0; trial < 10; ++trial) {
    const double t = 6.0 * trial;
    const StateVec s = sample_state(cfg, t, rng);
    RnmpcController c(cfg);
    const SchemeSolution v = c.solve_value(s, th, t);
    ASSERT_TRUE(v.converged());
    const ControlVec a(-1.5 + 3.0 * rng.uniform(), -1.5 + 3.0 * rng.uniform());
    const SchemeSolution q = c.solve_action_value(s, a, th, t, &v.solution);
    ASSERT_TRUE(q.converged()) << "trial " << trial;
    EXPECT_GE(q.value, v.value - 1e-8);
  }
}

TEST(RnmpcScheme, ActionValueGrowsQuadraticallyAwayFromPolicy) {
  MpcConfig cfg = fixtures::desk_config();
  const double t = 5.0;
  const StateVec s = cfg.reference.pose(t) + StateVec(0.1, -0.1, 0.05);
  const ParamSet th = ParamSet::initial(8);
  RnmpcController c(cfg);
  const SchemeSolution v = c.solve_value(s, th, t);
  ASSERT_TRUE(v.converged());
  auto gap = [&](double h) {
    const SchemeSolution q = c.solve_action_value(s, v.first_input + ControlVec(h, 0.0), th, t, &v.solution);
    EXPECT_TRUE(q.converged());
    return q.value - v.value;
  };
  const double g1 = gap(0.1);
  const double g2 = gap(0.05);
  EXPECT_GT(g1, 0.0);
  EXPECT_GT(g2, 0.0);
  EXPECT_NEAR(g1 / g2, 4.0, 0.4);
}

TEST(RnmpcScheme, ZeroTubeMatchesNominalScheme) {
  RandomSource rng(17);
  MpcConfig cfg = fixtures::desk_config();
  for (int trial = 0; trial < 6; ++trial) {
    const double t = 10.0 * trial + 2.0;
    const StateVec s = sample_state(cfg, t, rng);
    const SchemeSolution robust = solve_cold(cfg, s, ParamSet::zero_tube(8), t, true);
    const SchemeSolution nominal = solve_cold(cfg, s, ParamSet::zero_tube(8), t, false);
    ASSERT_TRUE(robust.converged());
    ASSERT_TRUE(nominal.converged());
    EXPECT_NEAR(robust.value, nominal.value, 1e-8);
    EXPECT_LT((robust.first_input - nominal.first_input).norm(), 1e-6);
    EXPECT_LT((nominal_policy(s, t, cfg) - nominal.first_input).norm(), 1e-12);
  }
}

TEST(RnmpcScheme, LargerRadiiDoNotLowerValueWhenSlacksInactive) {
  MpcConfig cfg = fixtures::desk_config();
  const double t = 13.0;
  const StateVec s = cfg.reference.pose(t) + StateVec(0.0, 0.25, 0.0);
  ParamSet th = ParamSet::initial(8, 1.0);
  double previous = -1.0;
  for (int step = 0; step < 4; ++step) {
    const SchemeSolution sol = solve_cold(cfg, s, th, t);
    ASSERT_TRUE(sol.converged());
    const RnmpcProblem P(cfg, s, t, th, true);
    ASSERT_LT(sol.solution.primal.segment(P.slack_index(0, 0), 9 * cfg.num_obstacles()).lpNorm<Eigen::Infinity>(), 1e-10)
        << "radius " << th.radius(0);
    EXPECT_GE(sol.value, previous - 1e-9);
    previous = sol.value;
    th.radius.array() += 0.5;
  }
}

TEST(RnmpcScheme, PolicyIsDeterministicAndWithinBounds) {
  MpcConfig cfg = fixtures::desk_config();
  const StateVec s(2.6, -0.2, 2.0);
  RnmpcController a(cfg);
  RnmpcController b(cfg);
  const ControlVec ua = a.policy(s, ParamSet::initial(8), 20.0);
  const ControlVec ub = b.policy(s, ParamSet::initial(8), 20.0);
  EXPECT_EQ(ua, ub);
  EXPECT_TRUE((ua.array() >= cfg.input_min.array()).all());
  EXPECT_TRUE((ua.array() <= cfg.input_max.array()).all());
}

TEST(RnmpcScheme, ModifiedStageCostTraceTerm) {
  MpcConfig cfg;
  cfg.tracking.state = Eigen::Vector3d(10.0, 10.0, 0.1);
  ParamSet th = ParamSet::initial(15);
  const StateVec x(0.3, -0.2, 1.0);
  const ControlVec u(0.5, 0.1);
  const double base = modified_stage_cost(x, u, Mat3::Zero(), 1.0, th, cfg);
  EXPECT_DOUBLE_EQ(modified_stage_cost(x, u, Mat3::Identity(), 1.0, th, cfg), base);
  th.cost_matrix = Mat3::Identity();
  EXPECT_NEAR(modified_stage_cost(x, u, Mat3::Identity(), 1.0, th, cfg), base + 2.0 * (10.0 + 10.0 + 0.1), 1e-12);
}

TEST(RnmpcProblem, EveryScopeAgreesWithJointScopeColumns) {
  RandomSource rng(41);
  const DerivativeCase c = near_obstacle_case(true, rng);
  const RnmpcProblem P = c.make(c.theta.to_vector());
  const Eigen::VectorXd p = random_primal(P, rng);
  const int n = P.num_primal();
  const int m = P.num_params();
  const auto joint = P.evaluate(p, Scope::kJoint);
  const auto primal = P.evaluate(p, Scope::kPrimal);
  const auto params = P.evaluate(p, Scope::kParams);
  EXPECT_EQ(primal.gradient, joint.gradient.head(n));
  EXPECT_EQ(params.gradient, joint.gradient.tail(m));
  EXPECT_EQ(primal.ineq_jacobian, joint.ineq_jacobian.leftCols(n));
  EXPECT_EQ(params.ineq_jacobian, joint.ineq_jacobian.rightCols(m));
  EXPECT_EQ(primal.eq_jacobian, joint.eq_jacobian.leftCols(n));
  EXPECT_EQ(params.eq_jacobian, joint.eq_jacobian.rightCols(m));
  const Eigen::VectorXd lambda = Eigen::VectorXd::NullaryExpr(P.num_eq(), [&] { return rng.normal(); });
  const Eigen::VectorXd mu = Eigen::VectorXd::NullaryExpr(P.num_ineq(), [&] { return rng.uniform(); });
  const Eigen::MatrixXd hj = P.lagrangian_hessian(p, lambda, mu, Scope::kJoint);
  EXPECT_LT((P.lagrangian_hessian(p, lambda, mu, Scope::kPrimal) - hj.topLeftCorner(n, n)).lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_LT((P.lagrangian_hessian(p, lambda, mu, Scope::kParams) - hj.bottomRightCorner(m, m)).lpNorm<Eigen::Infinity>(), 1e-12);
}
