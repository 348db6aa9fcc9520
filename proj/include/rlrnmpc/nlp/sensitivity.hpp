#pragma once

// First and second derivatives of an optimal value with respect to the
// problem parameters, taken from the Lagrangian at a fixed primal-dual point.

#include "rlrnmpc/nlp/problem.hpp"

namespace rlrnmpc::nlp {

struct ValueSensitivity {
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
  /// Set when some inequality is weakly active (|H_i| and mu_i both below the
  /// threshold), where the value function need not be differentiable.
  bool degenerate_active_set = false;
};

inline bool degenerate_active_set(const NlpEvaluation& ev, const Eigen::VectorXd& mu, double threshold = 1e-8) {
  for (Eigen::Index i = 0; i < mu.size(); ++i)
    if (ev.ineq(i) >= -threshold && mu(i) <= threshold) return true;
  return false;
}

template <ParametricNlp P>
bool degenerate_active_set(const P& problem, const PrimalDualSolution& sol, double threshold = 1e-8) {
  return degenerate_active_set(problem.evaluate(sol.primal, Scope::kValues), sol.ineq_multipliers, threshold);
}

/// dL/dtheta = dPhi/dtheta + dG/dtheta' lambda + dH/dtheta' mu at fixed z.
template <ParametricNlp P>
Eigen::VectorXd value_gradient_theta(const P& problem, const PrimalDualSolution& sol) {
  const NlpEvaluation ev = problem.evaluate(sol.primal, Scope::kParams);
  Eigen::VectorXd g = ev.gradient;
  if (sol.eq_multipliers.size() > 0) g += ev.eq_jacobian.transpose() * sol.eq_multipliers;
  if (sol.ineq_multipliers.size() > 0) g += ev.ineq_jacobian.transpose() * sol.ineq_multipliers;
  return g;
}

/// d2L/dtheta2 at fixed z; the correction through z(theta) is not included.
template <ParametricNlp P>
Eigen::MatrixXd value_hessian_theta(const P& problem, const PrimalDualSolution& sol) {
  return problem.lagrangian_hessian(sol.primal, sol.eq_multipliers, sol.ineq_multipliers, Scope::kParams);
}

template <ParametricNlp P>
ValueSensitivity value_sensitivity(const P& problem, const PrimalDualSolution& sol, bool with_hessian = true) {
  ValueSensitivity out;
  const NlpEvaluation ev = problem.evaluate(sol.primal, Scope::kParams);
  out.gradient = ev.gradient;
  if (sol.eq_multipliers.size() > 0) out.gradient += ev.eq_jacobian.transpose() * sol.eq_multipliers;
  if (sol.ineq_multipliers.size() > 0) out.gradient += ev.ineq_jacobian.transpose() * sol.ineq_multipliers;
  if (with_hessian) out.hessian = value_hessian_theta(problem, sol);
  out.degenerate_active_set = degenerate_active_set(ev, sol.ineq_multipliers);
  return out;
}

}  // namespace rlrnmpc::nlp
