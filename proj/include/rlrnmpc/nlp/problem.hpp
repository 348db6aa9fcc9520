#pragma once

// Parametric NLP interface shared by the SQP solver and the sensitivity
// routines:
//
//   min_p Phi(p, theta)  s.t.  G(p, theta) = 0,  H(p, theta) <= 0,
//
// with Lagrangian L = Phi + lambda'G + mu'H and mu >= 0.

#include <concepts>

#include <Eigen/Core>

namespace rlrnmpc::nlp {

/// Which variables the derivatives are taken with respect to.
enum class Scope {
  kValues,  ///< no derivatives
  kPrimal,  ///< p
  kParams,  ///< theta
  kJoint,   ///< [p; theta]
};

struct NlpEvaluation {
  double objective = 0.0;
  Eigen::VectorXd eq;
  Eigen::VectorXd ineq;
  Eigen::VectorXd gradient;     ///< dPhi/dy
  Eigen::MatrixXd eq_jacobian;  ///< dG/dy
  Eigen::MatrixXd ineq_jacobian;
};

template <class P>
concept ParametricNlp = requires(const P& problem, const Eigen::VectorXd& v, Scope scope) {
  { problem.num_primal() } -> std::convertible_to<int>;
  { problem.num_params() } -> std::convertible_to<int>;
  { problem.num_eq() } -> std::convertible_to<int>;
  { problem.num_ineq() } -> std::convertible_to<int>;
  { problem.initial_guess() } -> std::convertible_to<Eigen::VectorXd>;
  { problem.evaluate(v, scope) } -> std::same_as<NlpEvaluation>;
  /// Hessian of the Lagrangian (objective weight one) in the given scope.
  { problem.lagrangian_hessian(v, v, v, scope) } -> std::same_as<Eigen::MatrixXd>;
};

inline int scope_columns(Scope scope, int num_primal, int num_params) {
  switch (scope) {
    case Scope::kValues:
      return 0;
    case Scope::kPrimal:
      return num_primal;
    case Scope::kParams:
      return num_params;
    case Scope::kJoint:
      return num_primal + num_params;
  }
  return 0;
}

enum class SolverStatus { kConverged, kMaxIterations, kQpFailure };

inline const char* to_string(SolverStatus s) {
  switch (s) {
    case SolverStatus::kConverged:
      return "converged";
    case SolverStatus::kMaxIterations:
      return "max_iterations";
    case SolverStatus::kQpFailure:
      return "qp_failure";
  }
  return "unknown";
}

struct KktResidual {
  double stationarity = 0.0;
  double feasibility = 0.0;
  double complementarity = 0.0;

  double max() const { return std::max({stationarity, feasibility, complementarity}); }
};

struct PrimalDualSolution {
  Eigen::VectorXd primal;
  Eigen::VectorXd eq_multipliers;
  Eigen::VectorXd ineq_multipliers;
  double objective = 0.0;
  SolverStatus status = SolverStatus::kMaxIterations;
  int iterations = 0;
  KktResidual kkt;
  std::vector<int> active_set;

  bool converged() const { return status == SolverStatus::kConverged; }
};

/// Infinity norms of grad_p L, [G; max(0, H)] and mu o H.
inline KktResidual kkt_residual(const NlpEvaluation& ev, const Eigen::VectorXd& lambda, const Eigen::VectorXd& mu) {
  KktResidual r;
  Eigen::VectorXd grad = ev.gradient;
  if (lambda.size() > 0) grad += ev.eq_jacobian.transpose() * lambda;
  if (mu.size() > 0) grad += ev.ineq_jacobian.transpose() * mu;
  r.stationarity = grad.size() > 0 ? grad.lpNorm<Eigen::Infinity>() : 0.0;
  double feas = ev.eq.size() > 0 ? ev.eq.lpNorm<Eigen::Infinity>() : 0.0;
  if (ev.ineq.size() > 0) feas = std::max(feas, ev.ineq.cwiseMax(0.0).maxCoeff());
  r.feasibility = feas;
  r.complementarity = mu.size() > 0 ? mu.cwiseProduct(ev.ineq).lpNorm<Eigen::Infinity>() : 0.0;
  return r;
}

template <ParametricNlp P>
KktResidual kkt_residual(const P& problem, const PrimalDualSolution& sol) {
  return kkt_residual(problem.evaluate(sol.primal, Scope::kPrimal), sol.eq_multipliers, sol.ineq_multipliers);
}

}  // namespace rlrnmpc::nlp
