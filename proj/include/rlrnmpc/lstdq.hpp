#pragma once

// Second-order LSTDQ: temporal-difference terms from the value and
// action-value schemes, batch estimates of the Newton system, a damped Newton
// step and its projection onto parameters with a PSD covariance block.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Eigenvalues>

#include "rlrnmpc/nlp/sensitivity.hpp"
#include "rlrnmpc/rnmpc.hpp"
#include "rlrnmpc/types.hpp"
#include "rlrnmpc/uncertainty.hpp"

namespace rlrnmpc {

struct TransitionSample {
  StateVec s = StateVec::Zero();
  ControlVec a = ControlVec::Zero();
  double cost = 0.0;  ///< baseline stage cost L(s, a)
  StateVec s_next = StateVec::Zero();
  double t = 0.0;     ///< absolute time of s
};

class SampleRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyBatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// delta = L(s, a) + gamma V(s+) - Q(s, a) with the parameter derivatives of
/// both optimal values.
struct TdTerms {
  double delta = 0.0;
  double action_value = 0.0;
  double next_value = 0.0;
  Eigen::VectorXd action_value_gradient;
  Eigen::MatrixXd action_value_hessian;
  Eigen::VectorXd next_value_gradient;
  bool degenerate_active_set = false;
};

/// TD terms from a value solution at s (warm start for the action-value
/// solve) and a value solution at s+ computed with the same parameters.
inline TdTerms td_terms(const TransitionSample& sample, const ParamSet& theta, RnmpcController& controller,
                        const SchemeSolution& value_at_s, const SchemeSolution& value_next) {
  const MpcConfig& cfg = controller.config();
  if (!value_next.converged()) throw SampleRejected("td_terms: value solve at the successor state did not converge");
  const SchemeSolution q =
      controller.solve_action_value(sample.s, sample.a, theta, sample.t,
                                    value_at_s.solution.primal.size() > 0 ? &value_at_s.solution : nullptr);
  if (!q.converged()) throw SampleRejected("td_terms: action-value solve did not converge");

  const RnmpcProblem qp = controller.action_problem(sample.s, sample.a, theta, sample.t);
  const RnmpcProblem vp = controller.value_problem(sample.s_next, theta, sample.t + cfg.sampling_time);
  const nlp::ValueSensitivity qs = nlp::value_sensitivity(qp, q.solution, true);
  const nlp::ValueSensitivity vs = nlp::value_sensitivity(vp, value_next.solution, false);

  TdTerms out;
  out.action_value = q.value;
  out.next_value = value_next.value;
  out.delta = sample.cost + cfg.discount * value_next.value - q.value;
  out.action_value_gradient = qs.gradient;
  out.action_value_hessian = qs.hessian;
  out.next_value_gradient = vs.gradient;
  out.degenerate_active_set = qs.degenerate_active_set || vs.degenerate_active_set;
  return out;
}

/// Self-contained TD evaluation: solves V(s), V(s+) and Q(s, a) from scratch.
inline TdTerms td_error(const TransitionSample& sample, const ParamSet& theta, const MpcConfig& cfg) {
  RnmpcController controller(cfg, true);
  const SchemeSolution v = controller.solve_value(sample.s, theta, sample.t);
  const SchemeSolution v_next = controller.solve_value(sample.s_next, theta, sample.t + cfg.sampling_time);
  return td_terms(sample, theta, controller, v, v_next);
}

struct BatchStatistics {
  Eigen::MatrixXd A;  ///< mean of delta d2Q + dQ d(delta)'
  Eigen::VectorXd b;  ///< mean of delta dQ
  int accepted = 0;
  int rejected = 0;
  int degenerate = 0;
  double mean_abs_td = 0.0;
};

/// Sample means of the Newton system over the accepted TD terms, with
/// d(delta)/dtheta = gamma dV(s+) - dQ(s, a).
inline BatchStatistics accumulate_batch(const std::vector<TdTerms>& terms, double discount, int rejected = 0) {
  if (terms.empty()) throw EmptyBatch("accumulate_batch: no accepted samples");
  const Eigen::Index n = terms.front().action_value_gradient.size();
  BatchStatistics st;
  st.A = Eigen::MatrixXd::Zero(n, n);
  st.b = Eigen::VectorXd::Zero(n);
  st.rejected = rejected;
  for (const TdTerms& t : terms) {
    const Eigen::VectorXd grad_delta = discount * t.next_value_gradient - t.action_value_gradient;
    st.A += t.delta * t.action_value_hessian + t.action_value_gradient * grad_delta.transpose();
    st.b += t.delta * t.action_value_gradient;
    st.mean_abs_td += std::abs(t.delta);
    if (t.degenerate_active_set) ++st.degenerate;
  }
  st.accepted = static_cast<int>(terms.size());
  const double inv = 1.0 / static_cast<double>(st.accepted);
  st.A *= inv;
  st.b *= inv;
  st.mean_abs_td *= inv;
  return st;
}

struct NewtonStep {
  Eigen::VectorXd step;
  double damping = 0.0;
  bool fallback = false;  ///< no damping level gave a usable system; step = -alpha b
};

struct NewtonOptions {
  std::vector<double> damping_ladder{0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4};
  double max_condition = 1e12;
};

/// F = -alpha (A_sym + mu I)^-1 b for the smallest ladder damping mu whose
/// system has condition number at most max_condition.
inline NewtonStep newton_step(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, double alpha,
                              const NewtonOptions& opts = {}) {
  if (A.rows() != A.cols() || A.rows() != b.size()) throw DomainError("newton_step: dimension mismatch");
  NewtonStep out;
  const Eigen::MatrixXd sym = 0.5 * (A + A.transpose());
  if (sym.allFinite() && b.allFinite()) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    if (es.info() == Eigen::Success) {
      const Eigen::VectorXd coeffs = es.eigenvectors().transpose() * b;
      for (double mu : opts.damping_ladder) {
        const Eigen::ArrayXd ev = es.eigenvalues().array() + mu;
        const double lo = ev.abs().minCoeff();
        const double hi = ev.abs().maxCoeff();
        if (lo <= 0.0 || hi > opts.max_condition * lo) continue;
        out.step = -alpha * (es.eigenvectors() * (coeffs.array() / ev).matrix());
        out.damping = mu;
        return out;
      }
    }
  }
  out.step = -alpha * b;
  out.fallback = true;
  return out;
}

/// Solves min 1/2 |d|^2 - F'd s.t. Lambda(theta + d) PSD. The objective is
/// separable and the packed covariance coordinates are Frobenius-isometric, so
/// the covariance block is the PSD projection of the unconstrained target and
/// every other component is F itself.
inline Eigen::VectorXd project_step(const ParamSet& theta, const Eigen::VectorXd& F) {
  const ThetaLayout l = theta.layout();
  if (F.size() != l.size()) throw DomainError("project_step: size mismatch");
  Eigen::VectorXd d = F;
  const Mat3 target = theta.covariance + smat(F.segment<6>(l.covariance(0)));
  d.segment<6>(l.covariance(0)) = svec(project_psd(target)) - svec(theta.covariance);
  return d;
}

inline constexpr double kPsdTolerance = 1e-10;

/// theta + d with negative radii clamped to zero.
inline ParamSet apply_update(const ParamSet& theta, const Eigen::VectorXd& d) {
  const ThetaLayout l = theta.layout();
  if (d.size() != l.size()) throw DomainError("apply_update: size mismatch");
  if (!d.allFinite()) throw DomainError("apply_update: non-finite step");
  ParamSet out = ParamSet::from_vector(theta.to_vector() + d, theta.horizon());
  out.cost_matrix = 0.5 * (out.cost_matrix + out.cost_matrix.transpose());
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
  out.radius = out.radius.cwiseMax(0.0);
  if (min_eigenvalue(out.covariance) < -kPsdTolerance)
    throw InvariantViolation("apply_update: covariance block left the PSD cone");
  return out;
}

}  // namespace rlrnmpc
