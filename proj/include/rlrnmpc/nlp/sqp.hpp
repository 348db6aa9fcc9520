#pragma once

// Line-search SQP with exact Lagrangian Hessians and an l1 merit function.

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <vector>

#include "rlrnmpc/nlp/problem.hpp"
#include "rlrnmpc/nlp/qp.hpp"

namespace rlrnmpc::nlp {

struct SqpOptions {
  double tolerance = 1e-8;
  int max_iterations = 100;
  double hessian_floor = 1e-6;
  /// Floor used when the first QP attempt of an iteration fails.
  double retry_hessian_floor = 1e-3;
  double armijo = 1e-4;
  double min_step = 1e-12;
  /// Optional line-delimited iterate log: iteration, merit, KKT norms, step length.
  std::ostream* log = nullptr;
};

class SqpSolver {
 public:
  explicit SqpSolver(SqpOptions opts = {}) : opts_(opts) {}

  const SqpOptions& options() const { return opts_; }

  template <ParametricNlp P>
  PrimalDualSolution solve(const P& problem, const PrimalDualSolution* warm = nullptr) const {
    const int n = problem.num_primal();
    const int me = problem.num_eq();
    const int mi = problem.num_ineq();

    Eigen::VectorXd p;
    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(me);
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(mi);
    std::vector<int> active;
    if (warm != nullptr && warm->primal.size() == n) {
      p = warm->primal;
      if (warm->eq_multipliers.size() == me) lambda = warm->eq_multipliers;
      if (warm->ineq_multipliers.size() == mi) mu = warm->ineq_multipliers.cwiseMax(0.0);
      active = warm->active_set;
    } else {
      p = problem.initial_guess();
    }

    double nu = 1.0;
    auto infeasibility = [](const NlpEvaluation& e) {
      double v = e.eq.size() > 0 ? e.eq.template lpNorm<1>() : 0.0;
      if (e.ineq.size() > 0) v += e.ineq.cwiseMax(0.0).sum();
      return v;
    };

    PrimalDualSolution best;
    double best_score = std::numeric_limits<double>::infinity();
    auto record = [&](const NlpEvaluation& e, const KktResidual& k, int iterations) {
      const double score = k.max();
      if (score < best_score) {
        best_score = score;
        best.primal = p;
        best.eq_multipliers = lambda;
        best.ineq_multipliers = mu;
        best.objective = e.objective;
        best.kkt = k;
        best.iterations = iterations;
        best.active_set = active;
      }
    };

    NlpEvaluation ev = problem.evaluate(p, Scope::kPrimal);
    for (int iter = 0;; ++iter) {
      const KktResidual kkt = kkt_residual(ev, lambda, mu);
      record(ev, kkt, iter);
      if (opts_.log != nullptr)
        *opts_.log << iter << ' ' << ev.objective + nu * infeasibility(ev) << ' ' << kkt.stationarity << ' '
                   << kkt.feasibility << ' ' << kkt.complementarity << '\n';
      if (kkt.max() <= opts_.tolerance) {
        PrimalDualSolution out;
        out.primal = p;
        out.eq_multipliers = lambda;
        out.ineq_multipliers = mu;
        out.objective = ev.objective;
        out.status = SolverStatus::kConverged;
        out.iterations = iter;
        out.kkt = kkt;
        out.active_set = active_rows(ev, mu);
        return out;
      }
      if (iter >= opts_.max_iterations) break;

      const Eigen::MatrixXd hessian = problem.lagrangian_hessian(p, lambda, mu, Scope::kPrimal);
      QpResult qp;
      if (!solve_subproblem(ev, hessian, active, mu, qp)) {
        best.status = SolverStatus::kQpFailure;
        best.iterations = iter;
        return best;
      }
      const Eigen::VectorXd& d = qp.step;
      active = qp.active_set;

      double mult_max = 0.0;
      if (me > 0) mult_max = std::max(mult_max, qp.eq_multipliers.lpNorm<Eigen::Infinity>());
      if (mi > 0) mult_max = std::max(mult_max, qp.ineq_multipliers.lpNorm<Eigen::Infinity>());
      nu = std::max(nu, 1.1 * mult_max);

      const double infeas0 = infeasibility(ev);
      const double merit0 = ev.objective + nu * infeas0;
      const double slope = ev.gradient.dot(d) - nu * infeas0;
      auto merit_of = [&](const NlpEvaluation& e) { return e.objective + nu * infeasibility(e); };

      double alpha = 1.0;
      Eigen::VectorXd trial = p + d;
      NlpEvaluation trial_ev = problem.evaluate(trial, Scope::kValues);
      bool accepted = merit_of(trial_ev) <= merit0 + opts_.armijo * std::min(slope, 0.0);

      if (!accepted) {
        // Second-order correction: re-linearize the constraints at p + d.
        QpProblem soc = base_qp(ev, hessian);
        soc.eq_offset = trial_ev.eq - ev.eq_jacobian * d;
        soc.ineq_offset = trial_ev.ineq - ev.ineq_jacobian * d;
        QpOptions qo;
        qo.hessian_floor = opts_.hessian_floor;
        const QpResult corr = solve_qp(soc, qp.active_set, qo);
        if (corr.status == QpStatus::kSolved) {
          const Eigen::VectorXd soc_trial = p + corr.step;
          NlpEvaluation soc_ev = problem.evaluate(soc_trial, Scope::kValues);
          if (merit_of(soc_ev) <= merit0 + opts_.armijo * std::min(slope, 0.0)) {
            trial = soc_trial;
            trial_ev = std::move(soc_ev);
            accepted = true;
          }
        }
      }
      while (!accepted && alpha > opts_.min_step) {
        alpha *= 0.5;
        trial = p + alpha * d;
        trial_ev = problem.evaluate(trial, Scope::kValues);
        accepted = merit_of(trial_ev) <= merit0 + opts_.armijo * alpha * std::min(slope, 0.0);
      }
      if (!accepted) {
        // No merit decrease along d: take the full step anyway and let the
        // best-iterate record guard the result.
        alpha = 1.0;
        trial = p + d;
      }

      p = trial;
      // Full dual step: the QP multipliers are the best available estimate
      // even when the primal step is damped.
      if (me > 0) lambda = qp.eq_multipliers;
      if (mi > 0) mu = qp.ineq_multipliers;
      ev = problem.evaluate(p, Scope::kPrimal);
      if (opts_.log != nullptr) *opts_.log << "  step " << alpha << '\n';
    }
    best.status = SolverStatus::kMaxIterations;
    best.iterations = opts_.max_iterations;
    return best;
  }

 private:
  static QpProblem base_qp(const NlpEvaluation& ev, const Eigen::MatrixXd& hessian) {
    QpProblem qp;
    qp.hessian = hessian;
    qp.gradient = ev.gradient;
    qp.eq_matrix = ev.eq_jacobian;
    qp.eq_offset = ev.eq;
    qp.ineq_matrix = ev.ineq_jacobian;
    qp.ineq_offset = ev.ineq;
    return qp;
  }

  static std::vector<int> active_rows(const NlpEvaluation& ev, const Eigen::VectorXd& mu) {
    std::vector<int> rows;
    for (Eigen::Index i = 0; i < ev.ineq.size(); ++i)
      if (mu(i) > 0.0 || std::abs(ev.ineq(i)) <= 1e-10) rows.push_back(static_cast<int>(i));
    return rows;
  }

  // The Lagrangian Hessian may be indefinite on the equality null space
  // (concave obstacle constraints with positive multipliers). Adding
  // rho/2 |J_A d + c_A|^2 for the constraints expected to be active leaves
  // the QP solution unchanged whenever that set stays active while restoring
  // positive curvature, so eigenvalue clipping rarely has to act.
  bool solve_subproblem(const NlpEvaluation& ev, const Eigen::MatrixXd& hessian, const std::vector<int>& guess,
                        const Eigen::VectorXd& mu, QpResult& out) const {
    std::vector<int> expected;
    for (int i : guess)
      if (i >= 0 && i < mu.size() && mu(i) > 0.0) expected.push_back(i);

    QpOptions qo;
    qo.hessian_floor = opts_.hessian_floor;
    const double rho = std::max(1.0, hessian.diagonal().cwiseAbs().maxCoeff());
    // The penalty is exact only if every penalized row stays active, so drop
    // rows the QP released and re-solve until the two sets agree.
    for (int attempt = 0; attempt < 4 && !expected.empty(); ++attempt) {
      QpProblem qp = base_qp(ev, hessian);
      const Eigen::MatrixXd JA = detail::rows_of(ev.ineq_jacobian, expected);
      Eigen::VectorXd cA(static_cast<Eigen::Index>(expected.size()));
      for (std::size_t r = 0; r < expected.size(); ++r) cA(static_cast<Eigen::Index>(r)) = ev.ineq(expected[r]);
      qp.hessian += rho * JA.transpose() * JA;
      qp.gradient += rho * JA.transpose() * cA;
      QpResult r = solve_qp(qp, guess, qo);
      if (r.status != QpStatus::kSolved || !r.step.allFinite()) break;
      std::vector<int> kept;
      for (int i : expected)
        if (std::find(r.active_set.begin(), r.active_set.end(), i) != r.active_set.end()) kept.push_back(i);
      if (kept.size() == expected.size()) {
        out = std::move(r);
        return true;
      }
      expected = std::move(kept);
    }
    const QpProblem qp = base_qp(ev, hessian);
    out = solve_qp(qp, guess, qo);
    if (out.status == QpStatus::kSolved) return true;
    qo.hessian_floor = opts_.retry_hessian_floor;
    out = solve_qp(qp, guess, qo);
    return out.status == QpStatus::kSolved;
  }

  SqpOptions opts_;
};

}  // namespace rlrnmpc::nlp
