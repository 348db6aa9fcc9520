#pragma once

// Dense convex QP by a primal active-set method on the null space of the
// equality constraints:
//
//   min  1/2 d'Hd + g'd   s.t.  Ae d + be = 0,  Ai d + bi <= 0.
//
// The reduced Hessian Z'HZ is eigenvalue-clipped to a positive floor, so the
// subproblem is always strictly convex. A proximal elastic phase finds a
// feasible start when the warm-start guess is not feasible.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>

namespace rlrnmpc::nlp {

struct QpProblem {
  Eigen::MatrixXd hessian;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd eq_matrix;
  Eigen::VectorXd eq_offset;
  Eigen::MatrixXd ineq_matrix;
  Eigen::VectorXd ineq_offset;
};

enum class QpStatus { kSolved, kInfeasible, kRankDeficient, kMaxIterations };

struct QpOptions {
  double hessian_floor = 1e-6;
  int max_iterations = 1000;
};

struct QpResult {
  QpStatus status = QpStatus::kSolved;
  Eigen::VectorXd step;
  Eigen::VectorXd eq_multipliers;
  Eigen::VectorXd ineq_multipliers;
  std::vector<int> active_set;
  int iterations = 0;
  bool regularized = false;
};

namespace detail {

struct ActiveSetResult {
  Eigen::VectorXd x;
  Eigen::VectorXd multipliers;
  std::vector<int> working;
  int iterations = 0;
  bool converged = false;
};

inline Eigen::MatrixXd rows_of(const Eigen::MatrixXd& C, const std::vector<int>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), C.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = C.row(idx[r]);
  return out;
}

/// Greedily keeps the candidate rows that are active at x (any row when
/// active_tol is infinite) and linearly independent of those already kept.
inline std::vector<int> independent_active_rows(const Eigen::MatrixXd& C, const Eigen::VectorXd& e,
                                                const Eigen::VectorXd& x, const std::vector<int>& candidates,
                                                double active_tol) {
  std::vector<int> kept;
  const Eigen::Index n = C.cols();
  Eigen::MatrixXd basis(n, 0);  // orthonormal columns spanning kept rows
  for (int i : candidates) {
    if (static_cast<Eigen::Index>(kept.size()) >= n) break;
    if (std::isfinite(active_tol)) {
      const double slack = e(i) - C.row(i).dot(x);
      if (std::abs(slack) > active_tol * (1.0 + std::abs(e(i)))) continue;
    }
    Eigen::VectorXd r = C.row(i).transpose();
    const double norm0 = r.norm();
    if (norm0 == 0.0) continue;
    for (int pass = 0; pass < 2; ++pass) r -= basis * (basis.transpose() * r);
    if (r.norm() <= 1e-9 * norm0) continue;
    basis.conservativeResize(n, basis.cols() + 1);
    basis.col(basis.cols() - 1) = r / r.norm();
    kept.push_back(i);
  }
  return kept;
}

/// Moves x the least distance that makes the working rows hold with equality,
/// so rows accepted as active within a tolerance are satisfied exactly.
inline void project_onto_rows(const Eigen::MatrixXd& C, const Eigen::VectorXd& e, const std::vector<int>& rows,
                              Eigen::VectorXd& x) {
  if (rows.empty()) return;
  const Eigen::MatrixXd Cw = rows_of(C, rows);
  Eigen::VectorXd r(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) r(static_cast<Eigen::Index>(k)) = e(rows[k]);
  r -= Cw * x;
  x += Cw.transpose() * (Cw * Cw.transpose()).ldlt().solve(r);
}

/// Primal active-set iterations from a feasible x whose working set rows are
/// active and independent. H must be positive definite.
inline ActiveSetResult primal_active_set(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                                         const Eigen::MatrixXd& C, const Eigen::VectorXd& e, Eigen::VectorXd x,
                                         std::vector<int> working, int max_iterations) {
  const Eigen::Index n = H.rows();
  const Eigen::Index m = C.rows();
  ActiveSetResult res;
  Eigen::VectorXd row_norm = C.rowwise().norm();
  std::vector<char> in_working(static_cast<std::size_t>(m), 0);
  for (int i : working) in_working[static_cast<std::size_t>(i)] = 1;
  int zero_steps = 0;
  bool at_subspace_minimum = false;

  for (int it = 0; it < max_iterations; ++it) {
    res.iterations = it + 1;
    const auto nw = static_cast<Eigen::Index>(working.size());
    const Eigen::VectorXd grad = H * x + g;

    Eigen::MatrixXd Q;
    Eigen::MatrixXd R;
    if (nw > 0) {
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(rows_of(C, working).transpose());
      Q = qr.householderQ();
      R = qr.matrixQR().topRows(nw).triangularView<Eigen::Upper>();
    } else {
      Q = Eigen::MatrixXd::Identity(n, n);
    }

    Eigen::VectorXd p = Eigen::VectorXd::Zero(n);
    if (!at_subspace_minimum && nw < n) {
      const Eigen::MatrixXd Z = Q.rightCols(n - nw);
      const Eigen::MatrixXd reduced = Z.transpose() * H * Z;
      Eigen::LLT<Eigen::MatrixXd> llt(reduced);
      p = -Z * llt.solve(Z.transpose() * grad);
    }
    at_subspace_minimum = false;

    const double p_norm = p.lpNorm<Eigen::Infinity>();
    if (p_norm <= 1e-13 * (1.0 + x.lpNorm<Eigen::Infinity>())) {
      Eigen::VectorXd z = Eigen::VectorXd::Zero(nw);
      if (nw > 0) {
        const Eigen::VectorXd rhs = -(Q.leftCols(nw).transpose() * grad);
        z = R.triangularView<Eigen::Upper>().solve(rhs);
      }
      const double z_tol = 1e-12 * (1.0 + grad.lpNorm<Eigen::Infinity>());
      int drop = -1;
      double most_negative = -z_tol;
      for (Eigen::Index r = 0; r < nw; ++r) {
        if (z(r) >= -z_tol) continue;
        if (zero_steps > 5) {
          // Bland: lowest constraint index among the negative multipliers.
          if (drop < 0 || working[static_cast<std::size_t>(r)] < working[static_cast<std::size_t>(drop)])
            drop = static_cast<int>(r);
        } else if (z(r) < most_negative) {
          most_negative = z(r);
          drop = static_cast<int>(r);
        }
      }
      if (drop < 0) {
        res.x = std::move(x);
        res.multipliers = Eigen::VectorXd::Zero(m);
        for (Eigen::Index r = 0; r < nw; ++r)
          res.multipliers(working[static_cast<std::size_t>(r)]) = std::max(0.0, z(r));
        res.working = std::move(working);
        res.converged = true;
        return res;
      }
      in_working[static_cast<std::size_t>(working[static_cast<std::size_t>(drop)])] = 0;
      working.erase(working.begin() + drop);
      continue;
    }

    double alpha = 1.0;
    int blocking = -1;
    const double p_len = p.norm();
    for (Eigen::Index i = 0; i < m; ++i) {
      if (in_working[static_cast<std::size_t>(i)]) continue;
      const double cp = C.row(i).dot(p);
      if (cp <= 1e-12 * row_norm(i) * p_len) continue;
      const double slack = std::max(0.0, e(i) - C.row(i).dot(x));
      const double a = slack / cp;
      if (a < alpha || (a == alpha && blocking >= 0 && i < blocking)) {
        alpha = a;
        blocking = static_cast<int>(i);
      }
    }
    x += alpha * p;
    zero_steps = alpha == 0.0 ? zero_steps + 1 : 0;
    if (blocking >= 0) {
      working.push_back(blocking);
      in_working[static_cast<std::size_t>(blocking)] = 1;
    } else {
      at_subspace_minimum = true;
    }
  }
  res.x = std::move(x);
  res.multipliers = Eigen::VectorXd::Zero(m);
  res.working = std::move(working);
  return res;
}

/// Solves min 1/2 q'Hq + g'q s.t. Cq <= e starting from a working-set guess.
inline ActiveSetResult solve_inequality_qp(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                                           const Eigen::MatrixXd& C, const Eigen::VectorXd& e,
                                           const std::vector<int>& guess, int max_iterations, bool& feasible) {
  const Eigen::Index n = H.rows();
  const Eigen::Index m = C.rows();
  constexpr double kFeasTol = 1e-10;
  feasible = true;
  auto max_violation = [&](const Eigen::VectorXd& x) {
    return m == 0 ? 0.0 : (C * x - e).maxCoeff();
  };

  // Candidate start: minimizer over the guessed working set.
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(n);
  std::vector<int> guess_valid;
  for (int i : guess)
    if (i >= 0 && i < m) guess_valid.push_back(i);
  guess_valid = independent_active_rows(C, e, x0, guess_valid, std::numeric_limits<double>::infinity());
  if (!guess_valid.empty()) {
    const auto nw = static_cast<Eigen::Index>(guess_valid.size());
    Eigen::VectorXd ew(nw);
    for (Eigen::Index r = 0; r < nw; ++r) ew(r) = e(guess_valid[static_cast<std::size_t>(r)]);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(rows_of(C, guess_valid).transpose());
    const Eigen::MatrixXd Q = qr.householderQ();
    const Eigen::MatrixXd R = qr.matrixQR().topRows(nw).triangularView<Eigen::Upper>();
    // Point on the guessed constraints, then the minimizer along their null space.
    Eigen::VectorXd xp = Q.leftCols(nw) * R.transpose().triangularView<Eigen::Lower>().solve(ew);
    if (nw < n) {
      const Eigen::MatrixXd Z = Q.rightCols(n - nw);
      Eigen::LLT<Eigen::MatrixXd> llt(Z.transpose() * H * Z);
      xp += -Z * llt.solve(Z.transpose() * (H * xp + g));
    }
    if (max_violation(xp) <= kFeasTol * (1.0 + xp.lpNorm<Eigen::Infinity>())) x0 = xp;
  }

  std::vector<int> all(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) all[static_cast<std::size_t>(i)] = static_cast<int>(i);

  if (max_violation(x0) > kFeasTol * (1.0 + x0.lpNorm<Eigen::Infinity>())) {
    // Proximal elastic phase: min t + eps/2 |(x - x0, t)|^2  s.t.  Cx - t <= e, t >= 0.
    constexpr double eps = 1e-6;
    Eigen::MatrixXd H1 = eps * Eigen::MatrixXd::Identity(n + 1, n + 1);
    Eigen::VectorXd g1(n + 1);
    g1.head(n) = -eps * x0;
    g1(n) = 1.0;
    Eigen::MatrixXd C1 = Eigen::MatrixXd::Zero(m + 1, n + 1);
    C1.topLeftCorner(m, n) = C;
    C1.col(n).head(m).setConstant(-1.0);
    C1(m, n) = -1.0;
    Eigen::VectorXd e1 = Eigen::VectorXd::Zero(m + 1);
    e1.head(m) = e;
    Eigen::VectorXd y0(n + 1);
    y0.head(n) = x0;
    Eigen::Index worst = 0;
    y0(n) = (C * x0 - e).maxCoeff(&worst);
    ActiveSetResult phase1 =
        primal_active_set(H1, g1, C1, e1, y0, {static_cast<int>(worst)}, max_iterations);
    if (!phase1.converged || phase1.x(n) > kFeasTol * (1.0 + phase1.x.head(n).lpNorm<Eigen::Infinity>())) {
      feasible = false;
      ActiveSetResult fail;
      fail.x = phase1.x.head(n);
      fail.multipliers = Eigen::VectorXd::Zero(m);
      fail.iterations = phase1.iterations;
      return fail;
    }
    x0 = phase1.x.head(n);
    std::vector<int> seeded;
    for (int i : phase1.working)
      if (i < m) seeded.push_back(i);
    for (int i : all) seeded.push_back(i);
    std::vector<int> working = independent_active_rows(C, e, x0, seeded, 1e-9);
    project_onto_rows(C, e, working, x0);
    ActiveSetResult r = primal_active_set(H, g, C, e, x0, std::move(working), max_iterations);
    r.iterations += phase1.iterations;
    return r;
  }

  std::vector<int> seeded = guess_valid;
  for (int i : all) seeded.push_back(i);
  std::vector<int> working = independent_active_rows(C, e, x0, seeded, 1e-9);
  project_onto_rows(C, e, working, x0);
  return primal_active_set(H, g, C, e, x0, std::move(working), max_iterations);
}

}  // namespace detail

inline QpResult solve_qp(const QpProblem& qp, const std::vector<int>& active_guess = {},
                         const QpOptions& opts = {}) {
  const Eigen::Index n = qp.hessian.rows();
  const Eigen::Index me = qp.eq_matrix.rows();
  const Eigen::Index mi = qp.ineq_matrix.rows();
  QpResult out;

  Eigen::VectorXd d0 = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd Y(n, 0);
  Eigen::MatrixXd Z = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd R;
  if (me > 0) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(qp.eq_matrix.transpose());
    const Eigen::MatrixXd Q = qr.householderQ();
    R = qr.matrixQR().topRows(me).triangularView<Eigen::Upper>();
    const double rmax = R.diagonal().cwiseAbs().maxCoeff();
    if (me > n || R.diagonal().cwiseAbs().minCoeff() <= 1e-12 * std::max(1.0, rmax)) {
      out.status = QpStatus::kRankDeficient;
      return out;
    }
    Y = Q.leftCols(me);
    Z = Q.rightCols(n - me);
    const Eigen::VectorXd dy = R.transpose().triangularView<Eigen::Lower>().solve(-qp.eq_offset);
    d0 = Y * dy;
  }

  Eigen::MatrixXd Hr = Z.transpose() * qp.hessian * Z;
  Hr = 0.5 * (Hr + Hr.transpose());
  const Eigen::VectorXd gr = Z.transpose() * (qp.gradient + qp.hessian * d0);
  if (Hr.rows() > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Hr);
    const Eigen::VectorXd& ev = es.eigenvalues();
    if (ev.minCoeff() < opts.hessian_floor) {
      out.regularized = true;
      Hr = es.eigenvectors() * ev.cwiseMax(opts.hessian_floor).asDiagonal() * es.eigenvectors().transpose();
      Hr = 0.5 * (Hr + Hr.transpose());
    }
  }

  const Eigen::MatrixXd C = qp.ineq_matrix * Z;
  const Eigen::VectorXd e = -(qp.ineq_offset + qp.ineq_matrix * d0);
  bool feasible = true;
  detail::ActiveSetResult as =
      detail::solve_inequality_qp(Hr, gr, C, e, active_guess, opts.max_iterations, feasible);
  out.iterations = as.iterations;
  if (!feasible) {
    out.status = QpStatus::kInfeasible;
    return out;
  }
  if (!as.converged) {
    out.status = QpStatus::kMaxIterations;
    return out;
  }

  out.step = d0 + Z * as.x;
  out.ineq_multipliers = mi > 0 ? as.multipliers : Eigen::VectorXd();
  out.active_set = as.working;
  std::sort(out.active_set.begin(), out.active_set.end());
  if (me > 0) {
    Eigen::VectorXd resid = qp.hessian * out.step + qp.gradient;
    if (mi > 0) resid += qp.ineq_matrix.transpose() * out.ineq_multipliers;
    out.eq_multipliers = R.triangularView<Eigen::Upper>().solve(-(Y.transpose() * resid));
  } else {
    out.eq_multipliers = Eigen::VectorXd();
  }
  return out;
}

}  // namespace rlrnmpc::nlp
