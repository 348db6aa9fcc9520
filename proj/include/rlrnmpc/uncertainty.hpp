#pragma once

// Ellipsoidal tube machinery: LQR feedback gains, closed-loop linearization,
// covariance propagation, ellipsoid probability content and the closed-form
// tightening of a linearized constraint over an ellipsoid.

#include <cmath>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "rlrnmpc/dynamics.hpp"
#include "rlrnmpc/gamma.hpp"
#include "rlrnmpc/types.hpp"

namespace rlrnmpc {

/// Smoothing added under the square root of the tightening margin.
inline constexpr double kMarginSmoothing = 1e-9;

struct RiccatiOptions {
  double tolerance = 1e-9;
  int max_iterations = 500;
};

/// Infinite-horizon discrete LQR gain by fixed-point Riccati iteration,
/// K = (R + B'PB)^-1 B'PA. Throws NonConvergence if the iteration does not
/// settle.
inline Eigen::MatrixXd lqr_gain(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                                const RiccatiOptions& opts = {}) {
  Eigen::MatrixXd P = Q;
  for (int it = 0; it < opts.max_iterations; ++it) {
    const Eigen::MatrixXd BtP = B.transpose() * P;
    const Eigen::MatrixXd gain = (R + BtP * B).ldlt().solve(BtP * A);
    Eigen::MatrixXd next = Q + A.transpose() * P * A - A.transpose() * P * B * gain;
    next = 0.5 * (next + next.transpose());
    const double change = (next - P).norm();
    P = std::move(next);
    if (!P.allFinite()) break;
    if (change < opts.tolerance) {
      const Eigen::MatrixXd BtPc = B.transpose() * P;
      return (R + BtPc * B).ldlt().solve(BtPc * A);
    }
  }
  throw NonConvergence("lqr_gain: Riccati iteration did not converge");
}

struct ClosedLoopMatrices {
  Mat3 A;  ///< df/dx - df/du K
  Mat3 B;  ///< df/dd
};

inline ClosedLoopMatrices closed_loop_matrices(const StateVec& x, const ControlVec& u,
                                               const DisturbanceVec& d_bar, const Mat23& K,
                                               double ts = kSamplingTime) {
  const ModelJacobians J = jacobians(x, u, d_bar, ts);
  return {J.dfdx - J.dfdu * K, J.dfdd};
}

inline Mat3 propagate_covariance(const Mat3& sigma, const Mat3& A, const Mat3& B, const Mat3& lambda) {
  const Mat3 next = A * sigma * A.transpose() + B * lambda * B.transpose();
  return 0.5 * (next + next.transpose());
}

/// Probability mass of an n-dimensional standard normal inside the ball of
/// Mahalanobis radius sigma: P(n/2, sigma^2/2).
inline double membership_probability(int n, double sigma) {
  if (n < 1) throw DomainError("membership_probability: dimension must be >= 1");
  if (sigma < 0.0) throw DomainError("membership_probability: radius must be nonnegative");
  return regularized_lower_gamma(0.5 * n, 0.5 * sigma * sigma);
}

/// b = (dh/dx - dh/du K)^T for a scalar constraint h.
inline Eigen::Vector3d constraint_gradient(const Eigen::RowVector3d& h_x, const Eigen::RowVector2d& h_u,
                                           const Mat23& K) {
  return (h_x - h_u * K).transpose();
}

/// Worst-case increase of b'dx over {dx : dx' Sigma^-1 dx / 2 <= sigma}.
inline double tightening_margin(const Eigen::Vector3d& b, const Mat3& sigma_mat, double sigma) {
  const double q = b.dot(sigma_mat * b);
  return std::sqrt(2.0 * sigma) * std::sqrt(q + kMarginSmoothing);
}

inline double min_eigenvalue(const Mat3& m) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

/// Frobenius-nearest positive semidefinite matrix (eigenvalue clipping).
inline Mat3 project_psd(const Mat3& m) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (m + m.transpose()));
  const Eigen::Vector3d clipped = es.eigenvalues().cwiseMax(0.0);
  Mat3 out = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

}  // namespace rlrnmpc
