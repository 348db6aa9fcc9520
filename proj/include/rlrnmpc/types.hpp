#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace rlrnmpc {

/// Robot pose [x, y, psi]. psi is never wrapped.
using StateVec = Eigen::Vector3d;
/// Input [v, omega].
using ControlVec = Eigen::Vector2d;
/// Model disturbance [d1, d2, d3].
using DisturbanceVec = Eigen::Vector3d;

using Mat3 = Eigen::Matrix3d;
using Mat32 = Eigen::Matrix<double, 3, 2>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat2 = Eigen::Matrix2d;

inline constexpr int kStateDim = 3;
inline constexpr int kControlDim = 2;
inline constexpr int kDisturbanceDim = 3;

/// Default sampling time in seconds.
inline constexpr double kSamplingTime = 0.2;

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NonConvergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Index of a packed symmetric 3x3 entry in row-major upper-triangle order
/// (00, 01, 02, 11, 12, 22).
constexpr int sym_index(int i, int j) {
  if (i > j) return sym_index(j, i);
  constexpr int offset[3] = {0, 3, 5};
  return offset[i] + (j - i);
}

inline constexpr double kSqrt2 = 1.41421356237309504880;

/// Packs a symmetric 3x3 matrix into 6 coordinates with off-diagonal entries
/// scaled by sqrt(2), so that the Euclidean norm of the packed vector equals
/// the Frobenius norm of the matrix.
inline Eigen::Matrix<double, 6, 1> svec(const Mat3& m) {
  Eigen::Matrix<double, 6, 1> v;
  for (int i = 0; i < 3; ++i)
    for (int j = i; j < 3; ++j)
      v(sym_index(i, j)) = (i == j ? 1.0 : kSqrt2) * 0.5 * (m(i, j) + m(j, i));
  return v;
}

inline Mat3 smat(const Eigen::Ref<const Eigen::Matrix<double, 6, 1>>& v) {
  Mat3 m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      m(i, j) = (i == j ? 1.0 : 1.0 / kSqrt2) * v(sym_index(i, j));
  return m;
}

/// d(smat(v))/dv_k as a matrix.
inline Mat3 smat_basis(int k) {
  Eigen::Matrix<double, 6, 1> e = Eigen::Matrix<double, 6, 1>::Zero();
  e(k) = 1.0;
  return smat(e);
}

}  // namespace rlrnmpc
