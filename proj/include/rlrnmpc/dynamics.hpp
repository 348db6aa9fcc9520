#pragma once

// Wheeled mobile robot model: unicycle kinematics, RK4 discretization with
// zero-order-hold input, the disturbance-structured prediction model and the
// stochastic plant used as the "real" system.

#include <array>
#include <cmath>

#include "rlrnmpc/random.hpp"
#include "rlrnmpc/types.hpp"

namespace rlrnmpc {

template <typename T>
using Array3 = std::array<T, 3>;
template <typename T>
using Array2 = std::array<T, 2>;

template <typename T>
Array3<T> wmr_continuous(const Array3<T>& x, const Array2<T>& u) {
  using std::cos;
  using std::sin;
  return {u[0] * cos(x[2]), u[0] * sin(x[2]), u[1]};
}

template <typename T>
Array3<T> rk4_step(const Array3<T>& x, const Array2<T>& u, double ts) {
  auto shifted = [](const Array3<T>& a, const Array3<T>& k, double h) {
    return Array3<T>{a[0] + h * k[0], a[1] + h * k[1], a[2] + h * k[2]};
  };
  const Array3<T> k1 = wmr_continuous(x, u);
  const Array3<T> k2 = wmr_continuous(shifted(x, k1, 0.5 * ts), u);
  const Array3<T> k3 = wmr_continuous(shifted(x, k2, 0.5 * ts), u);
  const Array3<T> k4 = wmr_continuous(shifted(x, k3, ts), u);
  Array3<T> out;
  for (int i = 0; i < 3; ++i) out[i] = x[i] + (ts / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

/// Prediction model f(x, u, d) = rk4(x, u + v [d1, d2]) + ts v [0, 0, d3].
template <typename T>
Array3<T> nominal_discrete(const Array3<T>& x, const Array2<T>& u, const Array3<T>& d, double ts) {
  const Array2<T> perturbed{u[0] + u[0] * d[0], u[1] + u[0] * d[1]};
  Array3<T> out = rk4_step(x, perturbed, ts);
  out[2] = out[2] + ts * u[0] * d[2];
  return out;
}

inline Array3<double> to_array(const Eigen::Vector3d& v) { return {v(0), v(1), v(2)}; }
inline Array2<double> to_array(const Eigen::Vector2d& v) { return {v(0), v(1)}; }
inline Eigen::Vector3d to_vec(const Array3<double>& a) { return {a[0], a[1], a[2]}; }

inline Eigen::Vector3d wmr_continuous(const StateVec& x, const ControlVec& u) {
  return to_vec(wmr_continuous(to_array(x), to_array(u)));
}

inline StateVec rk4_step(const StateVec& x, const ControlVec& u, double ts = kSamplingTime) {
  return to_vec(rk4_step(to_array(x), to_array(u), ts));
}

inline StateVec nominal_discrete(const StateVec& x, const ControlVec& u, const DisturbanceVec& d,
                                 double ts = kSamplingTime) {
  return to_vec(nominal_discrete(to_array(x), to_array(u), to_array(d), ts));
}

/// Standard deviations of the two plant noise channels.
struct PlantNoise {
  double sd_speed = 0.2;
  double sd_turn = 0.4;
};

/// One step of the simulated real system. Unlike the prediction model, the
/// turn-rate noise sample d2 enters both the input channel and the additive
/// heading term.
inline StateVec plant_step(const StateVec& x, const ControlVec& u, RandomSource& rng,
                           const PlantNoise& noise = {}, double ts = kSamplingTime) {
  const double d1 = rng.normal(0.0, noise.sd_speed);
  const double d2 = rng.normal(0.0, noise.sd_turn);
  const double v = u(0);
  StateVec next = rk4_step(x, ControlVec(u(0) + v * d1, u(1) + v * d2), ts);
  next(2) += ts * v * d2;
  return next;
}

/// Jacobians of the prediction model written in the entries of a scalar type
/// T, so that nesting dual numbers differentiates them once more.
template <typename T>
struct ModelJacobiansT {
  std::array<std::array<T, 3>, 3> dfdx{};
  std::array<std::array<T, 2>, 3> dfdu{};
  std::array<std::array<T, 3>, 3> dfdd{};
};

/// Closed form of the RK4 chain rule. With zero-order hold the heading at the
/// four stages is psi, psi + h w/2 (twice) and psi + h w, so the translation
/// update is (h/6) v_e [c(psi) + 4 c(psi + h w_e/2) + c(psi + h w_e)] and
/// likewise with sin. Only psi, v, omega and d enter the derivatives.
template <typename T>
ModelJacobiansT<T> model_jacobians(const T& psi, const T& v, const T& omega, const Array3<T>& d,
                                   double ts) {
  using std::cos;
  using std::sin;
  const double h = ts;
  const T ve = v + v * d[0];
  const T we = omega + v * d[1];
  const T a1 = psi + (0.5 * h) * we;
  const T a2 = psi + h * we;
  const T c0 = cos(psi), c1 = cos(a1), c2 = cos(a2);
  const T s0 = sin(psi), s1 = sin(a1), s2 = sin(a2);
  const T sum_c = c0 + 4.0 * c1 + c2;
  const T sum_s = s0 + 4.0 * s1 + s2;
  // d(sum_c)/d(we) and d(sum_s)/d(we)
  const T dc_dw = -h * (2.0 * s1 + s2);
  const T ds_dw = h * (2.0 * c1 + c2);
  const double k = h / 6.0;

  ModelJacobiansT<T> J;
  J.dfdx[0] = {T(1.0), T(0.0), -k * ve * sum_s};
  J.dfdx[1] = {T(0.0), T(1.0), k * ve * sum_c};
  J.dfdx[2] = {T(0.0), T(0.0), T(1.0)};

  const T dve_dv = 1.0 + d[0];
  J.dfdu[0] = {k * (dve_dv * sum_c + ve * dc_dw * d[1]), k * ve * dc_dw};
  J.dfdu[1] = {k * (dve_dv * sum_s + ve * ds_dw * d[1]), k * ve * ds_dw};
  J.dfdu[2] = {h * (d[1] + d[2]), T(h)};

  J.dfdd[0] = {k * v * sum_c, k * ve * dc_dw * v, T(0.0)};
  J.dfdd[1] = {k * v * sum_s, k * ve * ds_dw * v, T(0.0)};
  J.dfdd[2] = {T(0.0), h * v, h * v};
  return J;
}

struct ModelJacobians {
  Mat3 dfdx;
  Mat32 dfdu;
  Mat3 dfdd;
};

inline ModelJacobians jacobians(const StateVec& x, const ControlVec& u, const DisturbanceVec& d,
                                double ts = kSamplingTime) {
  const auto J = model_jacobians<double>(x(2), u(0), u(1), to_array(d), ts);
  ModelJacobians out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      out.dfdx(i, j) = J.dfdx[i][j];
      out.dfdd(i, j) = J.dfdd[i][j];
    }
    for (int j = 0; j < 2; ++j) out.dfdu(i, j) = J.dfdu[i][j];
  }
  return out;
}

}  // namespace rlrnmpc
