#pragma once

// Parametrized robust NMPC over an ellipsoidal tube, its action-value
// variant with the first input pinned, and the nominal soft-constrained NMPC.
//
// Decision vector p = [U (2N) | X_1..X_N (3N) | zeta_0..zeta_N ((N+1) n_obs)].
// The covariance sequence is eliminated: Sigma_0 = S0 and
// Sigma_{k+1} = A_k Sigma_k A_k' + B_k Lambda B_k' is evaluated inside the
// problem functions, with first and second derivatives propagated through the
// chain by forward tangents and a second-order adjoint sweep.

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "rlrnmpc/dual.hpp"
#include "rlrnmpc/dynamics.hpp"
#include "rlrnmpc/environment.hpp"
#include "rlrnmpc/nlp/problem.hpp"
#include "rlrnmpc/nlp/sensitivity.hpp"
#include "rlrnmpc/nlp/sqp.hpp"
#include "rlrnmpc/types.hpp"
#include "rlrnmpc/uncertainty.hpp"

namespace rlrnmpc {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using CovTrajectory = std::vector<Mat3>;

/// Offsets of the flattened parameter vector
/// [svec(M) | d_bar_0..d_bar_{N-1} | svec(Lambda) | sigma_0..sigma_N].
struct ThetaLayout {
  int horizon = 1;

  int size() const { return 13 + 4 * horizon; }
  static int cost_matrix(int c) { return c; }
  int disturbance_mean(int k, int i) const { return 6 + 3 * k + i; }
  int covariance(int c) const { return 6 + 3 * horizon + c; }
  int radius(int k) const { return 12 + 3 * horizon + k; }
};

struct ParamSet {
  Mat3 cost_matrix = Mat3::Zero();
  std::vector<DisturbanceVec> disturbance_mean;
  Mat3 covariance = Mat3::Zero();
  Eigen::VectorXd radius;

  int horizon() const { return static_cast<int>(disturbance_mean.size()); }
  ThetaLayout layout() const { return {horizon()}; }

  /// M = 0, d_bar = 0, Lambda = diag(0.2^2, 0.4^2, 0.4^2), sigma = 2.65.
  static ParamSet initial(int horizon, double radius = 2.65) {
    ParamSet p;
    p.disturbance_mean.assign(static_cast<std::size_t>(horizon), DisturbanceVec::Zero());
    p.covariance = Eigen::Vector3d(0.04, 0.16, 0.16).asDiagonal();
    p.radius = Eigen::VectorXd::Constant(horizon + 1, radius);
    return p;
  }

  /// All parameters zero: the tube collapses onto the nominal trajectory.
  static ParamSet zero_tube(int horizon) {
    ParamSet p;
    p.disturbance_mean.assign(static_cast<std::size_t>(horizon), DisturbanceVec::Zero());
    p.radius = Eigen::VectorXd::Zero(horizon + 1);
    return p;
  }

  Eigen::VectorXd to_vector() const {
    const ThetaLayout l = layout();
    Eigen::VectorXd v(l.size());
    v.segment<6>(0) = svec(cost_matrix);
    for (int k = 0; k < horizon(); ++k) v.segment<3>(l.disturbance_mean(k, 0)) = disturbance_mean[static_cast<std::size_t>(k)];
    v.segment<6>(l.covariance(0)) = svec(covariance);
    v.segment(l.radius(0), horizon() + 1) = radius;
    return v;
  }

  static ParamSet from_vector(const Eigen::VectorXd& v, int horizon) {
    const ThetaLayout l{horizon};
    if (v.size() != l.size()) throw DomainError("ParamSet::from_vector: size mismatch");
    ParamSet p;
    p.cost_matrix = smat(v.segment<6>(0));
    p.disturbance_mean.resize(static_cast<std::size_t>(horizon));
    for (int k = 0; k < horizon; ++k) p.disturbance_mean[static_cast<std::size_t>(k)] = v.segment<3>(l.disturbance_mean(k, 0));
    p.covariance = smat(v.segment<6>(l.covariance(0)));
    p.radius = v.segment(l.radius(0), horizon + 1);
    return p;
  }
};

struct MpcConfig {
  int horizon = 15;
  double discount = 0.99;
  TrackingWeights tracking{};
  double terminal_scale = 10.0;
  std::vector<double> slack_weight{100.0, 100.0, 100.0};
  std::vector<double> terminal_slack_weight{100.0, 100.0, 100.0};
  ControlVec input_min{-1.5, -1.5};
  ControlVec input_max{1.5, 1.5};
  Eigen::Vector3d lqr_state_weight{10.0, 10.0, 1.0};
  Eigen::Vector2d lqr_input_weight{1.0, 1.0};
  Mat3 initial_covariance = Mat3::Zero();
  std::vector<Obstacle> obstacles = default_obstacles();
  Reference reference{};
  double sampling_time = kSamplingTime;
  nlp::SqpOptions solver{};
  /// Input offsets added to the reference feedforward to build extra starting
  /// points for solves without a warm start; the best converged result wins.
  std::vector<ControlVec> cold_start_offsets{{0.0, 0.8}, {0.0, -0.8}, {-0.5, 0.0}};

  int num_obstacles() const { return static_cast<int>(obstacles.size()); }
  /// Constant state Hessian of the tracking cost, 2 Q.
  Mat3 tracking_hessian() const { return Mat3(2.0 * tracking.state.asDiagonal()); }
};

/// Tracking cost plus the tube term Tr(d2l/dx2 M Sigma).
inline double modified_stage_cost(const StateVec& x, const ControlVec& u, const Mat3& sigma, double t,
                                  const ParamSet& theta, const MpcConfig& cfg) {
  const double base = cfg.tracking(x, cfg.reference.pose(t), u, cfg.reference.feedforward(t));
  return base + (cfg.tracking_hessian() * theta.cost_matrix * sigma).trace();
}

/// LQR gains at the reference samples t0 + k Ts, k < N, with the model
/// linearized at zero disturbance. A stage whose Riccati iteration fails
/// reuses the previous gain (zero for the first stage).
inline std::vector<Mat23> reference_gains(const MpcConfig& cfg, double t0) {
  std::vector<Mat23> gains;
  gains.reserve(static_cast<std::size_t>(cfg.horizon));
  const Eigen::MatrixXd Q = cfg.lqr_state_weight.asDiagonal();
  const Eigen::MatrixXd R = cfg.lqr_input_weight.asDiagonal();
  Mat23 previous = Mat23::Zero();
  for (int k = 0; k < cfg.horizon; ++k) {
    const double t = t0 + k * cfg.sampling_time;
    const ModelJacobians J =
        jacobians(cfg.reference.pose(t), cfg.reference.feedforward(t), DisturbanceVec::Zero(), cfg.sampling_time);
    try {
      previous = lqr_gain(J.dfdx, J.dfdu, Q, R);
    } catch (const NonConvergence&) {
    }
    gains.push_back(previous);
  }
  return gains;
}

namespace detail {

inline const std::array<Mat3, 6>& sym_basis() {
  static const std::array<Mat3, 6> basis = [] {
    std::array<Mat3, 6> b;
    for (int c = 0; c < 6; ++c) b[static_cast<std::size_t>(c)] = smat_basis(c);
    return b;
  }();
  return basis;
}

inline double frob(const Mat3& a, const Mat3& b) { return (a.array() * b.array()).sum(); }

/// Local model of one prediction step in w = (psi, v, omega, d1, d2, d3).
struct StageModel {
  StateVec next;
  Mat3 fx;
  Mat32 fu;
  Mat3 fd;
  Mat3 A;  ///< closed-loop state matrix fx - fu K
  Mat3 B;  ///< fd
  std::array<Mat3, 6> dA{};
  std::array<Mat3, 6> dB{};
  std::array<std::array<Mat3, 6>, 6> ddA{};
  std::array<std::array<Mat3, 6>, 6> ddB{};
  std::array<Mat6, 3> f_ww{};  ///< Hessian of each component of f
};

inline StageModel stage_model(const StateVec& x, const ControlVec& u, const DisturbanceVec& d, const Mat23& K,
                              double ts, bool with_derivatives) {
  StageModel m;
  m.next = nominal_discrete(x, u, d, ts);
  if (!with_derivatives) {
    const ModelJacobians J = jacobians(x, u, d, ts);
    m.fx = J.dfdx;
    m.fu = J.dfdu;
    m.fd = J.dfdd;
    m.A = m.fx - m.fu * K;
    m.B = m.fd;
    return m;
  }
  using D2 = Dual2<6>;
  const D2 psi = hessian_variable<6>(x(2), 0);
  const D2 v = hessian_variable<6>(u(0), 1);
  const D2 w = hessian_variable<6>(u(1), 2);
  const Array3<D2> dd{hessian_variable<6>(d(0), 3), hessian_variable<6>(d(1), 4), hessian_variable<6>(d(2), 5)};
  const ModelJacobiansT<D2> J = model_jacobians<D2>(psi, v, w, dd, ts);

  // Entry (i, j) of fw = [fx(:,2), fu, fd] as a second-order dual.
  auto fw = [&](int i, int a) -> const D2& {
    if (a == 0) return J.dfdx[static_cast<std::size_t>(i)][2];
    if (a < 3) return J.dfdu[static_cast<std::size_t>(i)][static_cast<std::size_t>(a - 1)];
    return J.dfdd[static_cast<std::size_t>(i)][static_cast<std::size_t>(a - 3)];
  };

  Mat3 fx_d[6], fd_d[6];
  Mat32 fu_d[6];
  Mat3 fx_dd[6][6], fd_dd[6][6];
  Mat32 fu_dd[6][6];
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const D2& ex = J.dfdx[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      const D2& ed = J.dfdd[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      m.fx(i, j) = ex.v.v;
      m.fd(i, j) = ed.v.v;
      for (int a = 0; a < 6; ++a) {
        fx_d[a](i, j) = ex.v.d[static_cast<std::size_t>(a)];
        fd_d[a](i, j) = ed.v.d[static_cast<std::size_t>(a)];
        for (int b = 0; b < 6; ++b) {
          fx_dd[a][b](i, j) = ex.d[static_cast<std::size_t>(a)].d[static_cast<std::size_t>(b)];
          fd_dd[a][b](i, j) = ed.d[static_cast<std::size_t>(a)].d[static_cast<std::size_t>(b)];
        }
      }
    }
    for (int j = 0; j < 2; ++j) {
      const D2& eu = J.dfdu[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      m.fu(i, j) = eu.v.v;
      for (int a = 0; a < 6; ++a) {
        fu_d[a](i, j) = eu.v.d[static_cast<std::size_t>(a)];
        for (int b = 0; b < 6; ++b) fu_dd[a][b](i, j) = eu.d[static_cast<std::size_t>(a)].d[static_cast<std::size_t>(b)];
      }
    }
    for (int a = 0; a < 6; ++a)
      for (int b = 0; b < 6; ++b) m.f_ww[static_cast<std::size_t>(i)](a, b) = fw(i, a).v.d[static_cast<std::size_t>(b)];
  }
  for (auto& h : m.f_ww) h = 0.5 * (h + h.transpose());

  m.A = m.fx - m.fu * K;
  m.B = m.fd;
  for (int a = 0; a < 6; ++a) {
    m.dA[static_cast<std::size_t>(a)] = fx_d[a] - fu_d[a] * K;
    m.dB[static_cast<std::size_t>(a)] = fd_d[a];
    for (int b = 0; b < 6; ++b) {
      m.ddA[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = fx_dd[a][b] - fu_dd[a][b] * K;
      m.ddB[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = fd_dd[a][b];
    }
  }
  return m;
}

/// sqrt(b' Sigma b + eps) with b the position gradient of an obstacle
/// function, as a second-order dual in (x, y, svec(Sigma)).
inline Dual2<8> margin_root(const Obstacle& o, double x, double y, const Vec6& s) {
  using D = Dual2<8>;
  const D dx = hessian_variable<8>(x, 0) - o.center(0);
  const D dy = hessian_variable<8>(y, 1) - o.center(1);
  const D b0 = dx * (-2.0 / (o.semi_axes(0) * o.semi_axes(0)));
  const D b1 = dy * (-2.0 / (o.semi_axes(1) * o.semi_axes(1)));
  const D s00 = hessian_variable<8>(s(sym_index(0, 0)), 2 + sym_index(0, 0));
  const D s01 = hessian_variable<8>(s(sym_index(0, 1)), 2 + sym_index(0, 1));
  const D s11 = hessian_variable<8>(s(sym_index(1, 1)), 2 + sym_index(1, 1));
  const D q = b0 * b0 * s00 + (2.0 / kSqrt2) * b0 * b1 * s01 + b1 * b1 * s11;
  return sqrt(q + kMarginSmoothing);
}

/// sqrt(2 sigma) and its first two derivatives; the derivatives are taken as
/// zero at sigma = 0 where they are unbounded.
struct RadiusScale {
  double g = 0.0, dg = 0.0, ddg = 0.0;
  explicit RadiusScale(double sigma) {
    if (sigma > 0.0) {
      g = std::sqrt(2.0 * sigma);
      dg = 1.0 / g;
      ddg = -1.0 / (g * g * g);
    }
  }
};

}  // namespace detail

/// One instance of the value (free first input) or action-value (first input
/// pinned) problem at a given state and time.
class RnmpcProblem {
 public:
  RnmpcProblem(const MpcConfig& cfg, const StateVec& s, double t0, const ParamSet& theta, bool robust,
               std::optional<ControlVec> action = std::nullopt, std::vector<Mat23> gains = {})
      : cfg_(cfg), s_(s), t0_(t0), theta_(theta), robust_(robust), action_(action),
        N_(cfg.horizon), nobs_(cfg.num_obstacles()), layout_{cfg.horizon} {
    if (N_ < 1) throw DomainError("RnmpcProblem: horizon must be >= 1");
    if (theta_.horizon() != N_ || theta_.radius.size() != N_ + 1)
      throw DomainError("RnmpcProblem: parameter horizon does not match the configuration");
    if (static_cast<int>(cfg.slack_weight.size()) != nobs_ || static_cast<int>(cfg.terminal_slack_weight.size()) != nobs_)
      throw DomainError("RnmpcProblem: one slack weight per obstacle is required");
    x_ref_.resize(static_cast<std::size_t>(N_ + 1));
    u_ref_.resize(static_cast<std::size_t>(N_));
    for (int k = 0; k <= N_; ++k) x_ref_[static_cast<std::size_t>(k)] = cfg.reference.pose(t0 + k * cfg.sampling_time);
    for (int k = 0; k < N_; ++k) u_ref_[static_cast<std::size_t>(k)] = cfg.reference.feedforward(t0 + k * cfg.sampling_time);
    if (robust_) gains_ = gains.empty() ? reference_gains(cfg, t0) : std::move(gains);
    if (robust_ && static_cast<int>(gains_.size()) != N_) throw DomainError("RnmpcProblem: one gain per stage is required");
    first_box_stage_ = action_ ? 1 : 0;
  }

  // Index helpers.
  int u_index(int k, int i) const { return 2 * k + i; }
  int x_index(int k, int i) const { return 2 * N_ + 3 * (k - 1) + i; }  ///< k >= 1
  int slack_index(int k, int j) const { return 5 * N_ + k * nobs_ + j; }
  int obstacle_row(int k, int j) const { return k * nobs_ + j; }
  int slack_row(int k, int j) const { return (N_ + 1) * nobs_ + k * nobs_ + j; }
  int box_row(int k, int i, bool upper) const {
    return 2 * (N_ + 1) * nobs_ + 4 * (k - first_box_stage_) + 2 * i + (upper ? 0 : 1);
  }

  int num_primal() const { return 5 * N_ + (N_ + 1) * nobs_; }
  int num_params() const { return robust_ ? layout_.size() : 0; }
  int num_eq() const { return 3 * N_ + (action_ ? 2 : 0); }
  int num_ineq() const { return 2 * (N_ + 1) * nobs_ + 4 * (N_ - first_box_stage_); }

  int horizon() const { return N_; }
  bool robust() const { return robust_; }
  bool pins_action() const { return action_.has_value(); }
  const ParamSet& theta() const { return theta_; }
  const MpcConfig& config() const { return cfg_; }
  const StateVec& state() const { return s_; }
  double time() const { return t0_; }
  const std::vector<Mat23>& gains() const { return gains_; }
  const StateVec& reference_state(int k) const { return x_ref_[static_cast<std::size_t>(k)]; }
  const ControlVec& reference_input(int k) const { return u_ref_[static_cast<std::size_t>(k)]; }

  ControlVec input(const Eigen::VectorXd& p, int k) const { return p.segment<2>(u_index(k, 0)); }
  StateVec predicted_state(const Eigen::VectorXd& p, int k) const {
    return k == 0 ? s_ : StateVec(p.segment<3>(x_index(k, 0)));
  }
  DisturbanceVec disturbance(int k) const {
    return robust_ ? theta_.disturbance_mean[static_cast<std::size_t>(k)] : DisturbanceVec::Zero();
  }

  /// Sigma_0..Sigma_N along the trajectory in p (all zero for the nominal scheme).
  CovTrajectory covariances(const Eigen::VectorXd& p) const {
    CovTrajectory out(static_cast<std::size_t>(N_ + 1), Mat3::Zero());
    if (!robust_) return out;
    out[0] = cfg_.initial_covariance;
    for (int k = 0; k < N_; ++k) {
      const detail::StageModel m = stage_model_at(p, k, false);
      out[static_cast<std::size_t>(k + 1)] =
          propagate_covariance(out[static_cast<std::size_t>(k)], m.A, m.B, theta_.covariance);
    }
    return out;
  }

  /// Open-loop rollout of the reference feedforward shifted by `offset` and
  /// clamped to the box (the pinned action first, if any), with slacks set to
  /// the smallest feasible values.
  Eigen::VectorXd initial_guess(const ControlVec& offset = ControlVec::Zero()) const {
    Eigen::VectorXd p = Eigen::VectorXd::Zero(num_primal());
    StateVec x = s_;
    for (int k = 0; k < N_; ++k) {
      ControlVec u = (u_ref_[static_cast<std::size_t>(k)] + offset).cwiseMax(cfg_.input_min).cwiseMin(cfg_.input_max);
      if (k == 0 && action_) u = *action_;
      p.segment<2>(u_index(k, 0)) = u;
      x = nominal_discrete(x, u, disturbance(k), cfg_.sampling_time);
      p.segment<3>(x_index(k + 1, 0)) = x;
    }
    fill_slacks(p);
    return p;
  }

  /// Sets each slack to the smallest value satisfying its tightened constraint.
  void fill_slacks(Eigen::VectorXd& p) const {
    p.segment(slack_index(0, 0), (N_ + 1) * nobs_).setZero();
    const nlp::NlpEvaluation ev = evaluate(p, nlp::Scope::kValues);
    for (int k = 0; k <= N_; ++k)
      for (int j = 0; j < nobs_; ++j) p(slack_index(k, j)) = std::max(0.0, ev.ineq(obstacle_row(k, j)));
  }

  nlp::NlpEvaluation evaluate(const Eigen::VectorXd& p, nlp::Scope scope) const {
    const Cols cols{scope, num_primal(), num_params()};
    const int nc = cols.count();
    const bool deriv = scope != nlp::Scope::kValues;
    nlp::NlpEvaluation ev;
    ev.eq = Eigen::VectorXd::Zero(num_eq());
    ev.ineq = Eigen::VectorXd::Zero(num_ineq());
    if (deriv) {
      ev.gradient = Eigen::VectorXd::Zero(nc);
      ev.eq_jacobian = Eigen::MatrixXd::Zero(num_eq(), nc);
      ev.ineq_jacobian = Eigen::MatrixXd::Zero(num_ineq(), nc);
    }
    const Mat3 Hxx = cfg_.tracking_hessian();
    const auto& E = detail::sym_basis();

    // Tracking and slack terms.
    double obj = 0.0;
    double disc = 1.0;
    for (int k = 0; k <= N_; ++k, disc *= cfg_.discount) {
      const StateVec x = predicted_state(p, k);
      const StateVec dx = x - x_ref_[static_cast<std::size_t>(k)];
      const double wscale = k < N_ ? 1.0 : cfg_.terminal_scale;
      obj += disc * wscale * dx.dot(cfg_.tracking.state.cwiseProduct(dx));
      if (deriv && k >= 1)
        for (int i = 0; i < 3; ++i)
          add(ev.gradient, cols.p(x_index(k, i)), disc * wscale * 2.0 * cfg_.tracking.state(i) * dx(i));
      if (k < N_) {
        const ControlVec du = input(p, k) - u_ref_[static_cast<std::size_t>(k)];
        obj += disc * du.dot(cfg_.tracking.input.cwiseProduct(du));
        if (deriv)
          for (int i = 0; i < 2; ++i)
            add(ev.gradient, cols.p(u_index(k, i)), disc * 2.0 * cfg_.tracking.input(i) * du(i));
      }
      const auto& w = k < N_ ? cfg_.slack_weight : cfg_.terminal_slack_weight;
      for (int j = 0; j < nobs_; ++j) {
        obj += disc * w[static_cast<std::size_t>(j)] * p(slack_index(k, j));
        if (deriv) add(ev.gradient, cols.p(slack_index(k, j)), disc * w[static_cast<std::size_t>(j)]);
      }
    }

    // Dynamics, tube and tightened obstacle constraints.
    Mat3 sigma = robust_ ? cfg_.initial_covariance : Mat3::Zero();
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(6, nc);  // d svec(Sigma_k) / d columns
    disc = 1.0;
    for (int k = 0; k <= N_; ++k, disc *= cfg_.discount) {
      const StateVec x = predicted_state(p, k);
      const Vec6 s = svec(sigma);

      if (robust_ && k < N_) {
        const double c = disc;
        obj += c * (Hxx * theta_.cost_matrix * sigma).trace();
        if (deriv) {
          Eigen::Matrix<double, 1, 6> g_s;
          for (int e = 0; e < 6; ++e) {
            g_s(e) = c * (Hxx * theta_.cost_matrix * E[static_cast<std::size_t>(e)]).trace();
            add(ev.gradient, cols.th(ThetaLayout::cost_matrix(e)), c * (Hxx * E[static_cast<std::size_t>(e)] * sigma).trace());
          }
          ev.gradient += (g_s * Y).transpose();
        }
      }

      const detail::RadiusScale rs(robust_ ? theta_.radius(k) : 0.0);
      for (int j = 0; j < nobs_; ++j) {
        const Obstacle& o = cfg_.obstacles[static_cast<std::size_t>(j)];
        const int row = obstacle_row(k, j);
        double value = obstacle_value(o, x(0), x(1)) - p(slack_index(k, j));
        if (deriv) {
          add(ev.ineq_jacobian, row, cols.p(slack_index(k, j)), -1.0);
          if (k >= 1) {
            add(ev.ineq_jacobian, row, cols.p(x_index(k, 0)), -2.0 * (x(0) - o.center(0)) / (o.semi_axes(0) * o.semi_axes(0)));
            add(ev.ineq_jacobian, row, cols.p(x_index(k, 1)), -2.0 * (x(1) - o.center(1)) / (o.semi_axes(1) * o.semi_axes(1)));
          }
        }
        if (robust_) {
          const Dual2<8> root = detail::margin_root(o, x(0), x(1), s);
          value += rs.g * root.v.v;
          if (deriv) {
            if (k >= 1) {
              add(ev.ineq_jacobian, row, cols.p(x_index(k, 0)), rs.g * root.v.d[0]);
              add(ev.ineq_jacobian, row, cols.p(x_index(k, 1)), rs.g * root.v.d[1]);
            }
            Eigen::Matrix<double, 1, 6> r_s;
            for (int e = 0; e < 6; ++e) r_s(e) = rs.g * root.v.d[static_cast<std::size_t>(2 + e)];
            ev.ineq_jacobian.row(row) += r_s * Y;
            add(ev.ineq_jacobian, row, cols.th(layout_.radius(k)), rs.dg * root.v.v);
          }
        }
        ev.ineq(row) = value;
      }

      if (k == N_) break;
      const detail::StageModel m = stage_model_at(p, k, deriv);
      const StateVec xn = predicted_state(p, k + 1);
      ev.eq.segment<3>(3 * k) = xn - m.next;
      if (deriv) {
        const std::array<int, 6> wc = w_columns(cols, k);
        for (int i = 0; i < 3; ++i) {
          add(ev.eq_jacobian, 3 * k + i, cols.p(x_index(k + 1, i)), 1.0);
          if (k >= 1)
            for (int j = 0; j < 3; ++j) add(ev.eq_jacobian, 3 * k + i, cols.p(x_index(k, j)), -m.fx(i, j));
          for (int j = 0; j < 2; ++j) add(ev.eq_jacobian, 3 * k + i, wc[static_cast<std::size_t>(1 + j)], -m.fu(i, j));
          if (robust_)
            for (int j = 0; j < 3; ++j) add(ev.eq_jacobian, 3 * k + i, wc[static_cast<std::size_t>(3 + j)], -m.fd(i, j));
        }
      }
      if (robust_) {
        const Mat3 next_sigma = propagate_covariance(sigma, m.A, m.B, theta_.covariance);
        if (deriv) {
          const Mat6 phi_s = transition_state_jacobian(m.A);
          Eigen::MatrixXd Yn = phi_s * Y;
          const std::array<int, 6> wc = w_columns(cols, k);
          for (int a = 0; a < 6; ++a) {
            const int col = wc[static_cast<std::size_t>(a)];
            if (col < 0) continue;
            const Mat3 t1 = m.dA[static_cast<std::size_t>(a)] * sigma * m.A.transpose();
            const Mat3 t2 = m.dB[static_cast<std::size_t>(a)] * theta_.covariance * m.B.transpose();
            Yn.col(col) += svec(t1 + t1.transpose() + t2 + t2.transpose());
          }
          for (int c = 0; c < 6; ++c) {
            const int col = cols.th(layout_.covariance(c));
            if (col >= 0) Yn.col(col) += svec(m.B * E[static_cast<std::size_t>(c)] * m.B.transpose());
          }
          Y = std::move(Yn);
        }
        sigma = next_sigma;
      }
    }

    if (action_) {
      for (int i = 0; i < 2; ++i) {
        ev.eq(3 * N_ + i) = p(u_index(0, i)) - (*action_)(i);
        if (deriv) add(ev.eq_jacobian, 3 * N_ + i, cols.p(u_index(0, i)), 1.0);
      }
    }

    for (int k = 0; k <= N_; ++k)
      for (int j = 0; j < nobs_; ++j) {
        ev.ineq(slack_row(k, j)) = -p(slack_index(k, j));
        if (deriv) add(ev.ineq_jacobian, slack_row(k, j), cols.p(slack_index(k, j)), -1.0);
      }
    for (int k = first_box_stage_; k < N_; ++k)
      for (int i = 0; i < 2; ++i) {
        const double u = p(u_index(k, i));
        ev.ineq(box_row(k, i, true)) = u - cfg_.input_max(i);
        ev.ineq(box_row(k, i, false)) = cfg_.input_min(i) - u;
        if (deriv) {
          add(ev.ineq_jacobian, box_row(k, i, true), cols.p(u_index(k, i)), 1.0);
          add(ev.ineq_jacobian, box_row(k, i, false), cols.p(u_index(k, i)), -1.0);
        }
      }
    ev.objective = obj;
    return ev;
  }

  /// Hessian of Phi + lambda'G + mu'H in the columns of the given scope.
  Eigen::MatrixXd lagrangian_hessian(const Eigen::VectorXd& p, const Eigen::VectorXd& lambda,
                                     const Eigen::VectorXd& mu, nlp::Scope scope) const {
    const Cols cols{scope, num_primal(), num_params()};
    const int nc = cols.count();
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(nc, nc);
    if (nc == 0) return H;
    const Mat3 Hxx = cfg_.tracking_hessian();
    const auto& E = detail::sym_basis();

    double disc = 1.0;
    for (int k = 0; k <= N_; ++k, disc *= cfg_.discount) {
      const double wscale = k < N_ ? 1.0 : cfg_.terminal_scale;
      if (k >= 1)
        for (int i = 0; i < 3; ++i) {
          const int c = cols.p(x_index(k, i));
          if (c >= 0) H(c, c) += disc * wscale * 2.0 * cfg_.tracking.state(i);
        }
      if (k < N_)
        for (int i = 0; i < 2; ++i) {
          const int c = cols.p(u_index(k, i));
          if (c >= 0) H(c, c) += disc * 2.0 * cfg_.tracking.input(i);
        }
    }

    // Forward sweep: stage models, covariances and their tangents.
    std::vector<detail::StageModel> models;
    models.reserve(static_cast<std::size_t>(N_));
    std::vector<Mat3> sigmas(static_cast<std::size_t>(N_ + 1));
    std::vector<Eigen::MatrixXd> tangents(static_cast<std::size_t>(N_ + 1));
    std::vector<Mat6> phi_s(static_cast<std::size_t>(N_));
    sigmas[0] = robust_ ? cfg_.initial_covariance : Mat3::Zero();
    tangents[0] = Eigen::MatrixXd::Zero(6, nc);
    for (int k = 0; k < N_; ++k) {
      models.push_back(stage_model_at(p, k, true));
      const detail::StageModel& m = models.back();
      if (!robust_) continue;
      const Mat3& sigma = sigmas[static_cast<std::size_t>(k)];
      sigmas[static_cast<std::size_t>(k + 1)] = propagate_covariance(sigma, m.A, m.B, theta_.covariance);
      phi_s[static_cast<std::size_t>(k)] = transition_state_jacobian(m.A);
      Eigen::MatrixXd Yn = phi_s[static_cast<std::size_t>(k)] * tangents[static_cast<std::size_t>(k)];
      const std::array<int, 6> wc = w_columns(cols, k);
      for (int a = 0; a < 6; ++a) {
        const int col = wc[static_cast<std::size_t>(a)];
        if (col < 0) continue;
        const Mat3 t1 = m.dA[static_cast<std::size_t>(a)] * sigma * m.A.transpose();
        const Mat3 t2 = m.dB[static_cast<std::size_t>(a)] * theta_.covariance * m.B.transpose();
        Yn.col(col) += svec(t1 + t1.transpose() + t2 + t2.transpose());
      }
      for (int c = 0; c < 6; ++c) {
        const int col = cols.th(layout_.covariance(c));
        if (col >= 0) Yn.col(col) += svec(m.B * E[static_cast<std::size_t>(c)] * m.B.transpose());
      }
      tangents[static_cast<std::size_t>(k + 1)] = std::move(Yn);
    }

    // Output nodes: obstacle rows (with margins) and the tube cost term, in
    // local variables (x, y, svec(Sigma), sigma_k, svec(M)).
    std::vector<Vec6> out_adjoint(static_cast<std::size_t>(N_ + 1), Vec6::Zero());
    disc = 1.0;
    for (int k = 0; k <= N_; ++k, disc *= cfg_.discount) {
      const StateVec x = predicted_state(p, k);
      const Vec6 s = svec(sigmas[static_cast<std::size_t>(k)]);
      Eigen::Matrix<double, 15, 15> local = Eigen::Matrix<double, 15, 15>::Zero();
      const detail::RadiusScale rs(robust_ ? theta_.radius(k) : 0.0);
      for (int j = 0; j < nobs_; ++j) {
        const double weight = mu(obstacle_row(k, j));
        if (weight == 0.0) continue;
        const Obstacle& o = cfg_.obstacles[static_cast<std::size_t>(j)];
        local(0, 0) += weight * -2.0 / (o.semi_axes(0) * o.semi_axes(0));
        local(1, 1) += weight * -2.0 / (o.semi_axes(1) * o.semi_axes(1));
        if (!robust_) continue;
        const Dual2<8> root = detail::margin_root(o, x(0), x(1), s);
        const Eigen::Matrix<double, 8, 1> g = gradient_of<8>(root);
        local.topLeftCorner<8, 8>() += weight * rs.g * hessian_of<8>(root);
        local.block<8, 1>(0, 8) += weight * rs.dg * g;
        local.block<1, 8>(8, 0) += weight * rs.dg * g.transpose();
        local(8, 8) += weight * rs.ddg * root.v.v;
        out_adjoint[static_cast<std::size_t>(k)] += weight * rs.g * g.tail<6>();
      }
      if (robust_ && k < N_) {
        for (int e = 0; e < 6; ++e) {
          out_adjoint[static_cast<std::size_t>(k)](e) +=
              disc * (Hxx * theta_.cost_matrix * E[static_cast<std::size_t>(e)]).trace();
          for (int c = 0; c < 6; ++c) {
            const double v =
                disc * (Hxx * E[static_cast<std::size_t>(c)] * E[static_cast<std::size_t>(e)]).trace();
            local(2 + e, 9 + c) += v;
            local(9 + c, 2 + e) += v;
          }
        }
      }
      if (local.isZero(0.0)) continue;
      Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(15, nc);
      if (k >= 1) {
        set_unit(Z, 0, cols.p(x_index(k, 0)));
        set_unit(Z, 1, cols.p(x_index(k, 1)));
      }
      if (robust_) {
        Z.middleRows<6>(2) = tangents[static_cast<std::size_t>(k)];
        set_unit(Z, 8, cols.th(layout_.radius(k)));
        for (int c = 0; c < 6; ++c) set_unit(Z, 9 + c, cols.th(ThetaLayout::cost_matrix(c)));
      }
      H.noalias() += Z.transpose() * (local * Z);
    }

    // Transition nodes in local variables (w, svec(Sigma_k), svec(Lambda)),
    // weighted by the adjoint of svec(Sigma_{k+1}) and the dynamics multipliers.
    Vec6 adj = out_adjoint[static_cast<std::size_t>(N_)];
    for (int k = N_ - 1; k >= 0; --k) {
      const detail::StageModel& m = models[static_cast<std::size_t>(k)];
      Eigen::Matrix<double, 18, 18> local = Eigen::Matrix<double, 18, 18>::Zero();
      for (int i = 0; i < 3; ++i) local.topLeftCorner<6, 6>() -= lambda(3 * k + i) * m.f_ww[static_cast<std::size_t>(i)];
      if (robust_) {
        const Mat3 Abar = smat(adj);
        const Mat3& sigma = sigmas[static_cast<std::size_t>(k)];
        const Mat3& lam = theta_.covariance;
        for (int a = 0; a < 6; ++a) {
          const Mat3& Aa = m.dA[static_cast<std::size_t>(a)];
          const Mat3& Ba = m.dB[static_cast<std::size_t>(a)];
          for (int b = a; b < 6; ++b) {
            const Mat3& Ab = m.dA[static_cast<std::size_t>(b)];
            const Mat3& Bb = m.dB[static_cast<std::size_t>(b)];
            const Mat3 t = m.ddA[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] * sigma * m.A.transpose() +
                           Aa * sigma * Ab.transpose() +
                           m.ddB[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] * lam * m.B.transpose() +
                           Ba * lam * Bb.transpose();
            const double v = 2.0 * detail::frob(Abar, t);
            local(a, b) += v;
            if (b != a) local(b, a) += v;
          }
          for (int c = 0; c < 6; ++c) {
            const Mat3& Ec = E[static_cast<std::size_t>(c)];
            const double ws = 2.0 * detail::frob(Abar, Aa * Ec * m.A.transpose());
            const double wl = 2.0 * detail::frob(Abar, Ba * Ec * m.B.transpose());
            local(a, 6 + c) += ws;
            local(6 + c, a) += ws;
            local(a, 12 + c) += wl;
            local(12 + c, a) += wl;
          }
        }
        adj = out_adjoint[static_cast<std::size_t>(k)] + phi_s[static_cast<std::size_t>(k)].transpose() * adj;
      }
      if (local.isZero(0.0)) continue;
      Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(18, nc);
      const std::array<int, 6> wc = w_columns(cols, k);
      for (int a = 0; a < 6; ++a) set_unit(Z, a, wc[static_cast<std::size_t>(a)]);
      if (robust_) {
        Z.middleRows<6>(6) = tangents[static_cast<std::size_t>(k)];
        for (int c = 0; c < 6; ++c) set_unit(Z, 12 + c, cols.th(layout_.covariance(c)));
      }
      H.noalias() += Z.transpose() * (local * Z);
    }
    return 0.5 * (H + H.transpose());
  }

 private:
  // Column maps: -1 marks a quantity that is constant in the scope.
  struct Cols {
    nlp::Scope scope;
    int n_primal;
    int n_params;
    int count() const { return nlp::scope_columns(scope, n_primal, n_params); }
    int p(int i) const { return scope == nlp::Scope::kPrimal || scope == nlp::Scope::kJoint ? i : -1; }
    int th(int i) const {
      if (n_params == 0) return -1;
      if (scope == nlp::Scope::kParams) return i;
      if (scope == nlp::Scope::kJoint) return n_primal + i;
      return -1;
    }
  };

  static void add(Eigen::VectorXd& v, int i, double value) {
    if (i >= 0) v(i) += value;
  }
  static void add(Eigen::MatrixXd& m, int r, int c, double value) {
    if (c >= 0) m(r, c) += value;
  }
  static void set_unit(Eigen::MatrixXd& Z, int row, int col) {
    if (col >= 0) Z(row, col) = 1.0;
  }

  std::array<int, 6> w_columns(const Cols& cols, int k) const {
    std::array<int, 6> wc{};
    wc[0] = k >= 1 ? cols.p(x_index(k, 2)) : -1;
    wc[1] = cols.p(u_index(k, 0));
    wc[2] = cols.p(u_index(k, 1));
    for (int i = 0; i < 3; ++i) wc[static_cast<std::size_t>(3 + i)] = robust_ ? cols.th(layout_.disturbance_mean(k, i)) : -1;
    return wc;
  }

  static Mat6 transition_state_jacobian(const Mat3& A) {
    const auto& E = detail::sym_basis();
    Mat6 phi;
    for (int c = 0; c < 6; ++c) phi.col(c) = svec(A * E[static_cast<std::size_t>(c)] * A.transpose());
    return phi;
  }

  detail::StageModel stage_model_at(const Eigen::VectorXd& p, int k, bool with_derivatives) const {
    const Mat23 K = robust_ ? gains_[static_cast<std::size_t>(k)] : Mat23::Zero();
    return detail::stage_model(predicted_state(p, k), input(p, k), disturbance(k), K, cfg_.sampling_time,
                               with_derivatives);
  }

  MpcConfig cfg_;
  StateVec s_;
  double t0_;
  ParamSet theta_;
  bool robust_;
  std::optional<ControlVec> action_;
  int N_;
  int nobs_;
  ThetaLayout layout_;
  int first_box_stage_ = 0;
  std::vector<StateVec> x_ref_;
  std::vector<ControlVec> u_ref_;
  std::vector<Mat23> gains_;
};

static_assert(nlp::ParametricNlp<RnmpcProblem>);

struct SchemeSolution {
  double value = 0.0;
  ControlVec first_input = ControlVec::Zero();
  nlp::PrimalDualSolution solution;

  bool converged() const { return solution.converged(); }
};

/// Re-indexes a value-problem solution one stage ahead, repeating the last
/// stage, for use as the warm start at the next sampling instant.
inline nlp::PrimalDualSolution shift_solution(const RnmpcProblem& value_problem, const nlp::PrimalDualSolution& sol) {
  const RnmpcProblem& P = value_problem;
  const int N = P.horizon();
  const int nobs = P.config().num_obstacles();
  nlp::PrimalDualSolution out = sol;
  auto next = [N](int k) { return std::min(k + 1, N - 1); };
  for (int k = 0; k < N; ++k) out.primal.segment<2>(P.u_index(k, 0)) = sol.primal.segment<2>(P.u_index(next(k), 0));
  for (int k = 1; k <= N; ++k) {
    const int from = std::min(k + 1, N);
    out.primal.segment<3>(P.x_index(k, 0)) = sol.primal.segment<3>(P.x_index(from, 0));
  }
  for (int k = 0; k <= N; ++k) {
    const int from = std::min(k + 1, N);
    for (int j = 0; j < nobs; ++j) {
      out.primal(P.slack_index(k, j)) = sol.primal(P.slack_index(from, j));
      out.ineq_multipliers(P.obstacle_row(k, j)) = sol.ineq_multipliers(P.obstacle_row(from, j));
      out.ineq_multipliers(P.slack_row(k, j)) = sol.ineq_multipliers(P.slack_row(from, j));
    }
  }
  for (int k = 0; k < N; ++k) {
    out.eq_multipliers.segment<3>(3 * k) = sol.eq_multipliers.segment<3>(3 * next(k));
    for (int i = 0; i < 2; ++i)
      for (bool upper : {true, false})
        out.ineq_multipliers(P.box_row(k, i, upper)) = sol.ineq_multipliers(P.box_row(next(k), i, upper));
  }
  out.active_set.clear();
  for (Eigen::Index i = 0; i < out.ineq_multipliers.size(); ++i)
    if (out.ineq_multipliers(i) > 0.0) out.active_set.push_back(static_cast<int>(i));
  return out;
}

/// Maps a value-problem solution at (s, t) onto the action-value problem at
/// the same (s, t): the first input becomes the pinned action and the
/// multipliers of its bounds move to the pinning equality.
inline nlp::PrimalDualSolution action_warm_start(const RnmpcProblem& value_problem, const RnmpcProblem& action_problem,
                                                 const nlp::PrimalDualSolution& sol, const ControlVec& action) {
  const RnmpcProblem& V = value_problem;
  const RnmpcProblem& Q = action_problem;
  const int N = V.horizon();
  nlp::PrimalDualSolution out;
  out.primal = sol.primal;
  out.primal.segment<2>(V.u_index(0, 0)) = action;
  out.eq_multipliers = Eigen::VectorXd::Zero(Q.num_eq());
  out.eq_multipliers.head(3 * N) = sol.eq_multipliers.head(3 * N);
  for (int i = 0; i < 2; ++i)
    out.eq_multipliers(3 * N + i) =
        sol.ineq_multipliers(V.box_row(0, i, true)) - sol.ineq_multipliers(V.box_row(0, i, false));
  out.ineq_multipliers = Eigen::VectorXd::Zero(Q.num_ineq());
  const int shared = 2 * (N + 1) * V.config().num_obstacles();
  out.ineq_multipliers.head(shared) = sol.ineq_multipliers.head(shared);
  for (int k = 1; k < N; ++k)
    for (int i = 0; i < 2; ++i)
      for (bool upper : {true, false})
        out.ineq_multipliers(Q.box_row(k, i, upper)) = sol.ineq_multipliers(V.box_row(k, i, upper));
  for (Eigen::Index i = 0; i < out.ineq_multipliers.size(); ++i)
    if (out.ineq_multipliers(i) > 0.0) out.active_set.push_back(static_cast<int>(i));
  return out;
}

/// Receding-horizon controller around one scheme (robust or nominal). Keeps
/// the last value solution to warm start the next one.
class RnmpcController {
 public:
  explicit RnmpcController(MpcConfig cfg, bool robust = true)
      : cfg_(std::move(cfg)), robust_(robust), solver_(cfg_.solver) {}

  const MpcConfig& config() const { return cfg_; }
  bool robust() const { return robust_; }

  void reset() {
    last_.reset();
    gains_.clear();
  }

  RnmpcProblem value_problem(const StateVec& s, const ParamSet& theta, double t) {
    return RnmpcProblem(cfg_, s, t, robust_ ? theta : ParamSet::zero_tube(cfg_.horizon), robust_, std::nullopt,
                        gains_at(t));
  }

  RnmpcProblem action_problem(const StateVec& s, const ControlVec& a, const ParamSet& theta, double t) {
    return RnmpcProblem(cfg_, s, t, robust_ ? theta : ParamSet::zero_tube(cfg_.horizon), robust_, a, gains_at(t));
  }

  /// Solves V(s) warm-started from the previous call (shifted when t advanced
  /// by one sampling period) and records the result for the next call.
  SchemeSolution solve_value(const StateVec& s, const ParamSet& theta, double t) {
    const RnmpcProblem problem = value_problem(s, theta, t);
    std::optional<nlp::PrimalDualSolution> warm;
    if (last_) {
      const double dt = t - last_->time;
      if (std::abs(dt) < 1e-9 * (1.0 + std::abs(t))) {
        warm = last_->solution;
      } else if (std::abs(dt - cfg_.sampling_time) < 1e-9 * (1.0 + std::abs(t))) {
        warm = shift_solution(problem, last_->solution);
      }
    }
    SchemeSolution out = finish(problem, warm ? solver_.solve(problem, &*warm) : solve_cold(problem));
    last_ = Record{t, out.solution};
    return out;
  }

  /// Solves Q(s, a). When `value_solution` solves V at the same (s, t) it is
  /// used as the warm start.
  SchemeSolution solve_action_value(const StateVec& s, const ControlVec& a, const ParamSet& theta, double t,
                                    const nlp::PrimalDualSolution* value_solution = nullptr) {
    const RnmpcProblem problem = action_problem(s, a, theta, t);
    if (value_solution != nullptr && value_solution->primal.size() == problem.num_primal()) {
      const RnmpcProblem vp = value_problem(s, theta, t);
      const nlp::PrimalDualSolution warm = action_warm_start(vp, problem, *value_solution, a);
      return finish(problem, solver_.solve(problem, &warm));
    }
    return finish(problem, solve_cold(problem));
  }

  ControlVec policy(const StateVec& s, const ParamSet& theta, double t) { return solve_value(s, theta, t).first_input; }

 private:
  struct Record {
    double time;
    nlp::PrimalDualSolution solution;
  };

  // The obstacle constraints make the problem nonconvex, so a single start
  // can settle on the wrong side of an obstacle.
  nlp::PrimalDualSolution solve_cold(const RnmpcProblem& problem) const {
    nlp::PrimalDualSolution best = solver_.solve(problem);
    for (const ControlVec& offset : cfg_.cold_start_offsets) {
      nlp::PrimalDualSolution start;
      start.primal = problem.initial_guess(offset);
      nlp::PrimalDualSolution sol = solver_.solve(problem, &start);
      if (sol.converged() && (!best.converged() || sol.objective < best.objective)) best = std::move(sol);
    }
    return best;
  }

  SchemeSolution finish(const RnmpcProblem& problem, nlp::PrimalDualSolution sol) const {
    SchemeSolution out;
    out.value = sol.objective;
    out.first_input = problem.input(sol.primal, 0).cwiseMax(cfg_.input_min).cwiseMin(cfg_.input_max);
    out.solution = std::move(sol);
    return out;
  }

  std::vector<Mat23> gains_at(double t) {
    if (!robust_) return {};
    if (gains_.empty() || gains_time_ != t) {
      gains_ = reference_gains(cfg_, t);
      gains_time_ = t;
    }
    return gains_;
  }

  MpcConfig cfg_;
  bool robust_;
  nlp::SqpSolver solver_;
  std::optional<Record> last_;
  std::vector<Mat23> gains_;
  double gains_time_ = 0.0;
};

/// Nominal NMPC input at (s, t): the soft-constrained scheme without tube or
/// model disturbance.
inline ControlVec nominal_policy(const StateVec& s, double t, const MpcConfig& cfg) {
  RnmpcController controller(cfg, false);
  return controller.policy(s, ParamSet::zero_tube(cfg.horizon), t);
}

}  // namespace rlrnmpc
