#pragma once

// Simulated real system: figure-eight reference, elliptic obstacles, the
// baseline stage cost used as the learning signal, and the stochastic step.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "rlrnmpc/dynamics.hpp"
#include "rlrnmpc/random.hpp"
#include "rlrnmpc/types.hpp"

namespace rlrnmpc {

struct Obstacle {
  Eigen::Vector2d center;
  Eigen::Vector2d semi_axes;
};

/// Quadratic tracking cost (x - x_ref)' Q (x - x_ref) + (u - u_ref)' R (u - u_ref)
/// with diagonal weights.
struct TrackingWeights {
  Eigen::Vector3d state{10.0, 10.0, 0.1};
  Eigen::Vector2d input{0.1, 0.01};

  double operator()(const StateVec& x, const StateVec& x_ref, const ControlVec& u,
                    const ControlVec& u_ref) const {
    const StateVec dx = x - x_ref;
    const ControlVec du = u - u_ref;
    return dx.dot(state.cwiseProduct(dx)) + du.dot(input.cwiseProduct(du));
  }
};

/// Lemniscate of Gerono x = A sin(wt), y = A sin(wt) cos(wt) with heading
/// taken from the path tangent.
struct Reference {
  double amplitude = 2.0;
  double lap_period = 64.0;

  double frequency() const { return 2.0 * std::numbers::pi / lap_period; }

  StateVec pose(double t) const {
    const double w = frequency();
    const double phase = w * t;
    const double a = amplitude;
    const double dx = a * w * std::cos(phase);
    const double dy = a * w * std::cos(2.0 * phase);
    double psi = std::atan2(dy, dx);
    // The heading sweeps from pi/4 clockwise through -5pi/4 on the first lobe
    // and back on the second; keep it continuous across the branch cut that is
    // crossed while the path moves left (dx <= 0).
    if (std::cos(phase) <= 0.0 && psi > 0.0) psi -= 2.0 * std::numbers::pi;
    return {a * std::sin(phase), a * std::sin(phase) * std::cos(phase), psi};
  }

  /// Feedforward [speed, turn rate] that follows the path exactly in
  /// continuous time.
  ControlVec feedforward(double t) const {
    const double w = frequency();
    const double phase = w * t;
    const double a = amplitude;
    const double dx = a * w * std::cos(phase);
    const double dy = a * w * std::cos(2.0 * phase);
    const double ddx = -a * w * w * std::sin(phase);
    const double ddy = -2.0 * a * w * w * std::sin(2.0 * phase);
    const double speed2 = dx * dx + dy * dy;
    return {std::sqrt(speed2), (dx * ddy - dy * ddx) / speed2};
  }
};

inline std::vector<Obstacle> default_obstacles() {
  return {
      {{1.9, 0.1}, {0.5, 0.4}},
      {{-1.9, -0.1}, {0.5, 0.4}},
      {{0.25, 0.0}, {0.5, 0.4}},
  };
}

struct EnvConfig {
  std::vector<Obstacle> obstacles = default_obstacles();
  Reference reference{};
  StateVec initial_state{-1.0, 2.0, 0.0};
  std::vector<double> penalty{30.0, 30.0, 30.0};
  PlantNoise noise{};
  TrackingWeights tracking{};
  double sampling_time = kSamplingTime;
};

/// h_j(x) = 1 - ((x - cx)/rx)^2 - ((y - cy)/ry)^2, positive inside obstacle j.
template <typename T>
T obstacle_value(const Obstacle& o, const T& x, const T& y) {
  const T ex = (x - o.center(0)) / o.semi_axes(0);
  const T ey = (y - o.center(1)) / o.semi_axes(1);
  return 1.0 - ex * ex - ey * ey;
}

inline Eigen::VectorXd obstacle_constraints(const StateVec& x, const std::vector<Obstacle>& obstacles) {
  Eigen::VectorXd h(static_cast<Eigen::Index>(obstacles.size()));
  for (std::size_t j = 0; j < obstacles.size(); ++j) h(j) = obstacle_value(obstacles[j], x(0), x(1));
  return h;
}

inline Eigen::VectorXd obstacle_constraints(const StateVec& x, const EnvConfig& cfg) {
  return obstacle_constraints(x, cfg.obstacles);
}

inline int count_violations(const StateVec& x, const EnvConfig& cfg) {
  const Eigen::VectorXd h = obstacle_constraints(x, cfg);
  return static_cast<int>((h.array() > 0.0).count());
}

/// l(s, a) + w' max(0, h(s)).
inline double baseline_cost(const StateVec& s, const ControlVec& a, double t, const EnvConfig& cfg) {
  double cost = cfg.tracking(s, cfg.reference.pose(t), a, cfg.reference.feedforward(t));
  const Eigen::VectorXd h = obstacle_constraints(s, cfg);
  for (Eigen::Index j = 0; j < h.size(); ++j) cost += cfg.penalty.at(static_cast<std::size_t>(j)) * std::max(0.0, h(j));
  return cost;
}

struct StepResult {
  StateVec next_state;
  double cost = 0.0;
  int violations = 0;
};

inline StepResult env_step(const StateVec& s, const ControlVec& a, double t, RandomSource& rng,
                           const EnvConfig& cfg) {
  StepResult r;
  r.next_state = plant_step(s, a, rng, cfg.noise, cfg.sampling_time);
  r.cost = baseline_cost(s, a, t, cfg);
  r.violations = count_violations(s, cfg);
  return r;
}

/// Stateful wrapper owning the plant's random stream.
class Environment {
 public:
  Environment(EnvConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), rng_(seed), state_(cfg_.initial_state) {}

  const StateVec& state() const { return state_; }
  /// Advances by exactly sampling_time per step, so t + Ts of a sample is the
  /// successor's time bit for bit.
  double time() const { return time_; }
  long steps() const { return steps_; }
  const EnvConfig& config() const { return cfg_; }

  StepResult step(const ControlVec& a) {
    StepResult r = env_step(state_, a, time_, rng_, cfg_);
    state_ = r.next_state;
    time_ += cfg_.sampling_time;
    ++steps_;
    return r;
  }

 private:
  EnvConfig cfg_;
  RandomSource rng_;
  StateVec state_;
  double time_ = 0.0;
  long steps_ = 0;
};

}  // namespace rlrnmpc
