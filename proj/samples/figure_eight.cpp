// Library walk-through: one closed-loop lap of the robust controller around
// the figure-eight, a short learning run, and a look at the TD error of one
// transition.

#include <iomanip>
#include <iostream>

#include "rlrnmpc/experiment.hpp"

int main() {
  using namespace rlrnmpc;
  RunConfig cfg = RunConfig::desk();
  cfg.evaluation.laps = 1;
  cfg.training.transitions = 200;
  cfg.seed = 7;

  const ParamSet theta0 = ParamSet::initial(cfg.mpc.horizon, cfg.training.sigma_init);
  std::cout << "ellipsoid radius " << theta0.radius(0) << " covers " << std::setprecision(4)
            << 100.0 * membership_probability(3, theta0.radius(0)) << "% of a Gaussian disturbance\n";

  for (const ControllerKind kind : {ControllerKind::kNominal, ControllerKind::kRobust}) {
    const EvaluationResult r = run_evaluation(cfg, theta0, kind);
    std::cout << std::setw(8) << r.summary.controller << ": lap index " << r.summary.mean_index << ", "
              << r.summary.violation_steps << " steps inside an obstacle, mean solve "
              << r.summary.timing.mean_solve_ms << " ms\n";
  }

  const TrainingResult trained = run_training(cfg, std::nullopt, &std::cout);
  const Eigen::VectorXd change = trained.summary.theta.to_vector() - theta0.to_vector();
  std::cout << "parameter change after " << trained.updates.size() << " updates: " << change.norm() << "\n";

  const MpcConfig mpc = cfg.mpc_config();
  TransitionSample sample;
  sample.t = 10.0;
  sample.s = mpc.reference.pose(sample.t) + StateVec(0.05, -0.05, 0.0);
  sample.a = mpc.reference.feedforward(sample.t);
  RandomSource rng(1);
  const StepResult step = env_step(sample.s, sample.a, sample.t, rng, cfg.env);
  sample.cost = step.cost;
  sample.s_next = step.next_state;
  const TdTerms td = td_error(sample, trained.summary.theta, mpc);
  std::cout << "one transition: Q = " << td.action_value << ", V(s+) = " << td.next_value << ", TD error = " << td.delta
            << "\n";
  return 0;
}
