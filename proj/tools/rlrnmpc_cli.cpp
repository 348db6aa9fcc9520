// Command-line front end: train, eval and compare.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "rlrnmpc/experiment.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> transitions;
  bool full_scale = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--out", o.out, "output directory (default: output_dir from the configuration)");
  cmd->add_option("--transitions", o.transitions, "number of training transitions");
  cmd->add_flag("--paper-scale", o.full_scale, "horizon 15 and 8000 transitions as the starting defaults");
}

rlrnmpc::RunConfig resolve(const CommonOptions& o) {
  using rlrnmpc::RunConfig;
  RunConfig base = o.full_scale ? RunConfig::full_scale() : RunConfig::desk();
  RunConfig cfg = o.config.empty() ? base : rlrnmpc::load_config(o.config, base);
  if (o.seed) cfg.seed = *o.seed;
  if (o.transitions) cfg.training.transitions = *o.transitions;
  if (!o.out.empty()) cfg.output_dir = o.out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace rlrnmpc;
  CLI::App app{"Robust NMPC tuned by second-order LSTDQ on a wheeled mobile robot"};
  app.require_subcommand(1);

  CommonOptions train_opts;
  CLI::App* train = app.add_subcommand("train", "run the learning loop and write logs and parameter snapshots");
  add_common(train, train_opts);

  CommonOptions eval_opts;
  std::string theta_path;
  std::string controller = "rnmpc";
  CLI::App* eval = app.add_subcommand("eval", "closed-loop evaluation without exploration or learning");
  add_common(eval, eval_opts);
  eval->add_option("--theta", theta_path, "parameter snapshot to evaluate (default: initial parameters)")
      ->check(CLI::ExistingFile);
  eval->add_option("--controller", controller, "rnmpc or nominal")->check(CLI::IsMember({"rnmpc", "nominal"}));

  CommonOptions compare_opts;
  CLI::App* compare =
      app.add_subcommand("compare", "train, then evaluate nominal NMPC, RNMPC and the learned RNMPC on common noise");
  add_common(compare, compare_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const RunConfig cfg = resolve(train_opts);
      const std::filesystem::path out = cfg.output_dir;
      const TrainingResult r = run_training(cfg, out, &std::cout);
      std::cout << "training done: " << r.updates.size() << " updates, " << r.rejected_samples
                << " rejected samples, " << r.summary.violation_steps << " violation steps\n"
                << "artifacts in " << out.string() << "\n";
    } else if (*eval) {
      const RunConfig cfg = resolve(eval_opts);
      const ParamSet theta = theta_path.empty() ? ParamSet::initial(cfg.mpc.horizon, cfg.training.sigma_init)
                                                : load_param_set(theta_path);
      const ControllerKind kind = controller == "nominal" ? ControllerKind::kNominal : ControllerKind::kRobust;
      const EvaluationResult r = run_evaluation(cfg, theta, kind);
      const std::filesystem::path out = cfg.output_dir;
      write_text(out / "transitions.csv", r.csv);
      Json s = to_json(r.summary);
      s["config"] = to_json(cfg);
      write_text(out / "summary.json", s.dump(2) + "\n");
      std::cout << r.summary.controller << ": mean index " << r.summary.mean_index << " over "
                << r.summary.lap_index.size() << " laps, " << r.summary.violation_steps << " violation steps\n";
    } else if (*compare) {
      const RunConfig cfg = resolve(compare_opts);
      const std::filesystem::path out = cfg.output_dir;
      const ComparisonResult r = compare_controllers(cfg, out, &std::cout);
      std::cout << comparison_table(r.rows);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
