#pragma once

// Run orchestration: configuration files, the learning loop, closed-loop
// evaluation, the three-controller comparison and the artifacts they write.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rlrnmpc/environment.hpp"
#include "rlrnmpc/lstdq.hpp"
#include "rlrnmpc/random.hpp"
#include "rlrnmpc/rnmpc.hpp"
#include "rlrnmpc/types.hpp"
#include "rlrnmpc/uncertainty.hpp"

namespace rlrnmpc {

using Json = nlohmann::ordered_json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainingConfig {
  int transitions = 2000;
  int batch_size = 100;
  double alpha = 1e-6;
  double sigma_init = 2.65;
  /// Standard deviation of the Gaussian exploration added to the policy input.
  Eigen::Vector2d exploration_std{0.1, 0.1};
};

struct EvaluationConfig {
  int laps = 2;
};

/// Random streams derived from the run seed. Every controller evaluated under
/// one seed sees the same plant noise.
enum class SeedStream : std::uint64_t { kTrainingPlant = 0, kExploration = 1, kEvaluationPlant = 2 };

struct RunConfig {
  /// Obstacles, reference, tracking weights and sampling time are taken from
  /// `env`; see mpc_config().
  MpcConfig mpc;
  EnvConfig env;
  TrainingConfig training;
  EvaluationConfig evaluation;
  std::uint64_t seed = 1;
  std::string output_dir = "out";

  /// Desk-scale defaults: horizon 8, 2000 transitions.
  static RunConfig desk() {
    RunConfig c;
    c.mpc.horizon = 8;
    return c;
  }

  /// Horizon 15, 8000 transitions (25 laps of training).
  static RunConfig full_scale() {
    RunConfig c;
    c.mpc.horizon = 15;
    c.training.transitions = 8000;
    return c;
  }

  int rl_steps() const { return training.transitions / training.batch_size; }
  int steps_per_lap() const { return static_cast<int>(std::lround(env.reference.lap_period / env.sampling_time)); }
  double training_laps() const { return training.transitions * env.sampling_time / env.reference.lap_period; }

  MpcConfig mpc_config() const {
    MpcConfig c = mpc;
    c.obstacles = env.obstacles;
    c.reference = env.reference;
    c.tracking = env.tracking;
    c.sampling_time = env.sampling_time;
    return c;
  }

  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(std::string("invalid configuration: ") + what);
    };
    const std::size_t nobs = env.obstacles.size();
    require(mpc.horizon >= 1, "mpc.horizon must be >= 1");
    require(mpc.discount > 0.0 && mpc.discount <= 1.0, "mpc.discount must lie in (0, 1]");
    require(mpc.terminal_scale >= 0.0, "mpc.terminal_scale must be >= 0");
    require(mpc.slack_weight.size() == nobs, "mpc.slack_weight needs one entry per obstacle");
    require(mpc.terminal_slack_weight.size() == nobs, "mpc.terminal_slack_weight needs one entry per obstacle");
    require((mpc.input_min.array() < mpc.input_max.array()).all(), "mpc.input_min must be below mpc.input_max");
    require((mpc.lqr_state_weight.array() > 0.0).all() && (mpc.lqr_input_weight.array() > 0.0).all(),
            "LQR weights must be positive");
    require(mpc.solver.tolerance > 0.0 && mpc.solver.max_iterations >= 1, "solver settings out of range");
    require(env.penalty.size() == nobs, "environment.penalty needs one entry per obstacle");
    for (const Obstacle& o : env.obstacles)
      require((o.semi_axes.array() > 0.0).all(), "obstacle semi-axes must be positive");
    require(env.sampling_time > 0.0, "environment.sampling_time must be positive");
    require(env.reference.lap_period > 0.0, "environment.lap_period must be positive");
    require(env.noise.sd_speed >= 0.0 && env.noise.sd_turn >= 0.0, "plant noise must be nonnegative");
    require(training.batch_size >= 1, "training.batch_size must be >= 1");
    require(training.transitions >= training.batch_size, "training.transitions must cover one batch");
    require(training.transitions % training.batch_size == 0,
            "training.transitions must be a multiple of training.batch_size");
    require(training.alpha >= 0.0, "training.alpha must be >= 0");
    require(training.sigma_init >= 0.0, "training.sigma_init must be >= 0");
    require((training.exploration_std.array() >= 0.0).all(), "training.exploration_std must be >= 0");
    require(evaluation.laps >= 1, "evaluation.laps must be >= 1");
  }
};

namespace detail {

template <class Vec>
Json vector_json(const Vec& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Json list_json(const std::vector<double>& v) { return Json(v); }

/// Reads the keys of one JSON object and rejects any it does not consume.
class SectionReader {
 public:
  SectionReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("configuration section '" + path_ + "' must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const Json* take(const char* key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  void number(const char* key, double& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }

  void integer(const char* key, int& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      out = v->get<int>();
    }
  }

  void unsigned_integer(const char* key, std::uint64_t& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }

  void text(const char* key, std::string& out) {
    if (const Json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }

  void list(const char* key, std::vector<double>& out) {
    if (const Json* v = take(key)) out = numbers(*v, key, -1);
  }

  template <int N>
  void fixed(const char* key, Eigen::Matrix<double, N, 1>& out) {
    if (const Json* v = take(key)) {
      const std::vector<double> x = numbers(*v, key, N);
      for (int i = 0; i < N; ++i) out(i) = x[static_cast<std::size_t>(i)];
    }
  }

  std::vector<double> numbers(const Json& v, const std::string& key, int expected) const {
    if (!v.is_array()) fail(key, "an array of numbers");
    std::vector<double> out;
    for (const Json& x : v) {
      if (!x.is_number()) fail(key, "an array of numbers");
      out.push_back(x.get<double>());
    }
    if (expected >= 0 && out.size() != static_cast<std::size_t>(expected))
      fail(key, "an array of " + std::to_string(expected) + " numbers");
    return out;
  }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (used_.count(it.key()) == 0) throw ConfigError("unknown configuration key '" + path(it.key()) + "'");
  }

 private:
  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError("configuration key '" + path(key) + "' must be " + what);
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  using detail::list_json;
  using detail::vector_json;
  Json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;

  Json& m = j["mpc"];
  m["horizon"] = c.mpc.horizon;
  m["discount"] = c.mpc.discount;
  m["terminal_scale"] = c.mpc.terminal_scale;
  m["slack_weight"] = list_json(c.mpc.slack_weight);
  m["terminal_slack_weight"] = list_json(c.mpc.terminal_slack_weight);
  m["input_min"] = vector_json(c.mpc.input_min);
  m["input_max"] = vector_json(c.mpc.input_max);
  m["lqr_state_weight"] = vector_json(c.mpc.lqr_state_weight);
  m["lqr_input_weight"] = vector_json(c.mpc.lqr_input_weight);
  m["initial_covariance"] = vector_json(Eigen::Map<const Eigen::Matrix<double, 9, 1>>(c.mpc.initial_covariance.data()));
  Json offsets = Json::array();
  for (const ControlVec& o : c.mpc.cold_start_offsets) offsets.push_back(vector_json(o));
  m["cold_start_offsets"] = offsets;

  Json& s = j["solver"];
  s["tolerance"] = c.mpc.solver.tolerance;
  s["max_iterations"] = c.mpc.solver.max_iterations;
  s["hessian_floor"] = c.mpc.solver.hessian_floor;
  s["retry_hessian_floor"] = c.mpc.solver.retry_hessian_floor;

  Json& e = j["environment"];
  Json obstacles = Json::array();
  for (const Obstacle& o : c.env.obstacles)
    obstacles.push_back(Json{{"center", vector_json(o.center)}, {"semi_axes", vector_json(o.semi_axes)}});
  e["obstacles"] = obstacles;
  e["amplitude"] = c.env.reference.amplitude;
  e["lap_period"] = c.env.reference.lap_period;
  e["sampling_time"] = c.env.sampling_time;
  e["initial_state"] = vector_json(c.env.initial_state);
  e["penalty"] = list_json(c.env.penalty);
  e["noise_sd_speed"] = c.env.noise.sd_speed;
  e["noise_sd_turn"] = c.env.noise.sd_turn;
  e["tracking_state"] = vector_json(c.env.tracking.state);
  e["tracking_input"] = vector_json(c.env.tracking.input);

  Json& t = j["training"];
  t["transitions"] = c.training.transitions;
  t["batch_size"] = c.training.batch_size;
  t["rl_steps"] = c.rl_steps();
  t["alpha"] = c.training.alpha;
  t["sigma_init"] = c.training.sigma_init;
  t["exploration_std"] = vector_json(c.training.exploration_std);

  j["evaluation"]["laps"] = c.evaluation.laps;
  return j;
}

/// Overlays the keys present in `j` on `base`. Unknown keys, wrong types and
/// inconsistent values raise ConfigError.
inline RunConfig parse_config(const Json& j, RunConfig base = RunConfig::desk()) {
  using detail::SectionReader;
  RunConfig c = std::move(base);
  try {
    SectionReader root(j, "");
    root.unsigned_integer("seed", c.seed);
    root.text("output_dir", c.output_dir);

    if (const Json* mj = root.take("mpc")) {
      SectionReader m(*mj, "mpc");
      m.integer("horizon", c.mpc.horizon);
      m.number("discount", c.mpc.discount);
      m.number("terminal_scale", c.mpc.terminal_scale);
      m.list("slack_weight", c.mpc.slack_weight);
      m.list("terminal_slack_weight", c.mpc.terminal_slack_weight);
      m.fixed("input_min", c.mpc.input_min);
      m.fixed("input_max", c.mpc.input_max);
      m.fixed("lqr_state_weight", c.mpc.lqr_state_weight);
      m.fixed("lqr_input_weight", c.mpc.lqr_input_weight);
      if (const Json* v = m.take("initial_covariance")) {
        const std::vector<double> x = m.numbers(*v, "initial_covariance", 9);
        c.mpc.initial_covariance = Eigen::Map<const Mat3>(x.data());
      }
      if (const Json* v = m.take("cold_start_offsets")) {
        if (!v->is_array()) throw ConfigError("configuration key 'mpc.cold_start_offsets' must be an array");
        c.mpc.cold_start_offsets.clear();
        for (const Json& o : *v) {
          const std::vector<double> x = m.numbers(o, "cold_start_offsets", 2);
          c.mpc.cold_start_offsets.emplace_back(x[0], x[1]);
        }
      }
      m.finish();
    }

    if (const Json* sj = root.take("solver")) {
      SectionReader s(*sj, "solver");
      s.number("tolerance", c.mpc.solver.tolerance);
      s.integer("max_iterations", c.mpc.solver.max_iterations);
      s.number("hessian_floor", c.mpc.solver.hessian_floor);
      s.number("retry_hessian_floor", c.mpc.solver.retry_hessian_floor);
      s.finish();
    }

    if (const Json* ej = root.take("environment")) {
      SectionReader e(*ej, "environment");
      if (const Json* v = e.take("obstacles")) {
        if (!v->is_array()) throw ConfigError("configuration key 'environment.obstacles' must be an array");
        c.env.obstacles.clear();
        for (const Json& oj : *v) {
          SectionReader o(oj, "environment.obstacles[]");
          Obstacle ob{Eigen::Vector2d::Zero(), Eigen::Vector2d::Ones()};
          if (!o.has("center") || !o.has("semi_axes"))
            throw ConfigError("each obstacle needs 'center' and 'semi_axes'");
          o.fixed("center", ob.center);
          o.fixed("semi_axes", ob.semi_axes);
          o.finish();
          c.env.obstacles.push_back(ob);
        }
      }
      e.number("amplitude", c.env.reference.amplitude);
      e.number("lap_period", c.env.reference.lap_period);
      e.number("sampling_time", c.env.sampling_time);
      e.fixed("initial_state", c.env.initial_state);
      e.list("penalty", c.env.penalty);
      e.number("noise_sd_speed", c.env.noise.sd_speed);
      e.number("noise_sd_turn", c.env.noise.sd_turn);
      e.fixed("tracking_state", c.env.tracking.state);
      e.fixed("tracking_input", c.env.tracking.input);
      e.finish();
    }

    std::optional<int> rl_steps;
    if (const Json* tj = root.take("training")) {
      SectionReader t(*tj, "training");
      t.integer("transitions", c.training.transitions);
      t.integer("batch_size", c.training.batch_size);
      if (t.has("rl_steps")) {
        int r = 0;
        t.integer("rl_steps", r);
        rl_steps = r;
      }
      t.number("alpha", c.training.alpha);
      t.number("sigma_init", c.training.sigma_init);
      t.fixed("exploration_std", c.training.exploration_std);
      t.finish();
    }

    if (const Json* vj = root.take("evaluation")) {
      SectionReader v(*vj, "evaluation");
      v.integer("laps", c.evaluation.laps);
      v.finish();
    }
    root.finish();

    if (rl_steps && *rl_steps * c.training.batch_size != c.training.transitions)
      throw ConfigError("invalid configuration: training.transitions must equal batch_size * rl_steps");
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("configuration: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = RunConfig::desk()) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open configuration file " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("configuration file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, std::move(base));
}

inline Json to_json(const ParamSet& theta) {
  const ThetaLayout l = theta.layout();
  Json j;
  j["horizon"] = theta.horizon();
  j["ordering"] = "svec(M)[6], d_bar[3N], svec(Lambda)[6], sigma[N+1]; svec packs the upper triangle row by row "
                  "with off-diagonals scaled by sqrt(2)";
  j["layout"] = Json{{"cost_matrix", l.cost_matrix(0)},
                     {"disturbance_mean", l.disturbance_mean(0, 0)},
                     {"covariance", l.covariance(0)},
                     {"radius", l.radius(0)},
                     {"size", l.size()}};
  j["theta"] = detail::vector_json(theta.to_vector());
  j["min_eigenvalue_covariance"] = min_eigenvalue(theta.covariance);
  j["membership_probability_radius0"] = membership_probability(3, std::max(0.0, theta.radius(0)));
  return j;
}

inline ParamSet param_set_from_json(const Json& j) {
  try {
    const int horizon = j.at("horizon").get<int>();
    const std::vector<double> v = j.at("theta").get<std::vector<double>>();
    return ParamSet::from_vector(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())),
                                 horizon);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("parameter snapshot: ") + e.what());
  } catch (const DomainError& e) {
    throw ConfigError(std::string("parameter snapshot: ") + e.what());
  }
}

inline ParamSet load_param_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open parameter snapshot " + path.string());
  try {
    return param_set_from_json(Json::parse(in));
  } catch (const Json::parse_error& e) {
    throw ConfigError("parameter snapshot " + path.string() + " is not valid JSON: " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& body) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << body;
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Transition log

inline constexpr const char* kTransitionHeader =
    "step,t,x,y,psi,v_cmd,omega_cmd,cost,td_error,n_violations,solve_iters,solve_status";

struct TransitionRecord {
  long step = 0;
  double t = 0.0;
  StateVec s = StateVec::Zero();
  ControlVec a = ControlVec::Zero();
  double cost = 0.0;
  double td_error = std::numeric_limits<double>::quiet_NaN();
  int violations = 0;
  int solve_iters = 0;
  nlp::SolverStatus solve_status = nlp::SolverStatus::kConverged;
};

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_row(const TransitionRecord& r) {
  std::string out = std::to_string(r.step);
  for (double v : {r.t, r.s(0), r.s(1), r.s(2), r.a(0), r.a(1), r.cost, r.td_error}) out += "," + format_number(v);
  out += "," + std::to_string(r.violations) + "," + std::to_string(r.solve_iters) + "," +
         nlp::to_string(r.solve_status) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Run summaries

struct TimingStats {
  double wall_seconds = 0.0;
  double mean_solve_ms = 0.0;
  double max_solve_ms = 0.0;
};

struct RunSummary {
  std::string controller;
  std::vector<double> lap_index;  ///< baseline cost summed over each complete lap
  double mean_index = std::numeric_limits<double>::quiet_NaN();
  double laps = 0.0;              ///< steps * Ts / lap_period
  long steps = 0;
  int violation_steps = 0;        ///< steps with at least one h_j > 0
  int nonconverged_solves = 0;
  ParamSet theta;
  TimingStats timing;
};

inline Json to_json(const RunSummary& s) {
  Json j;
  j["controller"] = s.controller;
  j["steps"] = s.steps;
  j["laps"] = s.laps;
  j["lap_index"] = s.lap_index;
  j["mean_index"] = std::isnan(s.mean_index) ? Json(nullptr) : Json(s.mean_index);
  j["violation_steps"] = s.violation_steps;
  j["nonconverged_solves"] = s.nonconverged_solves;
  j["theta"] = to_json(s.theta);
  j["timing"] = Json{{"wall_seconds", s.timing.wall_seconds},
                     {"mean_solve_ms", s.timing.mean_solve_ms},
                     {"max_solve_ms", s.timing.max_solve_ms}};
  return j;
}

namespace detail {

/// Accumulates per-lap indices, violations and solve timings along a run.
class RunMonitor {
 public:
  RunMonitor(std::string controller, int steps_per_lap, double lap_fraction_per_step)
      : steps_per_lap_(steps_per_lap), lap_fraction_(lap_fraction_per_step), start_(Clock::now()) {
    summary_.controller = std::move(controller);
  }

  void solve(double ms, bool converged) {
    ++solves_;
    total_ms_ += ms;
    summary_.timing.max_solve_ms = std::max(summary_.timing.max_solve_ms, ms);
    if (!converged) ++summary_.nonconverged_solves;
  }

  void step(double cost, int violations) {
    lap_sum_ += cost;
    ++summary_.steps;
    if (violations > 0) ++summary_.violation_steps;
    if (summary_.steps % steps_per_lap_ == 0) {
      summary_.lap_index.push_back(lap_sum_);
      lap_sum_ = 0.0;
    }
  }

  RunSummary finish(const ParamSet& theta) {
    summary_.theta = theta;
    summary_.laps = static_cast<double>(summary_.steps) * lap_fraction_;
    if (!summary_.lap_index.empty()) {
      double total = 0.0;
      for (double v : summary_.lap_index) total += v;
      summary_.mean_index = total / static_cast<double>(summary_.lap_index.size());
    }
    summary_.timing.wall_seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    summary_.timing.mean_solve_ms = solves_ > 0 ? total_ms_ / solves_ : 0.0;
    return summary_;
  }

 private:
  using Clock = std::chrono::steady_clock;
  int steps_per_lap_;
  double lap_fraction_;
  Clock::time_point start_;
  RunSummary summary_;
  double lap_sum_ = 0.0;
  long solves_ = 0;
  double total_ms_ = 0.0;
};

template <class F>
auto timed(double& ms, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  auto out = f();
  ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training

/// Audit record of one parameter update.
struct UpdateRecord {
  int rl_step = 0;        ///< 1-based
  long transition = 0;    ///< transitions consumed so far
  ParamSet theta;         ///< parameters after the update
  BatchStatistics batch;  ///< A and b are left empty when the batch had no accepted samples
  double damping = 0.0;
  bool fallback = false;
  bool skipped = false;   ///< no accepted samples, parameters unchanged
  double min_eigenvalue_covariance = 0.0;
  double min_radius = 0.0;
};

inline Json to_json(const UpdateRecord& u) {
  Json j = to_json(u.theta);
  j["rl_step"] = u.rl_step;
  j["transition"] = u.transition;
  j["batch"] = Json{{"accepted", u.batch.accepted},
                    {"rejected", u.batch.rejected},
                    {"degenerate", u.batch.degenerate},
                    {"mean_abs_td", u.batch.mean_abs_td},
                    {"damping", u.damping},
                    {"fallback", u.fallback},
                    {"skipped", u.skipped}};
  return j;
}

struct TrainingResult {
  RunSummary summary;
  std::vector<UpdateRecord> updates;
  /// V_theta(s) at every transition, under the parameters that chose its action.
  std::vector<double> values;
  std::string csv;
  int rejected_samples = 0;
};

inline std::string snapshot_name(int rl_step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "theta_%04d.json", rl_step);
  return buf;
}

/// Learning loop: explore around the RNMPC policy, collect one batch of TD
/// terms, take a projected Newton step and repeat. With `out_dir` set the
/// transition log, one parameter snapshot per update and the summary are
/// written there.
inline TrainingResult run_training(const RunConfig& cfg, const std::optional<std::filesystem::path>& out_dir = {},
                                   std::ostream* progress = nullptr) {
  cfg.validate();
  const MpcConfig mpc = cfg.mpc_config();
  const double Ts = cfg.env.sampling_time;
  Environment env(cfg.env, derive_seed(cfg.seed, static_cast<std::uint64_t>(SeedStream::kTrainingPlant)));
  RandomSource explore(derive_seed(cfg.seed, static_cast<std::uint64_t>(SeedStream::kExploration)));
  RnmpcController controller(mpc, true);
  ParamSet theta = ParamSet::initial(mpc.horizon, cfg.training.sigma_init);

  TrainingResult result;
  detail::RunMonitor monitor("rl_rnmpc_training", cfg.steps_per_lap(), Ts / cfg.env.reference.lap_period);
  result.csv = std::string(kTransitionHeader) + "\n";
  result.values.reserve(static_cast<std::size_t>(cfg.training.transitions));

  double ms = 0.0;
  SchemeSolution v = detail::timed(ms, [&] { return controller.solve_value(env.state(), theta, env.time()); });
  monitor.solve(ms, v.converged());

  std::vector<TdTerms> batch;
  int batch_rejected = 0;
  for (long step = 0; step < cfg.training.transitions; ++step) {
    TransitionSample sample;
    sample.s = env.state();
    sample.t = env.time();
    // Separate statements fix the draw order; argument evaluation order is unspecified.
    const double e_speed = cfg.training.exploration_std(0) * explore.normal();
    const double e_turn = cfg.training.exploration_std(1) * explore.normal();
    sample.a = (v.first_input + ControlVec(e_speed, e_turn)).cwiseMax(mpc.input_min).cwiseMin(mpc.input_max);
    const StepResult r = env.step(sample.a);
    sample.cost = r.cost;
    sample.s_next = r.next_state;
    result.values.push_back(v.value);

    // The policy solve at s+ doubles as the successor value of this sample.
    SchemeSolution v_next =
        detail::timed(ms, [&] { return controller.solve_value(sample.s_next, theta, sample.t + Ts); });
    monitor.solve(ms, v_next.converged());

    TransitionRecord rec;
    rec.step = step;
    rec.t = sample.t;
    rec.s = sample.s;
    rec.a = sample.a;
    rec.cost = sample.cost;
    rec.violations = r.violations;
    rec.solve_iters = v.solution.iterations;
    rec.solve_status = v.solution.status;
    try {
      TdTerms terms = td_terms(sample, theta, controller, v, v_next);
      rec.td_error = terms.delta;
      batch.push_back(std::move(terms));
    } catch (const SampleRejected&) {
      ++batch_rejected;
    }
    result.csv += csv_row(rec);
    monitor.step(sample.cost, r.violations);

    if ((step + 1) % cfg.training.batch_size == 0) {
      UpdateRecord u;
      u.rl_step = static_cast<int>(result.updates.size()) + 1;
      u.transition = step + 1;
      if (batch.empty()) {
        u.skipped = true;
        u.batch.rejected = batch_rejected;
      } else {
        u.batch = accumulate_batch(batch, mpc.discount, batch_rejected);
        const NewtonStep ns = newton_step(u.batch.A, u.batch.b, cfg.training.alpha);
        u.damping = ns.damping;
        u.fallback = ns.fallback;
        const Eigen::VectorXd d = project_step(theta, ns.step);
        const ParamSet updated = apply_update(theta, d);
        if (updated.to_vector() != theta.to_vector()) {
          theta = updated;
          // The successor state acts under the new parameters.
          v_next = detail::timed(ms, [&] { return controller.solve_value(sample.s_next, theta, sample.t + Ts); });
          monitor.solve(ms, v_next.converged());
        }
      }
      u.theta = theta;
      u.min_eigenvalue_covariance = min_eigenvalue(theta.covariance);
      u.min_radius = theta.radius.minCoeff();
      result.rejected_samples += batch_rejected;
      if (out_dir) write_text(*out_dir / "theta" / snapshot_name(u.rl_step), to_json(u).dump(2) + "\n");
      if (progress != nullptr)
        *progress << "rl step " << u.rl_step << "/" << cfg.rl_steps() << ": accepted " << u.batch.accepted
                  << ", rejected " << u.batch.rejected << ", mean |td| " << u.batch.mean_abs_td << "\n";
      result.updates.push_back(std::move(u));
      batch.clear();
      batch_rejected = 0;
    }
    v = std::move(v_next);
  }

  result.summary = monitor.finish(theta);
  if (out_dir) {
    write_text(*out_dir / "transitions.csv", result.csv);
    Json s = to_json(result.summary);
    s["rl_steps"] = static_cast<int>(result.updates.size());
    s["rejected_samples"] = result.rejected_samples;
    s["config"] = to_json(cfg);
    write_text(*out_dir / "summary.json", s.dump(2) + "\n");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class ControllerKind { kNominal, kRobust };

struct EvaluationResult {
  RunSummary summary;
  std::string csv;
};

/// Closed loop without exploration or learning for cfg.evaluation.laps laps,
/// plant noise drawn from the evaluation stream of cfg.seed.
inline EvaluationResult run_evaluation(const RunConfig& cfg, const ParamSet& theta,
                                       ControllerKind kind = ControllerKind::kRobust, std::string label = {}) {
  cfg.validate();
  const MpcConfig mpc = cfg.mpc_config();
  if (theta.horizon() != mpc.horizon) throw ConfigError("parameter horizon does not match mpc.horizon");
  const bool robust = kind == ControllerKind::kRobust;
  if (label.empty()) label = robust ? "rnmpc" : "nominal";
  const ParamSet used = robust ? theta : ParamSet::zero_tube(mpc.horizon);

  Environment env(cfg.env, derive_seed(cfg.seed, static_cast<std::uint64_t>(SeedStream::kEvaluationPlant)));
  RnmpcController controller(mpc, robust);
  detail::RunMonitor monitor(label, cfg.steps_per_lap(), cfg.env.sampling_time / cfg.env.reference.lap_period);
  EvaluationResult out;
  out.csv = std::string(kTransitionHeader) + "\n";
  const long steps = static_cast<long>(cfg.evaluation.laps) * cfg.steps_per_lap();
  for (long step = 0; step < steps; ++step) {
    TransitionRecord rec;
    rec.step = step;
    rec.t = env.time();
    rec.s = env.state();
    double ms = 0.0;
    const SchemeSolution v = detail::timed(ms, [&] { return controller.solve_value(rec.s, used, rec.t); });
    monitor.solve(ms, v.converged());
    rec.a = v.first_input;
    rec.solve_iters = v.solution.iterations;
    rec.solve_status = v.solution.status;
    const StepResult r = env.step(rec.a);
    rec.cost = r.cost;
    rec.violations = r.violations;
    out.csv += csv_row(rec);
    monitor.step(r.cost, r.violations);
  }
  out.summary = monitor.finish(used);
  return out;
}

// ---------------------------------------------------------------------------
// Comparison

struct ComparisonResult {
  TrainingResult training;
  /// nominal NMPC, RNMPC with initial parameters, RNMPC with learned parameters
  std::vector<RunSummary> rows;
};

inline std::string comparison_table(const std::vector<RunSummary>& rows) {
  std::string out = "controller,mean_index,violation_steps,laps,nonconverged_solves\n";
  for (const RunSummary& r : rows)
    out += r.controller + "," + format_number(r.mean_index) + "," + std::to_string(r.violation_steps) + "," +
           format_number(r.laps) + "," + std::to_string(r.nonconverged_solves) + "\n";
  return out;
}

inline std::string lap_table(const std::vector<RunSummary>& rows) {
  std::string out = "controller,lap,index\n";
  for (const RunSummary& r : rows)
    for (std::size_t k = 0; k < r.lap_index.size(); ++k)
      out += r.controller + "," + std::to_string(k + 1) + "," + format_number(r.lap_index[k]) + "\n";
  return out;
}

/// Trains from the initial parameters, then evaluates the three controllers
/// under common plant noise.
inline ComparisonResult compare_controllers(const RunConfig& cfg,
                                            const std::optional<std::filesystem::path>& out_dir = {},
                                            std::ostream* progress = nullptr) {
  ComparisonResult out;
  const std::optional<std::filesystem::path> train_dir =
      out_dir ? std::optional<std::filesystem::path>(*out_dir / "training") : std::nullopt;
  out.training = run_training(cfg, train_dir, progress);
  const ParamSet initial = ParamSet::initial(cfg.mpc.horizon, cfg.training.sigma_init);
  struct Entry {
    ControllerKind kind;
    const ParamSet* theta;
    const char* label;
  };
  const Entry entries[] = {{ControllerKind::kNominal, &initial, "nominal"},
                           {ControllerKind::kRobust, &initial, "rnmpc"},
                           {ControllerKind::kRobust, &out.training.summary.theta, "rl_rnmpc"}};
  for (const Entry& e : entries) {
    EvaluationResult r = run_evaluation(cfg, *e.theta, e.kind, e.label);
    if (progress != nullptr)
      *progress << e.label << ": mean index " << r.summary.mean_index << ", violation steps "
                << r.summary.violation_steps << "\n";
    if (out_dir) write_text(*out_dir / (std::string(e.label) + "_transitions.csv"), r.csv);
    out.rows.push_back(std::move(r.summary));
  }
  if (out_dir) {
    write_text(*out_dir / "comparison.csv", comparison_table(out.rows));
    write_text(*out_dir / "laps.csv", lap_table(out.rows));
    Json s;
    s["config"] = to_json(cfg);
    s["controllers"] = Json::array();
    for (const RunSummary& r : out.rows) s["controllers"].push_back(to_json(r));
    write_text(*out_dir / "summary.json", s.dump(2) + "\n");
  }
  return out;
}

}  // namespace rlrnmpc
