#pragma once

// Training sessions: the fixed-rate loop binding environment, learner and
// trainer, plus greedy evaluation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeptamer/envsim.hpp"
#include "deeptamer/feedback_queue.hpp"
#include "deeptamer/learner.hpp"
#include "deeptamer/model.hpp"
#include "deeptamer/oracle.hpp"
#include "deeptamer/params_io.hpp"
#include "deeptamer/session_log.hpp"

namespace dtamer {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SessionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

}  // namespace detail

struct ModelConfig {
  std::string kind = "deep";  // deep | linear
  HeadConfig head;
  // Linear models only: "pixels" or "features".
  std::string linear_features = "pixels";

  nlohmann::json to_json() const {
    return {{"kind", kind}, {"head", head.to_json()}, {"linear_features", linear_features}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"kind", "head", "linear_features"}, "model");
    ModelConfig m;
    m.kind = j.value("kind", m.kind);
    if (m.kind != "deep" && m.kind != "linear") throw ConfigError("unknown model kind: " + m.kind);
    if (j.contains("head")) m.head = HeadConfig::from_json(j.at("head"));
    m.linear_features = j.value("linear_features", m.linear_features);
    if (m.linear_features != "pixels" && m.linear_features != "features") {
      throw ConfigError("linear_features must be 'pixels' or 'features'");
    }
    return m;
  }
};

enum class TrainerMode { kOracle, kHuman, kScripted };

struct TrainerConfig {
  TrainerMode mode = TrainerMode::kOracle;
  OracleConfig oracle;
  std::string trace_path;  // scripted mode

  nlohmann::json to_json() const {
    const char* m = mode == TrainerMode::kOracle ? "oracle"
                    : mode == TrainerMode::kHuman ? "human"
                                                  : "scripted";
    nlohmann::json j = {{"mode", m}, {"oracle", oracle.to_json()}};
    if (!trace_path.empty()) j["trace_path"] = trace_path;
    return j;
  }

  static TrainerConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"mode", "oracle", "trace_path"}, "trainer");
    TrainerConfig t;
    const std::string m = j.value("mode", "oracle");
    if (m == "oracle") t.mode = TrainerMode::kOracle;
    else if (m == "human") t.mode = TrainerMode::kHuman;
    else if (m == "scripted") t.mode = TrainerMode::kScripted;
    else throw ConfigError("unknown trainer mode: " + m);
    if (j.contains("oracle")) t.oracle = OracleConfig::from_json(j.at("oracle"));
    t.trace_path = j.value("trace_path", "");
    return t;
  }
};

struct SessionConfig {
  nlohmann::json env = {{"kind", "minibowl"}};
  LearnerConfig learner;
  ModelConfig model;
  TrainerConfig trainer;
  double duration = 900.0;  // seconds
  double step_rate = 20.0;  // steps per second
  std::uint64_t seed = 0;
  std::string encoder_params_path;
  std::string log_path;
  std::string params_out_path;
  std::string trace_out_path;
  bool start_paused = false;

  std::int64_t total_steps() const { return std::llround(duration * step_rate); }
  double step_seconds() const { return 1.0 / step_rate; }

  void validate() const {
    if (!(duration > 0.0)) throw ConfigError("duration must be positive");
    if (!(step_rate > 0.0)) throw ConfigError("step_rate must be positive");
    if (learner.algorithm == Algorithm::kTamer && model.kind != "linear") {
      throw ConfigError("the tamer algorithm needs a linear model");
    }
    if (trainer.mode == TrainerMode::kScripted && trainer.trace_path.empty()) {
      throw ConfigError("scripted trainer needs trace_path");
    }
    try {
      learner.validate(step_seconds());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }

  // Step size used when a config file leaves eta out.
  static double default_eta(const std::string& model_kind) {
    return model_kind == "linear" ? 0.05 : 1e-3;
  }

  nlohmann::json to_json() const {
    return {{"env", env},
            {"learner", learner.to_json()},
            {"model", model.to_json()},
            {"trainer", trainer.to_json()},
            {"duration", duration},
            {"step_rate", step_rate},
            {"seed", seed},
            {"encoder_params_path", encoder_params_path},
            {"log_path", log_path},
            {"params_out_path", params_out_path},
            {"trace_out_path", trace_out_path},
            {"start_paused", start_paused}};
  }

  static SessionConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"env", "learner", "model", "trainer", "duration", "step_rate", "seed",
                        "encoder_params_path", "log_path", "params_out_path", "trace_out_path",
                        "start_paused"},
                       "session config");
    SessionConfig c;
    try {
      if (j.contains("env")) c.env = j.at("env");
      if (j.contains("learner")) c.learner = LearnerConfig::from_json(j.at("learner"));
      if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
      if (j.contains("trainer")) c.trainer = TrainerConfig::from_json(j.at("trainer"));
      if (!j.contains("learner") || !j.at("learner").contains("eta")) {
        c.learner.eta = default_eta(c.model.kind);
      }
      c.duration = j.value("duration", c.duration);
      c.step_rate = j.value("step_rate", c.step_rate);
      c.seed = j.value("seed", c.seed);
      c.encoder_params_path = j.value("encoder_params_path", "");
      c.log_path = j.value("log_path", "");
      c.params_out_path = j.value("params_out_path", "");
      c.trace_out_path = j.value("trace_out_path", "");
      c.start_paused = j.value("start_paused", false);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("session config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// Seed streams derived from the session seed.
struct SessionSeeds {
  static std::uint64_t learner(std::uint64_t s) { return derive_seed(s, 1); }
  static std::uint64_t oracle(std::uint64_t s) { return derive_seed(s, 2); }
  static std::uint64_t head_init(std::uint64_t s) { return derive_seed(s, 3); }
  static std::uint64_t episode(std::uint64_t s, int e) {
    return derive_seed(derive_seed(s, 4), static_cast<std::uint64_t>(e));
  }
};

using AnyModel = std::variant<LinearPerActionModel, DeepRewardModel>;

inline ParamFile to_param_file(const AnyModel& m, std::uint64_t seed) {
  return std::visit([&](const auto& x) { return to_param_file(x, seed); }, m);
}

inline AnyModel model_from_param_file(const ParamFile& f) {
  const std::string kind = model_kind(f);
  if (kind == "linear") return linear_from_param_file(f);
  if (kind == "deep") return deep_from_param_file(f);
  throw ParamFileError("parameter file holds a '" + kind + "', not a reward model");
}

// Fresh model for a session. `encoder` overrides encoder_params_path.
inline AnyModel build_model(const SessionConfig& cfg, const Environment& env,
                            const nn::Network* encoder = nullptr) {
  if (cfg.model.kind == "linear") {
    if (cfg.model.linear_features == "features") {
      if (env.feature_dim() < 1) throw ConfigError(env.name() + " exposes no feature vector");
      return LinearPerActionModel(env.num_actions(), env.feature_dim(),
                                  LinearPerActionModel::Features::kEnvFeatures);
    }
    return LinearPerActionModel(env.num_actions(), Observation::kFrames * env.height() * env.width(),
                                LinearPerActionModel::Features::kPixels);
  }
  nn::Network enc;
  if (encoder) {
    enc = *encoder;
  } else {
    if (cfg.encoder_params_path.empty()) {
      throw ConfigError("deep model needs a pretrained encoder (encoder_params_path)");
    }
    enc = encoder_from_param_file(load_param_file(cfg.encoder_params_path));
  }
  Rng rng(SessionSeeds::head_init(cfg.seed));
  return DeepRewardModel::create(std::move(enc), env.num_actions(), cfg.model.head, rng);
}

// Pause/start/reset requests from outside the loop.
class SessionControl {
 public:
  enum class State { kRunning, kPaused, kDone };

  void pause() { set(State::kPaused); }
  void start() { set(State::kRunning); }
  void request_reset() { reset_.store(true); }
  void stop() {
    stop_.store(true);
    cv_.notify_all();
  }
  void finish() { set(State::kDone); }

  State state() const {
    std::lock_guard lock(mu_);
    return state_;
  }
  bool stop_requested() const { return stop_.load(); }
  bool take_reset() { return reset_.exchange(false); }

  // Blocks while paused. Returns false if stop was requested.
  bool wait_runnable() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return state_ != State::kPaused || stop_.load(); });
    return !stop_.load();
  }

  void on_change(std::function<void(State)> fn) {
    std::lock_guard lock(mu_);
    listener_ = std::move(fn);
  }

 private:
  void set(State s) {
    std::function<void(State)> fn;
    {
      std::lock_guard lock(mu_);
      if (state_ == State::kDone || state_ == s) return;
      state_ = s;
      fn = listener_;
    }
    cv_.notify_all();
    if (fn) fn(s);
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  State state_ = State::kRunning;
  std::atomic<bool> stop_{false};
  std::atomic<bool> reset_{false};
  std::function<void(State)> listener_;
};

inline const char* to_string(SessionControl::State s) {
  switch (s) {
    case SessionControl::State::kRunning: return "running";
    case SessionControl::State::kPaused: return "paused";
    case SessionControl::State::kDone: return "done";
  }
  return "unknown";
}

struct StepView {
  std::int64_t step;
  double t;
  const Observation& observation;
  const std::vector<double>& q_values;
  Action action;
  double score_delta;
  int episode;
  double episode_score;
};

struct Telemetry {
  std::uint64_t feedback_count = 0;
  std::uint64_t update_count = 0;
  double mean_recent_score = 0.0;
  std::uint64_t dropped_feedback = 0;
};

struct SessionHooks {
  SessionClock* clock = nullptr;    // default: virtual unless the trainer is human
  FeedbackQueue* queue = nullptr;   // default: private queue
  SessionControl* control = nullptr;
  std::function<void(const StepView&, const Telemetry&)> on_step;
  // In-memory trace for the scripted trainer; overrides trace_path.
  const std::vector<ScheduledFeedback>* trace = nullptr;
  // Encoder to use instead of encoder_params_path.
  const nn::Network* encoder = nullptr;
  // Log sink instead of log_path.
  std::ostream* log = nullptr;
};

struct SessionResult {
  AnyModel model;
  std::int64_t steps = 0;
  std::uint64_t feedback_events = 0;
  std::uint64_t credited_feedback = 0;
  std::uint64_t immediate_updates = 0;
  std::uint64_t periodic_updates = 0;
  std::uint64_t dropped_feedback = 0;
  std::vector<double> episode_scores;
  std::vector<ScheduledFeedback> oracle_trace;
};

namespace detail {

template <RewardModel Model>
SessionResult run_loop(const SessionConfig& cfg, Environment& env, Model model,
                       const SessionHooks& hooks, LogWriter& log) {
  LearnerConfig lcfg = cfg.learner;
  lcfg.rng_seed = SessionSeeds::learner(cfg.seed);
  Learner<Model> learner(std::move(model), lcfg, cfg.step_seconds());

  std::optional<Oracle> oracle;
  std::optional<ScriptedTrainer> scripted;
  if (cfg.trainer.mode == TrainerMode::kOracle) {
    OracleConfig oc = cfg.trainer.oracle;
    oc.rng_seed = SessionSeeds::oracle(cfg.seed);
    oracle.emplace(oc);
  } else if (cfg.trainer.mode == TrainerMode::kScripted) {
    if (hooks.trace) {
      scripted.emplace(*hooks.trace);
    } else {
      std::ifstream is(cfg.trainer.trace_path);
      if (!is) throw ConfigError("cannot open trace " + cfg.trainer.trace_path);
      scripted.emplace(read_trace(is));
    }
  }

  VirtualClock virtual_clock;
  WallClock wall_clock;
  SessionClock* clock = hooks.clock;
  if (!clock) {
    clock = cfg.trainer.mode == TrainerMode::kHuman ? static_cast<SessionClock*>(&wall_clock)
                                                    : &virtual_clock;
  }
  FeedbackQueue own_queue;
  FeedbackQueue* queue = hooks.queue ? hooks.queue : &own_queue;

  if (hooks.control && cfg.start_paused) hooks.control->pause();

  SessionResult result;
  int episode = 0;
  std::int64_t episode_steps = 0;
  Observation obs = env.reset(SessionSeeds::episode(cfg.seed, episode));
  std::deque<double> recent_scores;

  auto fail = [&](const std::string& what, double t) {
    log.write({{"type", "error"}, {"t", t}, {"message", what}});
    log.flush();
    throw SessionError(what);
  };

  const std::int64_t n = cfg.total_steps();
  for (std::int64_t i = 1; i <= n; ++i) {
    if (hooks.control) {
      if (hooks.control->state() == SessionControl::State::kPaused) {
        clock->pause();
        const bool go = hooks.control->wait_runnable();
        clock->resume();
        if (!go) break;
      }
      if (hooks.control->stop_requested()) break;
      if (hooks.control->take_reset()) {
        obs = env.reset(SessionSeeds::episode(cfg.seed, ++episode));
        episode_steps = 0;
      }
    }
    const double t_now = static_cast<double>(i - 1) / cfg.step_rate;
    clock->wait_until(t_now);

    // Feedback that has arrived by the start of this step.
    if (oracle) {
      for (const auto& f : oracle->poll(t_now)) queue->push(f);
    } else if (scripted) {
      for (const auto& f : scripted->poll(t_now)) queue->push(f);
    }
    for (const auto& y : queue->drain_until(t_now)) {
      const auto out = learner.on_feedback(y);
      ++result.feedback_events;
      log.write(FeedbackRecord{y.t_feedback, y.value, y.source, out.credited_pairs, out.feedback_id}
                    .to_json());
      if (out.credited_pairs == 0) continue;
      ++result.credited_feedback;
      if (out.update.error) fail("update failed: " + *out.update.error, y.t_feedback);
      ++result.immediate_updates;
      log.write(UpdateRecord{UpdateOutcome::Kind::kImmediate, i, y.t_feedback, out.update.batch_size,
                             out.update.loss_before, out.update.loss_after}
                    .to_json());
    }

    if (const auto u = learner.periodic_update(i)) {
      if (u->error) fail("update failed: " + *u->error, t_now);
      ++result.periodic_updates;
      log.write(UpdateRecord{UpdateOutcome::Kind::kPeriodic, i, t_now, u->batch_size,
                             u->loss_before, u->loss_after}
                    .to_json());
    }

    Embedding code = learner.model().embed(obs);
    const std::vector<double> q = learner.model().evaluate(code);
    const Action a = learner.select(q);
    const Action optimal = oracle ? env.optimal_action() : Action::kNoAction;
    const StepResult r = env.step(a);
    const Stamp stamp{t_now, static_cast<double>(i) / cfg.step_rate};
    learner.ingest_embedded(std::move(code), a, stamp, i - 1);
    if (oracle) {
      oracle->observe({obs, a, stamp, i - 1}, optimal);
    }
    ++episode_steps;

    log.write(StepRecord{i, t_now, a, q, r.score_delta, episode, env.episode_score()}.to_json());
    if (hooks.on_step) {
      Telemetry tel{result.feedback_events, learner.update_count(), 0.0, queue->dropped()};
      if (!recent_scores.empty()) {
        tel.mean_recent_score = std::accumulate(recent_scores.begin(), recent_scores.end(), 0.0) /
                                static_cast<double>(recent_scores.size());
      }
      hooks.on_step(StepView{i, t_now, r.observation, q, a, r.score_delta, episode,
                             env.episode_score()},
                    tel);
    }

    if (r.episode_done) {
      const double score = env.episode_score();
      log.write(EpisodeRecord{episode, t_now, score, episode_steps}.to_json());
      result.episode_scores.push_back(score);
      recent_scores.push_back(score);
      if (recent_scores.size() > 10) recent_scores.pop_front();
      obs = env.reset(SessionSeeds::episode(cfg.seed, ++episode));
      episode_steps = 0;
    } else {
      obs = r.observation;
    }
    result.steps = i;
    log.flush();
  }

  result.dropped_feedback = queue->dropped();
  if (oracle) result.oracle_trace = oracle->trace();
  log.write({{"type", "summary"},
             {"t", static_cast<double>(result.steps) / cfg.step_rate},
             {"steps", result.steps},
             {"feedback", result.feedback_events},
             {"credited_feedback", result.credited_feedback},
             {"immediate_updates", result.immediate_updates},
             {"periodic_updates", result.periodic_updates},
             {"dropped_feedback", result.dropped_feedback}});
  log.flush();
  if (hooks.control) hooks.control->finish();
  result.model = learner.model();
  return result;
}

}  // namespace detail

// Runs a session from `model`. Writes the log, final parameters and oracle
// trace to the paths in the config unless hooks redirect them.
inline SessionResult run_session(const SessionConfig& cfg, AnyModel model,
                                 const SessionHooks& hooks = {}) {
  cfg.validate();
  auto env = make_environment(cfg.env);

  // Wiring checks before step 0.
  std::visit(
      [&](const auto& m) {
        if (m.num_actions() != env->num_actions()) {
          throw ConfigError("model has " + std::to_string(m.num_actions()) +
                            " actions, environment has " + std::to_string(env->num_actions()));
        }
        try {
          (void)m.embed(env->observation());
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("model does not fit the environment: ") + e.what());
        }
      },
      model);
  if (cfg.learner.algorithm == Algorithm::kTamer &&
      !std::holds_alternative<LinearPerActionModel>(model)) {
    throw ConfigError("the tamer algorithm needs a linear model");
  }

  std::ofstream file;
  std::ostream* sink = hooks.log;
  if (!sink && !cfg.log_path.empty()) {
    file.open(cfg.log_path, std::ios::binary);
    if (!file) throw ConfigError("cannot open log " + cfg.log_path);
    sink = &file;
  }
  LogWriter log(sink);
  log.header(cfg.to_json());

  SessionResult result = std::visit(
      [&](auto m) { return detail::run_loop(cfg, *env, std::move(m), hooks, log); },
      std::move(model));

  if (!cfg.params_out_path.empty()) {
    save_param_file(cfg.params_out_path, to_param_file(result.model, cfg.seed));
  }
  if (!cfg.trace_out_path.empty() && cfg.trainer.mode == TrainerMode::kOracle) {
    std::ofstream os(cfg.trace_out_path, std::ios::binary);
    if (!os) throw ConfigError("cannot open " + cfg.trace_out_path);
    write_trace(os, result.oracle_trace);
  }
  return result;
}

inline SessionResult run_session(const SessionConfig& cfg, const SessionHooks& hooks = {}) {
  cfg.validate();
  const auto env = make_environment(cfg.env);
  return run_session(cfg, build_model(cfg, *env, hooks.encoder), hooks);
}

struct EvalResult {
  double mean_score = 0.0;
  std::vector<double> per_episode_scores;
};

// Greedy rollouts of `policy` (observation, env -> action); no learning.
template <class Policy>
EvalResult evaluate_policy(Environment& env, int episodes, std::uint64_t seed, Policy&& policy) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  EvalResult r;
  for (int e = 0; e < episodes; ++e) {
    Observation obs = env.reset(derive_seed(seed, static_cast<std::uint64_t>(e)));
    while (!env.done()) obs = env.step(policy(obs, env)).observation;
    r.per_episode_scores.push_back(env.episode_score());
  }
  r.mean_score = std::accumulate(r.per_episode_scores.begin(), r.per_episode_scores.end(), 0.0) /
                 static_cast<double>(episodes);
  return r;
}

// Lowest-index argmax of the model, so evaluation is deterministic.
template <RewardModel Model>
EvalResult evaluate(const Model& model, Environment& env, int episodes, std::uint64_t seed) {
  Rng unused(0);
  return evaluate_policy(env, episodes, seed, [&](const Observation& o, const Environment&) {
    const auto q = model.forward(o);
    return select_action(q, TieBreak::kLowestIndex, unused);
  });
}

inline EvalResult evaluate(const AnyModel& model, Environment& env, int episodes,
                           std::uint64_t seed) {
  return std::visit([&](const auto& m) { return evaluate(m, env, episodes, seed); }, model);
}

}  // namespace dtamer
