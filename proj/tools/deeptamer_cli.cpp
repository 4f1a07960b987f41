// deeptamer: pretrain encoders, run and serve training sessions, evaluate
// and replay them, and turn logs into score curves.
//
// Exit codes: 0 success, 1 user error (flags, files, configs), 2 internal.

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "deeptamer/autoencoder.hpp"
#include "deeptamer/gateway.hpp"
#include "deeptamer/params_io.hpp"
#include "deeptamer/session.hpp"
#include "deeptamer/session_log.hpp"

using namespace dtamer;

namespace {

struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UserError("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw UserError(path + ": " + e.what());
  }
}

nlohmann::json env_config(const std::string& name, const std::string& path) {
  if (!path.empty()) return read_json_file(path);
  if (name != "minibowl" && name != "lineworld") throw UserError("unknown environment: " + name);
  return {{"kind", name}};
}

// Flags shared by run and serve. Unset flags leave the config untouched.
struct SessionFlags {
  std::string config_path;
  std::optional<std::string> algo, env, env_config_path, trainer, model, encoder, log, params_out,
      trace_out, trace;
  std::optional<double> duration, rate, eta, feedback_prob;
  std::optional<std::uint64_t> seed;
  bool paused = false;
  unsigned short port = 8080;
  std::string static_dir;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "Session config JSON");
    app->add_option("--algo", algo, "deep-tamer or tamer")->check(CLI::IsMember({"deep-tamer", "tamer"}));
    app->add_option("--model", model, "deep or linear (default follows --algo)")
        ->check(CLI::IsMember({"deep", "linear"}));
    app->add_option("--env", env, "minibowl or lineworld");
    app->add_option("--env-config", env_config_path, "Environment config JSON");
    app->add_option("--trainer", trainer, "oracle, human or scripted")
        ->check(CLI::IsMember({"oracle", "human", "scripted"}));
    app->add_option("--trace", trace, "Oracle trace for the scripted trainer");
    app->add_option("--duration", duration, "Session length in seconds");
    app->add_option("--rate", rate, "Environment steps per second");
    app->add_option("--eta", eta, "Step size");
    app->add_option("--feedback-prob", feedback_prob, "Oracle feedback probability per step");
    app->add_option("--seed", seed, "Session seed");
    app->add_option("--encoder", encoder, "Pretrained encoder params");
    app->add_option("--log", log, "JSONL log output");
    app->add_option("--params-out", params_out, "Final model params output");
    app->add_option("--trace-out", trace_out, "Oracle trace output");
    app->add_flag("--paused", paused, "Wait for a start command before stepping");
    app->add_option("--port", port, "Gateway port");
    app->add_option("--static-dir", static_dir, "Directory served over plain HTTP");
  }

  SessionConfig build() const {
    nlohmann::json j = config_path.empty() ? nlohmann::json::object() : read_json_file(config_path);
    if (algo) {
      j["learner"]["algorithm"] = *algo;
      if (!model) j["model"]["kind"] = *algo == "tamer" ? "linear" : "deep";
    }
    if (model) j["model"]["kind"] = *model;
    if (env || env_config_path) j["env"] = env_config(env.value_or("minibowl"), env_config_path.value_or(""));
    if (trainer) j["trainer"]["mode"] = *trainer;
    if (trace) {
      j["trainer"]["trace_path"] = *trace;
      if (!trainer) j["trainer"]["mode"] = "scripted";
    }
    if (feedback_prob) j["trainer"]["oracle"]["feedback_prob_per_step"] = *feedback_prob;
    if (eta) j["learner"]["eta"] = *eta;
    if (duration) j["duration"] = *duration;
    if (rate) j["step_rate"] = *rate;
    if (seed) j["seed"] = *seed;
    if (encoder) j["encoder_params_path"] = *encoder;
    if (log) j["log_path"] = *log;
    if (params_out) j["params_out_path"] = *params_out;
    if (trace_out) j["trace_out_path"] = *trace_out;
    if (paused) j["start_paused"] = true;
    return SessionConfig::from_json(j);
  }
};

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted.store(true); }

void print_summary(const SessionResult& r) {
  std::cerr << "steps " << r.steps << ", feedback " << r.feedback_events << " ("
            << r.credited_feedback << " credited), updates " << r.immediate_updates
            << " immediate + " << r.periodic_updates << " periodic, episodes "
            << r.episode_scores.size() << "\n";
}

int run_with_gateway(const SessionConfig& cfg, const SessionFlags& flags) {
  GatewayOptions opts;
  opts.port = flags.port;
  opts.static_dir = flags.static_dir;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::atomic<bool> finished{false};
  std::thread watcher;
  const auto r = run_served_session(cfg, opts, [&](Gateway& gw) {
    std::cerr << "serving ws://" << opts.address << ":" << gw.port() << "/train\n";
    watcher = std::thread([&gw, &finished] {
      while (!finished.load()) {
        if (g_interrupted.load()) {
          gw.control().stop();
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
      }
    });
  });
  finished.store(true);
  if (watcher.joinable()) watcher.join();
  print_summary(r);
  return 0;
}

int cmd_run(const SessionFlags& flags, bool force_gateway) {
  SessionFlags f = flags;
  if (force_gateway && !f.trainer) f.trainer = "human";
  const auto cfg = f.build();
  if (force_gateway || cfg.trainer.mode == TrainerMode::kHuman) return run_with_gateway(cfg, f);
  const auto r = run_session(cfg);
  print_summary(r);
  return 0;
}

struct PretrainFlags {
  std::size_t frames = 5000;
  std::string env = "minibowl";
  std::string env_config_path;
  std::string config_path;
  std::optional<int> epochs, batch;
  std::optional<double> eta;
  std::optional<std::string> optimizer;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_pretrain(const PretrainFlags& f) {
  const auto env = make_environment(env_config(f.env, f.env_config_path));
  PretrainConfig pc;
  if (!f.config_path.empty()) pc.encoder = EncoderConfig::from_json(read_json_file(f.config_path));
  pc.encoder.height = env->height();
  pc.encoder.width = env->width();
  if (f.epochs) pc.epochs = *f.epochs;
  if (f.batch) pc.batch_size = *f.batch;
  if (f.eta) pc.eta = *f.eta;
  if (f.optimizer) pc.optimizer = optimizer_from_string(*f.optimizer);
  pc.seed = f.seed;
  const auto frames = collect_random_frames(*env, f.frames, derive_seed(f.seed, 100));
  std::cerr << "collected " << frames.size() << " frames; training " << pc.epochs << " epochs\n";
  const auto r = pretrain_autoencoder(frames, pc);
  std::cerr << "reconstruction error " << r.loss_history.front() << " -> " << r.loss_history.back()
            << " (ratio " << r.loss_history.back() / r.loss_history.front() << ")\n";
  save_param_file(f.out, encoder_param_file(r.encoder, &r.decoder, pc.encoder, f.seed));
  return 0;
}

AnyModel load_model(const std::string& path) {
  return model_from_param_file(load_param_file(path));
}

int cmd_eval(const std::string& params, const std::string& env_name, const std::string& env_path,
             int episodes, std::uint64_t seed) {
  const auto model = load_model(params);
  const auto env = make_environment(env_config(env_name, env_path));
  const auto r = evaluate(model, *env, episodes, seed);
  std::cout << "episode,score\n";
  for (std::size_t e = 0; e < r.per_episode_scores.size(); ++e) {
    std::cout << e << ',' << nlohmann::json(r.per_episode_scores[e]).dump() << '\n';
  }
  std::cerr << "mean score " << r.mean_score << "\n";
  return 0;
}

int cmd_replay(const std::string& log_path, const std::string& trace_path,
               const std::string& out_log, const std::string& params_out,
               const std::optional<std::string>& encoder) {
  std::ifstream is(log_path);
  if (!is) throw UserError("cannot open " + log_path);
  const auto records = read_log(is);
  auto j = records.front().at("config");
  j["trainer"]["mode"] = "scripted";
  j["trainer"]["trace_path"] = trace_path;
  j["log_path"] = out_log;
  j["params_out_path"] = params_out;
  j["trace_out_path"] = "";
  j["start_paused"] = false;
  if (encoder) j["encoder_params_path"] = *encoder;
  const auto r = run_session(SessionConfig::from_json(j));
  print_summary(r);
  return 0;
}

int cmd_plot(const std::string& log_path, std::size_t window, const std::string& out) {
  std::ifstream is(log_path);
  if (!is) throw UserError("cannot open " + log_path);
  const auto series = score_series(read_log(is), window);
  if (out.empty()) {
    write_score_csv(std::cout, series);
  } else {
    std::ofstream os(out);
    if (!os) throw UserError("cannot write " + out);
    write_score_csv(os, series);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep TAMER interactive training"};
  app.require_subcommand(1);

  SessionFlags run_flags;
  auto* run = app.add_subcommand("run", "Run a training session (human trainers get the gateway)");
  run_flags.add(run);

  SessionFlags serve_flags;
  auto* serve = app.add_subcommand("serve", "Run a session behind the WebSocket gateway");
  serve_flags.add(serve);

  PretrainFlags pre;
  auto* pretrain = app.add_subcommand("pretrain", "Train the autoencoder on random-policy frames");
  pretrain->add_option("--frames", pre.frames, "Number of frames to collect");
  pretrain->add_option("--env", pre.env, "minibowl or lineworld");
  pretrain->add_option("--env-config", pre.env_config_path, "Environment config JSON");
  pretrain->add_option("--encoder-config", pre.config_path, "Encoder architecture JSON");
  pretrain->add_option("--epochs", pre.epochs);
  pretrain->add_option("--batch", pre.batch);
  pretrain->add_option("--eta", pre.eta);
  pretrain->add_option("--optimizer", pre.optimizer)->check(CLI::IsMember({"adam", "momentum"}));
  pretrain->add_option("--seed", pre.seed);
  pretrain->add_option("--out", pre.out, "Encoder params output")->required();

  std::string eval_params, eval_env = "minibowl", eval_env_path;
  int eval_episodes = 20;
  std::uint64_t eval_seed = 0;
  auto* eval = app.add_subcommand("eval", "Greedy evaluation of saved params; CSV on stdout");
  eval->add_option("--params", eval_params)->required();
  eval->add_option("--env", eval_env);
  eval->add_option("--env-config", eval_env_path);
  eval->add_option("--episodes", eval_episodes)->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed);

  std::string replay_log, replay_trace, replay_out_log, replay_params;
  std::optional<std::string> replay_encoder;
  auto* replay = app.add_subcommand("replay", "Re-drive a recorded session from its oracle trace");
  replay->add_option("--log", replay_log, "Log of the original session")->required();
  replay->add_option("--trace", replay_trace, "Oracle trace of the original session")->required();
  replay->add_option("--out-log", replay_out_log);
  replay->add_option("--params-out", replay_params);
  replay->add_option("--encoder", replay_encoder, "Override the encoder path in the log");

  std::string plot_log, plot_out;
  std::size_t plot_window = 5;
  auto* plot = app.add_subcommand("plot", "Score-vs-time CSV from a session log");
  plot->add_option("--log", plot_log)->required();
  plot->add_option("--window", plot_window, "Trailing episodes averaged")->check(CLI::PositiveNumber);
  plot->add_option("--out", plot_out, "CSV output (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) return cmd_run(run_flags, false);
    if (*serve) return cmd_run(serve_flags, true);
    if (*pretrain) return cmd_pretrain(pre);
    if (*eval) return cmd_eval(eval_params, eval_env, eval_env_path, eval_episodes, eval_seed);
    if (*replay) return cmd_replay(replay_log, replay_trace, replay_out_log, replay_params, replay_encoder);
    if (*plot) return cmd_plot(plot_log, plot_window, plot_out);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ParamFileError& e) {
    std::cerr << "params error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
