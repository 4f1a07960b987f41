// Acceptance run: one PASS/FAIL line per criterion of the primary component.
// Exit status is nonzero if any line is FAIL.
//
// The autoencoder trained for the pretraining criterion is reused by the
// end-to-end, weighting and determinism checks, so they run in that order.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "deeptamer/autoencoder.hpp"
#include "deeptamer/learner.hpp"
#include "deeptamer/params_io.hpp"
#include "deeptamer/session.hpp"
#include "oracles.hpp"

namespace dtamer {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double time_limit_s;  // 0 means no limit
  std::function<Outcome()> check;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::filesystem::path work_dir() {
  static const auto dir = [] {
    auto d = std::filesystem::temp_directory_path() / ("dtamer_accept_" + std::to_string(::getpid()));
    std::filesystem::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// ---- credit assignment ----

double quadrature_weight(const DelayDistribution& d, const Stamp& s, double tf) {
  const double lo = std::max(0.0, tf - s.t_end);
  const double hi = std::max(0.0, tf - s.t_start);
  std::vector<double> breaks;
  if (d.is_uniform()) breaks = {d.as_uniform().lo, d.as_uniform().hi};
  return testing::adaptive_simpson([&](double t) { return d.density(t); }, lo, hi, 1e-12, breaks);
}

Outcome credit_check() {
  Rng rng(2024);
  double worst = 0.0;
  double worst_additivity = 0.0;
  int nonzero_outside = 0;
  for (const auto& d : {DelayDistribution::uniform(0.2, 4.0), DelayDistribution::uniform(0.28, 4.0),
                        DelayDistribution::gamma(2.0, 0.28)}) {
    for (int i = 0; i < 1000; ++i) {
      const double ts = uniform_real(rng, 0.0, 30.0);
      const double te = ts + uniform_real(rng, 0.0, 1.5);
      const double tf = ts + uniform_real(rng, -1.0, 6.0);
      worst = std::max(worst, std::abs(weight(Stamp{ts, te}, tf, d) - quadrature_weight(d, {ts, te}, tf)));

      const double tm = uniform_real(rng, ts, te);
      const double parts = weight(Stamp{ts, tm}, tf, d) + weight(Stamp{tm, te}, tf, d);
      worst_additivity = std::max(worst_additivity, std::abs(weight(Stamp{ts, te}, tf, d) - parts));

      // Feedback before the experience began, and (uniform only) after the
      // whole experience left the support.
      nonzero_outside += weight(Stamp{ts, te}, ts - uniform_real(rng, 0.0, 2.0), d) != 0.0;
      if (d.is_uniform()) {
        const double late = te + d.as_uniform().hi + uniform_real(rng, 0.0, 3.0);
        const double early = ts + uniform_real(rng, 0.0, d.as_uniform().lo);
        nonzero_outside += weight(Stamp{ts, te}, late, d) != 0.0;
        nonzero_outside += weight(Stamp{ts, te}, early, d) != 0.0;
      }
    }
  }
  // Additivity is a difference of CDF values, so it holds to rounding.
  const bool pass = worst < 1e-6 && worst_additivity < 1e-12 && nonzero_outside == 0;
  return {pass, fmt("3000 cases: max |w - quadrature| %.2e, max additivity gap %.2e, %d nonzero "
                    "weights outside support",
                    worst, worst_additivity, nonzero_outside)};
}

// ---- gradient fidelity ----

Observation random_state(Rng& rng, int h, int w) {
  Observation s;
  s.height = h;
  s.width = w;
  s.pixels.resize(static_cast<std::size_t>(Observation::kFrames) * h * w);
  for (double& v : s.pixels) v = uniform01(rng);
  return s;
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = uniform_real(rng, -scale, scale);
  return v;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.height = 9;
  c.width = 9;
  c.conv = {{3, 3, 2}, {2, 3, 1}};
  c.latent_dim = 4;
  c.hidden_activation = nn::Activation::kTanh;
  c.latent_activation = nn::Activation::kTanh;
  return c;
}

template <class M>
double batch_gradient_error(M& m, std::vector<Embedding> codes, Rng& rng) {
  std::vector<WeightedSample> batch;
  for (const auto& c : codes) {
    batch.push_back({&c, static_cast<int>(uniform_index(rng, kNumActions)), uniform_real(rng, -1, 1),
                     uniform_real(rng, 0.05, 1.0)});
  }
  const auto analytic = m.gradient(batch).values;
  const auto numeric = testing::finite_difference(
      [&] { return batch_loss(m, std::span<const WeightedSample>(batch)); }, m.parameters());
  return testing::max_relative_error(analytic, numeric);
}

Outcome gradient_check() {
  double lin = 0.0, head = 0.0, conv = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    Rng rng(7000 + inst);
    LinearPerActionModel m(kNumActions, 6, LinearPerActionModel::Features::kEnvFeatures);
    m.parameters() = random_vector(rng, m.parameters().size());
    std::vector<Embedding> codes;
    for (int i = 0; i < 5; ++i) {
      Observation s;
      s.features = random_vector(rng, 6);
      codes.push_back(m.embed(s));
    }
    lin = std::max(lin, batch_gradient_error(m, codes, rng));
  }
  for (int inst = 0; inst < 20; ++inst) {
    Rng rng(8000 + inst);
    auto enc = build_encoder(small_encoder());
    enc.init_uniform(rng);
    HeadConfig hc;
    hc.hidden = {6, 5};
    auto m = DeepRewardModel::create(enc, kNumActions, hc, rng);
    m.parameters() = random_vector(rng, m.parameters().size(), 0.8);
    std::vector<Embedding> codes;
    for (int i = 0; i < 6; ++i) codes.push_back(m.embed(random_state(rng, 9, 9)));
    head = std::max(head, batch_gradient_error(m, codes, rng));
  }
  for (int inst = 0; inst < 20; ++inst) {
    Rng rng(9000 + inst);
    auto enc = build_encoder(small_encoder());
    enc.init_uniform(rng);
    for (double& p : enc.params()) p += uniform_real(rng, -0.1, 0.1);
    HeadConfig hc;
    hc.hidden = {5};
    hc.activation = nn::Activation::kTanh;
    auto m = DeepRewardModel::create(enc, kNumActions, hc, rng);
    m.parameters() = random_vector(rng, m.parameters().size(), 0.8);
    const auto s = random_state(rng, 9, 9);
    const int a = static_cast<int>(uniform_index(rng, kNumActions));
    const double h = uniform_real(rng, -1, 1);
    const double w = uniform_real(rng, 0.1, 1.0);
    const auto analytic = m.encoder_gradient(s, a, h, w);
    const auto numeric = testing::finite_difference([&] { return loss(m.forward(s)[a], h, w); },
                                                    m.mutable_encoder().params());
    conv = std::max(conv, testing::max_relative_error(analytic, numeric));
  }
  const bool pass = lin < 1e-4 && head < 1e-4 && conv < 1e-4;
  return {pass, fmt("max relative error over 20 instances: linear %.1e, MLP head %.1e, conv encoder %.1e",
                    lin, head, conv)};
}

// ---- Algorithm 1 accounting ----

std::vector<nlohmann::json> run_logged(const SessionConfig& c, SessionResult* out = nullptr) {
  std::ostringstream log;
  SessionHooks hooks;
  hooks.log = &log;
  auto r = run_session(c, hooks);
  if (out) *out = std::move(r);
  std::istringstream is(log.str());
  return read_log(is);
}

Outcome accounting_check() {
  SessionConfig c;
  c.model.kind = "linear";
  c.learner.eta = 0.05;
  c.learner.buffer_interval_steps = 10;
  c.duration = 10.0;
  c.seed = 1;
  // Dense feedback with short emission delays fills the buffer before step 10.
  c.trainer.oracle.feedback_prob_per_step = 1.0;
  c.trainer.oracle.delay_dist = DelayDistribution::uniform(0.2, 0.3);
  const auto records = run_logged(c);
  const auto acc = account_log(records);
  std::uint64_t first_periodic = 0;
  for (const auto& r : records) {
    if (r.value("type", "") == "update" && r.at("kind") == "periodic") {
      first_periodic = r.at("step").get<std::uint64_t>();
      break;
    }
  }
  const bool pass = acc.steps == 200 && acc.periodic_updates == 20 && first_periodic == 10 &&
                    acc.immediate_updates == acc.credited_feedback && acc.consistent();
  return {pass, fmt("%lld steps: %llu periodic updates (first at step %llu), %llu immediate for %llu "
                    "credited feedback",
                    static_cast<long long>(acc.steps),
                    static_cast<unsigned long long>(acc.periodic_updates),
                    static_cast<unsigned long long>(first_periodic),
                    static_cast<unsigned long long>(acc.immediate_updates),
                    static_cast<unsigned long long>(acc.credited_feedback))};
}

// ---- bandit ----

Observation one_hot(int n, int i) {
  Observation o;
  o.features.assign(n, 0.0);
  o.features[i] = 1.0;
  return o;
}

Outcome bandit_check() {
  // Two-state contextual bandit; each label is H*(s, a), delivered 0.2 s
  // after its experience ends so it is credited to that experience alone.
  const double h_star[2][4] = {{0.5, -1.0, 0.25, 1.0}, {-0.5, 0.75, -0.25, 0.0}};
  constexpr double kRate = 20.0;
  LearnerConfig c;
  c.eta = 0.05;
  c.delay_dist = DelayDistribution::uniform(0.2, 0.25);
  c.rng_seed = 1;
  Learner<LinearPerActionModel> learner(
      LinearPerActionModel(kNumActions, 2, LinearPerActionModel::Features::kEnvFeatures), c);
  Rng env_rng(derive_seed(1, 1));
  bool visited[2][4] = {};
  std::vector<std::pair<double, double>> pending;
  double err = 1.0;
  std::uint64_t reached_at = 0;
  for (std::int64_t k = 0; learner.update_count() < 5000; ++k) {
    const Stamp st{k / kRate, (k + 1) / kRate};
    while (!pending.empty() && pending.front().first <= st.t_start + 1e-12) {
      learner.on_feedback({pending.front().second, pending.front().first, FeedbackSource::kOracle});
      pending.erase(pending.begin());
    }
    learner.periodic_update(k + 1);
    err = 0.0;
    for (int s = 0; s < 2; ++s) {
      const auto q = learner.model().forward(one_hot(2, s));
      for (int a = 0; a < 4; ++a) {
        err = std::max(err, visited[s][a] ? std::abs(q[a] - h_star[s][a]) : 0.0);
      }
    }
    if (err < 0.01 && reached_at == 0 && k > 0) reached_at = learner.update_count();
    if (err >= 0.01) reached_at = 0;
    const int s = static_cast<int>(uniform_index(env_rng, 2));
    const Action a = action_from_index(static_cast<int>(uniform_index(env_rng, 4)));
    visited[s][index_of(a)] = true;
    learner.ingest_experience({one_hot(2, s), a, st, k});
    pending.push_back({st.t_end + 0.2, h_star[s][index_of(a)]});
  }
  int n_visited = 0;
  for (auto& row : visited) for (bool v : row) n_visited += v;
  const bool pass = err < 0.01 && reached_at > 0 && reached_at <= 5000;
  return {pass, fmt("max |H - H*| %.2e over %d visited pairs after 5000 updates (below 0.01 from update %llu on)",
                    err, n_visited, static_cast<unsigned long long>(reached_at))};
}

// ---- autoencoder ----

struct SharedEncoder {
  std::filesystem::path path;
  nn::Network encoder;
  bool ready = false;
};

SharedEncoder g_encoder;

Outcome autoencoder_check() {
  MiniBowl env;
  const auto frames = collect_random_frames(env, 5000, 77);
  PretrainConfig pc;
  pc.encoder.height = env.height();
  pc.encoder.width = env.width();
  pc.seed = 5;
  const auto r = pretrain_autoencoder(frames, pc);
  const double ratio = r.loss_history.back() / r.loss_history.front();

  g_encoder.path = work_dir() / "encoder.params";
  save_param_file(g_encoder.path.string(), encoder_param_file(r.encoder, &r.decoder, pc.encoder, pc.seed));
  g_encoder.encoder = r.encoder;
  g_encoder.ready = true;

  // Frozen: a training session leaves the encoder byte-identical.
  SessionConfig c;
  c.encoder_params_path = g_encoder.path.string();
  c.duration = 60.0;
  c.seed = 2;
  const auto s = run_session(c);
  const auto& after = std::get<DeepRewardModel>(s.model).encoder().params();
  const auto& before = r.encoder.params();
  const bool frozen = after.size() == before.size() &&
                      std::memcmp(after.data(), before.data(), before.size() * sizeof(double)) == 0;
  const bool pass = ratio < 0.10 && frozen && s.credited_feedback > 0;
  return {pass, fmt("5000 frames, %d epochs: MSE %.3f -> %.3f (ratio %.4f); encoder %s after a session "
                    "with %llu credited feedback",
                    pc.epochs, r.loss_history.front(), r.loss_history.back(), ratio,
                    frozen ? "byte-identical" : "CHANGED",
                    static_cast<unsigned long long>(s.credited_feedback))};
}

// ---- learning runs ----

constexpr int kEvalEpisodes = 20;
constexpr std::uint64_t kEvalSeed = 1000;

SessionConfig fifteen_minutes(std::uint64_t seed) {
  SessionConfig c;
  c.duration = 900.0;
  c.seed = seed;
  c.encoder_params_path = g_encoder.path.string();
  return c;
}

double eval_score(const SessionConfig& c) {
  const auto r = run_session(c);
  const auto env = make_environment(c.env);
  return evaluate(r.model, *env, kEvalEpisodes, kEvalSeed).mean_score;
}

Outcome end_to_end_check() {
  if (!g_encoder.ready) return {false, "no pretrained encoder"};
  int good = 0;
  bool beats_linear = true;
  std::string scores;
  for (std::uint64_t seed : {11, 12, 13}) {
    const double deep = eval_score(fifteen_minutes(seed));
    auto lc = fifteen_minutes(seed);
    lc.model.kind = "linear";
    lc.learner.algorithm = Algorithm::kTamer;
    lc.learner.eta = SessionConfig::default_eta("linear");
    const double lin = eval_score(lc);
    good += deep >= 40.0;
    beats_linear = beats_linear && deep > lin;
    scores += fmt("%sseed %llu deep %.1f linear %.1f", scores.empty() ? "" : ", ",
                  static_cast<unsigned long long>(seed), deep, lin);
  }
  return {good >= 2 && beats_linear,
          fmt("%s; %d of 3 seeds reach 40, deep above linear on every seed: %s", scores.c_str(), good,
              beats_linear ? "yes" : "no")};
}

Outcome weighting_check() {
  if (!g_encoder.ready) return {false, "no pretrained encoder"};
  int ok = 0;
  std::string scores;
  for (std::uint64_t seed : {21, 22, 23}) {
    auto c = fifteen_minutes(seed);
    c.trainer.oracle.delay_dist = DelayDistribution::uniform(2.0, 4.0);
    c.learner.delay_dist = DelayDistribution::uniform(0.2, 4.0);
    const double uni = eval_score(c);
    c.learner.delay_dist = DelayDistribution::gamma(2.0, 0.28);
    const double gam = eval_score(c);
    ok += uni >= gam;
    scores += fmt("%sseed %llu uniform %.1f gamma %.1f", scores.empty() ? "" : ", ",
                  static_cast<unsigned long long>(seed), uni, gam);
  }
  return {ok >= 2, fmt("late feedback (2-4 s): %s; uniform >= gamma on %d of 3 seeds", scores.c_str(), ok)};
}

Outcome determinism_check() {
  if (!g_encoder.ready) return {false, "no pretrained encoder"};
  std::string files[2][3];
  for (int k = 0; k < 2; ++k) {
    // Same relative names in separate directories keep the logged paths equal.
    const auto dir = work_dir() / ("det" + std::to_string(k));
    std::filesystem::create_directories(dir);
    const auto cwd = std::filesystem::current_path();
    std::filesystem::current_path(dir);
    auto c = fifteen_minutes(31);
    c.duration = 120.0;
    c.log_path = "run.jsonl";
    c.params_out_path = "run.params";
    c.trace_out_path = "run.trace";
    run_session(c);
    std::filesystem::current_path(cwd);
    files[k][0] = slurp(dir / "run.jsonl");
    files[k][1] = slurp(dir / "run.params");
    files[k][2] = slurp(dir / "run.trace");
  }
  const bool logs = files[0][0] == files[1][0];
  const bool params = files[0][1] == files[1][1];
  const bool traces = files[0][2] == files[1][2];
  const bool pass = logs && params && traces && !files[0][0].empty() && !files[0][1].empty();
  return {pass, fmt("two 2400-step deep runs: log %zu bytes %s, params %zu bytes %s, trace %s",
                    files[0][0].size(), logs ? "identical" : "DIFFER", files[0][1].size(),
                    params ? "identical" : "DIFFER", traces ? "identical" : "DIFFER")};
}

}  // namespace
}  // namespace dtamer

int main() {
  using namespace dtamer;
  const std::vector<Criterion> criteria{
      {"credit assignment", 5.0, credit_check},
      {"gradient fidelity", 60.0, gradient_check},
      {"algorithm 1 accounting", 10.0, accounting_check},
      {"bandit convergence", 30.0, bandit_check},
      {"autoencoder pretraining", 0.0, autoencoder_check},
      {"end-to-end deep tamer", 3 * 900.0, end_to_end_check},
      {"weighting study", 0.0, weighting_check},
      {"determinism", 0.0, determinism_check},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.time_limit_s > 0.0 && secs >= c.time_limit_s) {
      o.pass = false;
      o.detail += fmt(" [over the %.0f s limit]", c.time_limit_s);
    }
    failed += !o.pass;
    std::printf("%s  %-24s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::filesystem::remove_all(work_dir());
  std::printf("%d of %zu criteria pass\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
