#pragma once

// Deterministic desk-scale environments with a pixel frame-stack state and
// the four actions {noop, up, down, bowl}.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeptamer/random.hpp"
#include "deeptamer/types.hpp"

namespace dtamer {

struct StepResult {
  Observation observation;
  double score_delta = 0.0;
  bool episode_done = false;
  std::map<std::string, double> info;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::string name() const = 0;
  virtual Observation reset(std::uint64_t seed) = 0;
  virtual StepResult step(Action action) = 0;
  // An action that attains the best achievable episode score from the
  // current state.
  virtual Action optimal_action() const = 0;
  virtual bool done() const = 0;
  virtual double episode_score() const = 0;
  virtual Observation observation() const = 0;
  virtual int height() const = 0;
  virtual int width() const = 0;
  virtual int feature_dim() const { return 0; }
  virtual double max_episode_score() const = 0;
  int num_actions() const { return kNumActions; }
};

class EpisodeFinished : public std::logic_error {
 public:
  EpisodeFinished() : std::logic_error("step called on a finished episode") {}
};

// Pixel intensities are multiples of 1/255 so 8-bit wire encoding is lossless.
inline constexpr double kBright = 1.0;
inline constexpr double kPinShade = 128.0 / 255.0;

// Bowling-like lane. AIM: the avatar moves up and down at the left edge,
// Bowl releases the ball. ROLL: the ball advances one column per step; the
// first up/down during the roll sets a spin that drifts the ball one row
// every `spin_period` steps. At the pin column the ball knocks down
// max(0, 10 - 2*|row - pin_center_row|) pins.
struct MiniBowlConfig {
  int frame_size = 32;
  int balls_per_episode = 5;
  int lane_top = 2;
  int lane_bottom = 28;
  int avatar_col = 1;
  int start_row = 12;
  int pin_col = 28;
  int pin_center_row = 15;
  int spin_period = 3;
  int aim_timeout_steps = 60;  // auto-release when the agent never bowls

  int release_col() const { return avatar_col + 2; }

  void validate() const {
    if (frame_size < 8) throw std::invalid_argument("minibowl: frame_size too small");
    if (balls_per_episode < 1) throw std::invalid_argument("minibowl: balls_per_episode < 1");
    if (lane_top < 1 || lane_bottom + 2 >= frame_size || lane_top > lane_bottom) {
      throw std::invalid_argument("minibowl: lane rows must fit inside the frame");
    }
    if (start_row < lane_top || start_row > lane_bottom || pin_center_row < lane_top ||
        pin_center_row > lane_bottom) {
      throw std::invalid_argument("minibowl: start/pin rows must lie in the lane");
    }
    if (pin_col <= release_col() || pin_col + 2 >= frame_size) {
      throw std::invalid_argument("minibowl: pin column must lie right of the release column");
    }
    if (spin_period < 1 || aim_timeout_steps < 1) throw std::invalid_argument("minibowl: periods");
  }

  nlohmann::json to_json() const {
    return {{"kind", "minibowl"},
            {"frame_size", frame_size},
            {"balls_per_episode", balls_per_episode},
            {"lane_top", lane_top},
            {"lane_bottom", lane_bottom},
            {"avatar_col", avatar_col},
            {"start_row", start_row},
            {"pin_col", pin_col},
            {"pin_center_row", pin_center_row},
            {"spin_period", spin_period},
            {"aim_timeout_steps", aim_timeout_steps}};
  }

  static MiniBowlConfig from_json(const nlohmann::json& j) {
    MiniBowlConfig c;
    c.frame_size = j.value("frame_size", c.frame_size);
    c.balls_per_episode = j.value("balls_per_episode", c.balls_per_episode);
    c.lane_top = j.value("lane_top", c.lane_top);
    c.lane_bottom = j.value("lane_bottom", c.lane_bottom);
    c.avatar_col = j.value("avatar_col", c.avatar_col);
    c.start_row = j.value("start_row", c.start_row);
    c.pin_col = j.value("pin_col", c.pin_col);
    c.pin_center_row = j.value("pin_center_row", c.pin_center_row);
    c.spin_period = j.value("spin_period", c.spin_period);
    c.aim_timeout_steps = j.value("aim_timeout_steps", c.aim_timeout_steps);
    c.validate();
    return c;
  }
};

class MiniBowl final : public Environment {
 public:
  enum class Phase { kAim, kRoll };

  struct State {
    Phase phase = Phase::kAim;
    int avatar_row = 0;
    int aim_steps = 0;
    int ball_row = 0;
    int ball_col = 0;
    int spin = 0;
    int spin_count = 0;
    int balls_done = 0;
    double score = 0.0;
    bool done = false;
    friend bool operator==(const State&, const State&) = default;
  };

  explicit MiniBowl(MiniBowlConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    reset(0);
  }

  std::string name() const override { return "minibowl"; }
  const MiniBowlConfig& config() const { return cfg_; }
  const State& state() const { return state_; }

  Observation reset(std::uint64_t /*seed*/) override {
    state_ = State{};
    state_.avatar_row = cfg_.start_row;
    frame_ = render(state_);
    prev_frame_ = frame_;
    return observation();
  }

  StepResult step(Action action) override {
    if (state_.done) throw EpisodeFinished();
    const auto [next, pins, resolved] = transition(state_, action);
    state_ = next;
    StepResult r;
    if (resolved) {
      r.score_delta = pins;
      state_.score += pins;
      state_.balls_done += 1;
      r.info["pins"] = pins;
      if (state_.balls_done >= cfg_.balls_per_episode) state_.done = true;
    }
    prev_frame_ = frame_;
    frame_ = render(state_);
    r.observation = observation();
    r.episode_done = state_.done;
    r.info["balls_done"] = state_.balls_done;
    r.info["phase"] = state_.phase == Phase::kAim ? 0.0 : 1.0;
    return r;
  }

  Action optimal_action() const override { return optimal_action(state_); }

  // Exhaustive search over the current ball (later balls restart from the
  // same initial state, so they do not change the comparison). Ranks actions
  // by pins knocked, then by whether spin is needed (a straight roll from the
  // right row beats a corrected one), then by fewest steps to resolution,
  // then by lowest action index.
  Action optimal_action(const State& s) const {
    Action best = Action::kNoAction;
    Value best_v{-1, 0, 0};
    for (Action a : kAllActions) {
      const Value v = action_value(s, a);
      if (better(v, best_v)) {
        best_v = v;
        best = a;
      }
    }
    return best;
  }

  bool done() const override { return state_.done; }
  double episode_score() const override { return state_.score; }
  int height() const override { return cfg_.frame_size; }
  int width() const override { return cfg_.frame_size; }
  double max_episode_score() const override { return 10.0 * cfg_.balls_per_episode; }

  Observation observation() const override {
    Observation o;
    o.height = cfg_.frame_size;
    o.width = cfg_.frame_size;
    o.pixels.reserve(prev_frame_.size() * 2);
    o.pixels.insert(o.pixels.end(), prev_frame_.begin(), prev_frame_.end());
    o.pixels.insert(o.pixels.end(), frame_.begin(), frame_.end());
    return o;
  }

  std::vector<double> render(const State& s) const {
    const int n = cfg_.frame_size;
    std::vector<double> f(static_cast<std::size_t>(n) * n, 0.0);
    auto put = [&](int r, int c, double v) {
      if (r >= 0 && r < n && c >= 0 && c < n) f[static_cast<std::size_t>(r) * n + c] = v;
    };
    for (int r = cfg_.pin_center_row - 3; r <= cfg_.pin_center_row + 3; ++r) {
      put(r, cfg_.pin_col + 1, kPinShade);
      put(r, cfg_.pin_col + 2, kPinShade);
    }
    for (int dr = -1; dr <= 1; ++dr) {
      put(s.avatar_row + dr, cfg_.avatar_col, kBright);
      put(s.avatar_row + dr, cfg_.avatar_col + 1, kBright);
    }
    const int br = s.phase == Phase::kAim ? s.avatar_row : s.ball_row;
    const int bc = s.phase == Phase::kAim ? cfg_.release_col() : s.ball_col;
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = 0; dc <= 2; ++dc) put(br + dr, bc + dc, kBright);
    }
    if (s.spin != 0) {
      const int c0 = s.spin < 0 ? 0 : 2;
      put(0, c0, kBright);
      put(0, c0 + 1, kBright);
    }
    return f;
  }

  struct Transition {
    State next;
    double pins = 0.0;
    bool resolved = false;
  };

  // Dynamics of one step, ignoring episode bookkeeping.
  Transition transition(State s, Action a) const {
    if (s.phase == Phase::kAim) {
      s.aim_steps += 1;
      if (a == Action::kUp) s.avatar_row = std::max(cfg_.lane_top, s.avatar_row - 1);
      if (a == Action::kDown) s.avatar_row = std::min(cfg_.lane_bottom, s.avatar_row + 1);
      if (a == Action::kBowl || s.aim_steps >= cfg_.aim_timeout_steps) {
        s.phase = Phase::kRoll;
        s.ball_row = s.avatar_row;
        s.ball_col = cfg_.release_col();
        s.spin = 0;
        s.spin_count = 0;
      }
      return {s, 0.0, false};
    }
    if (s.spin == 0 && (a == Action::kUp || a == Action::kDown)) {
      s.spin = a == Action::kUp ? -1 : 1;
      s.spin_count = 0;
    }
    s.ball_col += 1;
    if (s.spin != 0) {
      s.spin_count += 1;
      if (s.spin_count % cfg_.spin_period == 0) {
        s.ball_row = std::clamp(s.ball_row + s.spin, cfg_.lane_top, cfg_.lane_bottom);
      }
    }
    if (s.ball_col >= cfg_.pin_col) {
      const double pins = std::max(0, 10 - 2 * std::abs(s.ball_row - cfg_.pin_center_row));
      State reset_state;
      reset_state.avatar_row = cfg_.start_row;
      reset_state.balls_done = s.balls_done;
      reset_state.score = s.score;
      return {reset_state, pins, true};
    }
    return {s, 0.0, false};
  }

 private:
  struct Value {
    int pins;
    int spins;
    int steps;
  };

  static bool better(const Value& a, const Value& b) {
    if (a.pins != b.pins) return a.pins > b.pins;
    if (a.spins != b.spins) return a.spins < b.spins;
    return a.steps < b.steps;
  }

  Value action_value(const State& s, Action a) const {
    const int spun = s.phase == Phase::kRoll && s.spin == 0 &&
                     (a == Action::kUp || a == Action::kDown);
    const auto t = transition(s, a);
    if (t.resolved) return {static_cast<int>(t.pins), spun, 1};
    const Value v = state_value(t.next);
    return {v.pins, v.spins + spun, v.steps + 1};
  }

  Value state_value(const State& s) const {
    const std::uint64_t key = pack(s);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    Value best{-1, 0, 0};
    for (Action a : kAllActions) {
      const Value v = action_value(s, a);
      if (better(v, best)) best = v;
    }
    memo_.emplace(key, best);
    return best;
  }

  std::uint64_t pack(const State& s) const {
    if (s.phase == Phase::kAim) {
      return (static_cast<std::uint64_t>(s.avatar_row) << 16) |
             static_cast<std::uint64_t>(s.aim_steps);
    }
    return (std::uint64_t{1} << 62) | (static_cast<std::uint64_t>(s.ball_row) << 32) |
           (static_cast<std::uint64_t>(s.ball_col) << 16) |
           (static_cast<std::uint64_t>(s.spin + 1) << 8) |
           static_cast<std::uint64_t>(s.spin == 0 ? 0 : s.spin_count % cfg_.spin_period);
  }

  MiniBowlConfig cfg_;
  State state_;
  std::vector<double> frame_;
  std::vector<double> prev_frame_;
  mutable std::unordered_map<std::uint64_t, Value> memo_;
};

// One-dimensional corridor of n cells. Up/Down move, Bowl ends the episode
// with score n - |position - goal|. Exposes a one-hot feature vector in
// addition to a 1 x n frame.
struct LineWorldConfig {
  int size = 8;
  int goal = 5;
  int max_steps = 50;

  void validate() const {
    if (size < 2 || goal < 0 || goal >= size || max_steps < 1) {
      throw std::invalid_argument("lineworld: invalid configuration");
    }
  }
  nlohmann::json to_json() const {
    return {{"kind", "lineworld"}, {"size", size}, {"goal", goal}, {"max_steps", max_steps}};
  }
  static LineWorldConfig from_json(const nlohmann::json& j) {
    LineWorldConfig c;
    c.size = j.value("size", c.size);
    c.goal = j.value("goal", c.goal);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.validate();
    return c;
  }
};

class LineWorld final : public Environment {
 public:
  explicit LineWorld(LineWorldConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    reset(0);
  }

  std::string name() const override { return "lineworld"; }
  int position() const { return pos_; }

  Observation reset(std::uint64_t seed) override {
    Rng rng(seed);
    pos_ = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cfg_.size)));
    steps_ = 0;
    score_ = 0.0;
    done_ = false;
    frame_ = render();
    prev_frame_ = frame_;
    return observation();
  }

  StepResult step(Action a) override {
    if (done_) throw EpisodeFinished();
    StepResult r;
    steps_ += 1;
    if (a == Action::kUp) pos_ = std::max(0, pos_ - 1);
    if (a == Action::kDown) pos_ = std::min(cfg_.size - 1, pos_ + 1);
    if (a == Action::kBowl) {
      r.score_delta = cfg_.size - std::abs(pos_ - cfg_.goal);
      score_ = r.score_delta;
      done_ = true;
    } else if (steps_ >= cfg_.max_steps) {
      done_ = true;
    }
    prev_frame_ = frame_;
    frame_ = render();
    r.observation = observation();
    r.episode_done = done_;
    r.info["position"] = pos_;
    return r;
  }

  Action optimal_action() const override {
    if (pos_ > cfg_.goal) return Action::kUp;
    if (pos_ < cfg_.goal) return Action::kDown;
    return Action::kBowl;
  }

  bool done() const override { return done_; }
  double episode_score() const override { return score_; }
  int height() const override { return 1; }
  int width() const override { return cfg_.size; }
  int feature_dim() const override { return cfg_.size; }
  double max_episode_score() const override { return cfg_.size; }

  Observation observation() const override {
    Observation o;
    o.height = 1;
    o.width = cfg_.size;
    o.pixels = prev_frame_;
    o.pixels.insert(o.pixels.end(), frame_.begin(), frame_.end());
    o.features.assign(cfg_.size, 0.0);
    o.features[pos_] = 1.0;
    return o;
  }

 private:
  std::vector<double> render() const {
    std::vector<double> f(cfg_.size, 0.0);
    f[cfg_.goal] = kPinShade;
    f[pos_] = kBright;
    return f;
  }

  LineWorldConfig cfg_;
  int pos_ = 0;
  int steps_ = 0;
  double score_ = 0.0;
  bool done_ = false;
  std::vector<double> frame_;
  std::vector<double> prev_frame_;
};

inline std::unique_ptr<Environment> make_environment(const nlohmann::json& j) {
  const std::string kind = j.value("kind", "minibowl");
  if (kind == "minibowl") return std::make_unique<MiniBowl>(MiniBowlConfig::from_json(j));
  if (kind == "lineworld") return std::make_unique<LineWorld>(LineWorldConfig::from_json(j));
  throw std::invalid_argument("unknown environment kind: " + kind);
}

// 8-bit quantization used on the wire.
inline std::vector<std::uint8_t> quantize_frame(const double* frame, std::size_t n) {
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(frame[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

inline std::vector<double> dequantize_frame(const std::vector<std::uint8_t>& bytes) {
  std::vector<double> out(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = bytes[i] / 255.0;
  return out;
}

}  // namespace dtamer
