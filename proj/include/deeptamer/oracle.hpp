#pragma once

// Scripted trainer. Judges single experiences against the environment's
// optimal policy and delivers +/-1 after a delay drawn from a delay
// distribution.

#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeptamer/credit.hpp"
#include "deeptamer/learner.hpp"
#include "deeptamer/random.hpp"

namespace dtamer {

struct OracleConfig {
  double feedback_prob_per_step = 0.04;
  DelayDistribution delay_dist = DelayDistribution::uniform_default();
  double h_good = 1.0;
  double h_bad = -1.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(feedback_prob_per_step >= 0.0 && feedback_prob_per_step <= 1.0)) {
      throw std::invalid_argument("oracle: feedback_prob_per_step must lie in [0, 1]");
    }
    if (!std::isfinite(h_good) || !std::isfinite(h_bad)) {
      throw std::invalid_argument("oracle: feedback values must be finite");
    }
  }

  nlohmann::json to_json() const {
    return {{"feedback_prob_per_step", feedback_prob_per_step},
            {"delay_dist", delay_dist.to_json()},
            {"h_good", h_good},
            {"h_bad", h_bad},
            {"rng_seed", rng_seed}};
  }

  static OracleConfig from_json(const nlohmann::json& j) {
    OracleConfig c;
    c.feedback_prob_per_step = j.value("feedback_prob_per_step", c.feedback_prob_per_step);
    if (j.contains("delay_dist")) c.delay_dist = DelayDistribution::from_json(j.at("delay_dist"));
    c.h_good = j.value("h_good", c.h_good);
    c.h_bad = j.value("h_bad", c.h_bad);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.validate();
    return c;
  }
};

struct ScheduledFeedback {
  Feedback feedback;
  std::int64_t step_index = 0;  // experience that triggered it
  double delay = 0.0;

  nlohmann::json to_json() const {
    return {{"step_index", step_index},
            {"h", feedback.value},
            {"t_feedback", feedback.t_feedback},
            {"delay", delay}};
  }

  static ScheduledFeedback from_json(const nlohmann::json& j) {
    ScheduledFeedback s;
    s.step_index = j.value("step_index", std::int64_t{-1});
    s.feedback.value = j.at("h").get<double>();
    s.feedback.t_feedback = j.at("t_feedback").get<double>();
    s.feedback.source = FeedbackSource::kOracle;
    s.delay = j.value("delay", 0.0);
    return s;
  }
};

// Due-time ordered pending feedback; equal times keep insertion order.
class FeedbackSchedule {
 public:
  void push(ScheduledFeedback f) { heap_.push({f.feedback.t_feedback, seq_++, std::move(f)}); }

  std::vector<ScheduledFeedback> poll(double now) {
    std::vector<ScheduledFeedback> due;
    while (!heap_.empty() && heap_.top().time <= now) {
      due.push_back(heap_.top().item);
      heap_.pop();
    }
    return due;
  }

  std::size_t pending() const { return heap_.size(); }

 private:
  struct Slot {
    double time;
    std::uint64_t seq;
    ScheduledFeedback item;
    bool operator>(const Slot& o) const { return time != o.time ? time > o.time : seq > o.seq; }
  };
  std::priority_queue<Slot, std::vector<Slot>, std::greater<>> heap_;
  std::uint64_t seq_ = 0;
};

class Oracle {
 public:
  explicit Oracle(OracleConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.rng_seed) { cfg_.validate(); }

  const OracleConfig& config() const { return cfg_; }

  // `optimal` is the optimal policy's action in x.state.
  std::optional<ScheduledFeedback> observe(const Experience& x, Action optimal) {
    if (x.step_index <= last_step_) throw std::invalid_argument("oracle: experiences out of order");
    last_step_ = x.step_index;
    if (!bernoulli(rng_, cfg_.feedback_prob_per_step)) return std::nullopt;
    ScheduledFeedback s;
    s.step_index = x.step_index;
    s.delay = cfg_.delay_dist.quantile(uniform01(rng_));
    s.feedback.value = x.action == optimal ? cfg_.h_good : cfg_.h_bad;
    s.feedback.t_feedback = x.stamp.t_end + s.delay;
    s.feedback.source = FeedbackSource::kOracle;
    schedule_.push(s);
    trace_.push_back(s);
    return s;
  }

  std::vector<Feedback> poll(double now) {
    std::vector<Feedback> out;
    for (auto& s : schedule_.poll(now)) out.push_back(s.feedback);
    return out;
  }

  std::size_t pending() const { return schedule_.pending(); }
  const std::vector<ScheduledFeedback>& trace() const { return trace_; }

 private:
  OracleConfig cfg_;
  Rng rng_;
  FeedbackSchedule schedule_;
  std::vector<ScheduledFeedback> trace_;
  std::int64_t last_step_ = -1;
};

// Replays a recorded trace regardless of what the learner does.
class ScriptedTrainer {
 public:
  explicit ScriptedTrainer(const std::vector<ScheduledFeedback>& trace) {
    for (const auto& s : trace) {
      if (!std::isfinite(s.feedback.value) || !std::isfinite(s.feedback.t_feedback)) {
        throw std::invalid_argument("trace holds non-finite feedback");
      }
      schedule_.push(s);
    }
  }

  std::vector<Feedback> poll(double now) {
    std::vector<Feedback> out;
    for (auto& s : schedule_.poll(now)) out.push_back(s.feedback);
    return out;
  }

  std::size_t pending() const { return schedule_.pending(); }

 private:
  FeedbackSchedule schedule_;
};

inline void write_trace(std::ostream& os, const std::vector<ScheduledFeedback>& trace) {
  for (const auto& s : trace) os << s.to_json().dump() << '\n';
}

inline std::vector<ScheduledFeedback> read_trace(std::istream& is) {
  std::vector<ScheduledFeedback> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(ScheduledFeedback::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dtamer
