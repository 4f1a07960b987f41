#pragma once

// JSONL session log: one record per line, first line is a schema header.

#include <cmath>
#include <cstdint>
#include <deque>
#include <istream>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeptamer/learner.hpp"
#include "deeptamer/types.hpp"

namespace dtamer {

inline constexpr int kLogSchemaVersion = 1;

struct StepRecord {
  std::int64_t step = 0;  // 1-based
  double t = 0.0;
  Action action = Action::kNoAction;
  std::vector<double> q_values;
  double score_delta = 0.0;
  int episode = 0;
  double episode_score = 0.0;

  nlohmann::json to_json() const {
    return {{"type", "step"},       {"step", step},
            {"t", t},               {"action", to_string(action)},
            {"q_values", q_values}, {"score_delta", score_delta},
            {"episode", episode},   {"episode_score", episode_score}};
  }
};

struct FeedbackRecord {
  double t_feedback = 0.0;
  double h = 0.0;
  FeedbackSource source = FeedbackSource::kOracle;
  std::size_t credited_pair_count = 0;
  std::uint64_t group_id = 0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"type", "feedback"},
                        {"t", t_feedback},
                        {"t_feedback", t_feedback},
                        {"h", h},
                        {"source", to_string(source)},
                        {"credited_pair_count", credited_pair_count},
                        {"group_id", group_id}};
    // Feedback with nothing to credit produces no update.
    if (credited_pair_count == 0) j["empty_credit"] = true;
    return j;
  }
};

struct UpdateRecord {
  UpdateOutcome::Kind kind = UpdateOutcome::Kind::kImmediate;
  std::int64_t step = 0;
  double t = 0.0;
  std::size_t batch_size = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;

  nlohmann::json to_json() const {
    return {{"type", "update"},
            {"kind", kind == UpdateOutcome::Kind::kImmediate ? "immediate" : "periodic"},
            {"step", step},
            {"t", t},
            {"batch_size", batch_size},
            {"loss_before", loss_before},
            {"loss_after", loss_after}};
  }
};

struct EpisodeRecord {
  int episode = 0;
  double t = 0.0;
  double score = 0.0;
  std::int64_t steps = 0;

  nlohmann::json to_json() const {
    return {{"type", "episode"}, {"episode", episode}, {"t", t}, {"score", score}, {"steps", steps}};
  }
};

// Buffered writer; flush() is called once per environment step.
class LogWriter {
 public:
  explicit LogWriter(std::ostream* os) : os_(os) {}

  bool enabled() const { return os_ != nullptr; }

  void header(const nlohmann::json& config) {
    write({{"type", "header"}, {"schema", kLogSchemaVersion}, {"config", config}});
  }

  void write(const nlohmann::json& record) {
    if (!os_) return;
    *os_ << record.dump() << '\n';
  }

  void flush() {
    if (os_) os_->flush();
  }

 private:
  std::ostream* os_;
};

inline std::vector<nlohmann::json> read_log(std::istream& is) {
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty() || out.front().value("type", "") != "header") {
    throw std::invalid_argument("log has no header record");
  }
  if (out.front().value("schema", 0) != kLogSchemaVersion) {
    throw std::invalid_argument("unsupported log schema " + out.front().value("schema", nlohmann::json()).dump());
  }
  return out;
}

// Counts recovered from a log, and the counts the update rule predicts.
struct LogAccounting {
  std::int64_t steps = 0;
  std::uint64_t feedback = 0;
  std::uint64_t credited_feedback = 0;
  std::uint64_t empty_feedback = 0;
  std::uint64_t immediate_updates = 0;
  std::uint64_t periodic_updates = 0;
  std::uint64_t expected_periodic = 0;
  std::uint64_t episodes = 0;
  bool time_ordered = true;

  bool consistent() const {
    return immediate_updates == credited_feedback && periodic_updates == expected_periodic &&
           credited_feedback + empty_feedback == feedback && time_ordered;
  }
};

// A periodic update is expected at every step that is a multiple of b once
// some feedback has been credited.
inline LogAccounting account_log(const std::vector<nlohmann::json>& records) {
  LogAccounting a;
  const auto& cfg = records.at(0).at("config");
  const auto& lcfg = cfg.at("learner");
  const int b = lcfg.value("buffer_interval_steps", 10);
  const bool replays = lcfg.value("algorithm", std::string("deep-tamer")) == "deep-tamer";
  bool buffer_nonempty = false;
  double last_t = -INFINITY;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string type = r.value("type", "");
    if (r.contains("t")) {
      const double t = r.at("t").get<double>();
      if (t < last_t) a.time_ordered = false;
      last_t = t;
    }
    if (type == "step") {
      ++a.steps;
      // Step i's feedback is logged before its step record.
      const auto step = r.at("step").get<std::int64_t>();
      if (replays && buffer_nonempty && step % b == 0) ++a.expected_periodic;
    } else if (type == "feedback") {
      ++a.feedback;
      if (r.at("credited_pair_count").get<std::size_t>() > 0) {
        ++a.credited_feedback;
        buffer_nonempty = true;
      } else {
        ++a.empty_feedback;
      }
    } else if (type == "update") {
      if (r.at("kind") == "immediate") {
        ++a.immediate_updates;
      } else {
        ++a.periodic_updates;
      }
    } else if (type == "episode") {
      ++a.episodes;
    }
  }
  return a;
}

// Trailing mean of episode scores against the time each episode ended.
struct ScorePoint {
  double t_seconds;
  double mean_episode_score;
};

inline std::vector<ScorePoint> score_series(const std::vector<nlohmann::json>& records,
                                            std::size_t window = 5) {
  if (window == 0) throw std::invalid_argument("score window must be positive");
  std::vector<ScorePoint> out;
  std::deque<double> recent;
  double sum = 0.0;
  for (const auto& r : records) {
    if (r.value("type", "") != "episode") continue;
    const double s = r.at("score").get<double>();
    recent.push_back(s);
    sum += s;
    if (recent.size() > window) {
      sum -= recent.front();
      recent.pop_front();
    }
    out.push_back({r.at("t").get<double>(), sum / static_cast<double>(recent.size())});
  }
  return out;
}

inline void write_score_csv(std::ostream& os, const std::vector<ScorePoint>& series) {
  os << "t_seconds,mean_episode_score\n";
  for (const auto& p : series) {
    os << nlohmann::json(p.t_seconds).dump() << ',' << nlohmann::json(p.mean_episode_score).dump()
       << '\n';
  }
}

}  // namespace dtamer
