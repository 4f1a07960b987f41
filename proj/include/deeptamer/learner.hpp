#pragma once

// Interactive learner: greedy action selection on H, importance-weighted SGD
// on every feedback event, and fixed-interval replays from the feedback
// buffer. Also hosts the original TAMER window update used as a baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeptamer/credit.hpp"
#include "deeptamer/model.hpp"
#include "deeptamer/random.hpp"
#include "deeptamer/types.hpp"

namespace dtamer {

struct Experience {
  Observation state;
  Action action = Action::kNoAction;
  Stamp stamp;
  std::int64_t step_index = 0;
};

enum class FeedbackSource { kHuman, kOracle };

inline const char* to_string(FeedbackSource s) {
  return s == FeedbackSource::kHuman ? "human" : "oracle";
}

struct Feedback {
  double value = 0.0;
  double t_feedback = 0.0;
  FeedbackSource source = FeedbackSource::kOracle;
};

// What the learner keeps of an experience once it has been embedded.
struct EmbeddedExperience {
  Embedding embedding;
  Action action = Action::kNoAction;
  Stamp stamp;
  std::int64_t step_index = 0;
};

using ExperienceRef = std::shared_ptr<const EmbeddedExperience>;

// Recent experiences, covering `horizon` seconds back from the newest end
// time.
class ExperienceWindow {
 public:
  explicit ExperienceWindow(double horizon) : horizon_(horizon) {
    if (!(horizon > 0.0)) throw std::invalid_argument("experience horizon must be positive");
  }

  void ingest(ExperienceRef x) {
    if (!items_.empty()) {
      const auto& last = *items_.back();
      if (x->step_index <= last.step_index) {
        throw std::invalid_argument("experience step indices must increase");
      }
      if (x->stamp.t_start < last.stamp.t_end - kSlack) {
        throw std::invalid_argument("experience stamps must be monotone");
      }
    }
    if (!(x->stamp.t_end > x->stamp.t_start)) {
      throw std::invalid_argument("experience must have t_end > t_start");
    }
    const double now = x->stamp.t_end;
    items_.push_back(std::move(x));
    while (!items_.empty() && items_.front()->stamp.t_start < now - horizon_ - kSlack) {
      items_.pop_front();
    }
  }

  const std::deque<ExperienceRef>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  double horizon() const { return horizon_; }

 private:
  static constexpr double kSlack = 1e-9;
  double horizon_;
  std::deque<ExperienceRef> items_;
};

struct ReplayEntry {
  ExperienceRef experience;
  double h = 0.0;
  double weight = 0.0;
  std::uint64_t feedback_id = 0;
};

// Every (experience, feedback) pair that received nonzero credit, grouped by
// feedback. Unbounded.
class ReplayBuffer {
 public:
  struct Group {
    std::uint64_t feedback_id;
    std::size_t begin;
    std::size_t count;
  };

  void add_group(std::uint64_t feedback_id, std::vector<ReplayEntry> entries) {
    if (entries.empty()) throw std::invalid_argument("replay group must be nonempty");
    const std::size_t begin = entries_.size();
    for (auto& e : entries) {
      if (!(e.weight > 0.0)) throw std::invalid_argument("replay entries need positive weight");
      entries_.push_back(std::move(e));
    }
    groups_.push_back({feedback_id, begin, entries_.size() - begin});
  }

  bool empty() const { return groups_.empty(); }
  std::size_t num_groups() const { return groups_.size(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<ReplayEntry>& entries() const { return entries_; }
  const Group& group(std::size_t i) const { return groups_.at(i); }
  std::span<const ReplayEntry> group_entries(std::size_t i) const {
    const auto& g = groups_.at(i);
    return std::span<const ReplayEntry>(entries_).subspan(g.begin, g.count);
  }

 private:
  std::vector<ReplayEntry> entries_;
  std::vector<Group> groups_;
};

enum class TieBreak { kSeededRandom, kLowestIndex };
enum class Algorithm { kDeepTamer, kTamer };

inline const char* to_string(Algorithm a) { return a == Algorithm::kTamer ? "tamer" : "deep-tamer"; }

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "deep-tamer") return Algorithm::kDeepTamer;
  if (s == "tamer") return Algorithm::kTamer;
  throw std::invalid_argument("unknown algorithm: " + s);
}

struct LearnerConfig {
  Algorithm algorithm = Algorithm::kDeepTamer;
  double eta = 1e-3;
  int buffer_interval_steps = 10;
  int minibatch_feedback_count = 16;
  DelayDistribution delay_dist = DelayDistribution::uniform_default();
  // Seconds of experience kept for crediting; 0 selects the delay support
  // plus two steps.
  double experience_horizon = 0.0;
  // Tail mass ignored when the delay density has unbounded support.
  double support_epsilon = 1e-3;
  // Credit below this is treated as zero (absorbs rounding at support edges).
  double min_weight = 1e-9;
  TieBreak tie_break = TieBreak::kSeededRandom;
  std::uint64_t rng_seed = 0;

  double horizon_for(double step_seconds) const {
    const double dmax = delay_dist.support_window(support_epsilon).second;
    return experience_horizon > 0.0 ? experience_horizon : dmax + 2.0 * step_seconds;
  }

  void validate(double step_seconds) const {
    if (!(eta > 0.0)) throw std::invalid_argument("learner: eta must be positive");
    if (buffer_interval_steps < 1) throw std::invalid_argument("learner: b must be >= 1");
    if (minibatch_feedback_count < 1) throw std::invalid_argument("learner: minibatch size");
    const double dmax = delay_dist.support_window(support_epsilon).second;
    if (horizon_for(step_seconds) < dmax) {
      throw std::invalid_argument("learner: experience_horizon shorter than the delay support");
    }
  }

  nlohmann::json to_json() const {
    return {{"algorithm", to_string(algorithm)},
            {"eta", eta},
            {"buffer_interval_steps", buffer_interval_steps},
            {"minibatch_feedback_count", minibatch_feedback_count},
            {"delay_dist", delay_dist.to_json()},
            {"experience_horizon", experience_horizon},
            {"support_epsilon", support_epsilon},
            {"min_weight", min_weight},
            {"tie_break", tie_break == TieBreak::kLowestIndex ? "lowest-index" : "seeded-random"},
            {"rng_seed", rng_seed}};
  }

  static LearnerConfig from_json(const nlohmann::json& j) { return from_json(j, LearnerConfig()); }

  static LearnerConfig from_json(const nlohmann::json& j, LearnerConfig c) {
    if (j.contains("algorithm")) c.algorithm = algorithm_from_string(j.at("algorithm"));
    c.eta = j.value("eta", c.eta);
    c.buffer_interval_steps = j.value("buffer_interval_steps", c.buffer_interval_steps);
    c.minibatch_feedback_count = j.value("minibatch_feedback_count", c.minibatch_feedback_count);
    if (j.contains("delay_dist")) c.delay_dist = DelayDistribution::from_json(j.at("delay_dist"));
    c.experience_horizon = j.value("experience_horizon", c.experience_horizon);
    c.support_epsilon = j.value("support_epsilon", c.support_epsilon);
    c.min_weight = j.value("min_weight", c.min_weight);
    if (j.contains("tie_break")) {
      const std::string t = j.at("tie_break");
      if (t == "lowest-index") c.tie_break = TieBreak::kLowestIndex;
      else if (t == "seeded-random") c.tie_break = TieBreak::kSeededRandom;
      else throw std::invalid_argument("unknown tie_break: " + t);
    }
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    return c;
  }
};

// Argmax over action values with the configured tie-break.
inline Action select_action(std::span<const double> q, TieBreak tie_break, Rng& rng) {
  if (q.empty()) throw std::invalid_argument("select_action: no action values");
  const double best = *std::max_element(q.begin(), q.end());
  if (tie_break == TieBreak::kLowestIndex) {
    return action_from_index(static_cast<int>(std::find(q.begin(), q.end(), best) - q.begin()));
  }
  int ties[kNumActions];
  int n = 0;
  for (int a = 0; a < static_cast<int>(q.size()); ++a) {
    if (q[a] == best) ties[n++] = a;
  }
  if (n == 1) return action_from_index(ties[0]);
  return action_from_index(ties[uniform_index(rng, static_cast<std::uint64_t>(n))]);
}

struct UpdateOutcome {
  enum class Kind { kImmediate, kPeriodic };
  Kind kind = Kind::kImmediate;
  bool applied = false;
  std::size_t batch_size = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::optional<std::string> error;
};

struct FeedbackOutcome {
  std::uint64_t feedback_id = 0;
  std::size_t credited_pairs = 0;
  UpdateOutcome update;
};

template <RewardModel Model>
class Learner {
 public:
  Learner(Model model, LearnerConfig cfg, double step_seconds = 0.05)
      : model_(std::move(model)),
        cfg_(std::move(cfg)),
        window_(cfg_.horizon_for(step_seconds)),
        rng_(cfg_.rng_seed) {
    cfg_.validate(step_seconds);
    if constexpr (!std::is_same_v<Model, LinearPerActionModel>) {
      if (cfg_.algorithm == Algorithm::kTamer) {
        throw std::invalid_argument("the TAMER baseline requires a linear model");
      }
    }
  }

  const Model& model() const { return model_; }
  Model& mutable_model() { return model_; }
  const LearnerConfig& config() const { return cfg_; }
  const ExperienceWindow& window() const { return window_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  std::uint64_t update_count() const { return update_count_; }
  std::uint64_t feedback_count() const { return next_feedback_id_; }

  std::vector<double> action_values(const Observation& s) const { return model_.forward(s); }

  Action select(std::span<const double> q) { return select_action(q, cfg_.tie_break, rng_); }

  void ingest_experience(const Experience& x) {
    auto e = std::make_shared<EmbeddedExperience>();
    e->embedding = model_.embed(x.state);
    e->action = x.action;
    e->stamp = x.stamp;
    e->step_index = x.step_index;
    window_.ingest(std::move(e));
  }

  // Same as ingest_experience when the embedding is already known.
  void ingest_embedded(Embedding embedding, Action action, Stamp stamp, std::int64_t step_index) {
    auto e = std::make_shared<EmbeddedExperience>();
    e->embedding = std::move(embedding);
    e->action = action;
    e->stamp = stamp;
    e->step_index = step_index;
    window_.ingest(std::move(e));
  }

  // Credits y to the window and applies one update immediately.
  FeedbackOutcome on_feedback(const Feedback& y) {
    if (!std::isfinite(y.value)) throw std::invalid_argument("feedback value must be finite");
    if (y.t_feedback < last_feedback_time_) {
      throw std::invalid_argument("feedback times must be nondecreasing");
    }
    last_feedback_time_ = y.t_feedback;

    FeedbackOutcome out;
    out.feedback_id = next_feedback_id_++;
    out.update.kind = UpdateOutcome::Kind::kImmediate;

    std::vector<ReplayEntry> credited;
    for (const auto& x : window_.items()) {
      const double w = weight(x->stamp, y.t_feedback, cfg_.delay_dist);
      if (w > cfg_.min_weight) credited.push_back({x, y.value, w, out.feedback_id});
    }
    out.credited_pairs = credited.size();
    if (credited.empty()) return out;

    if (cfg_.algorithm == Algorithm::kTamer) {
      if constexpr (std::is_same_v<Model, LinearPerActionModel>) {
        out.update = tamer_update(credited, y.value);
      }
      return out;
    }

    const auto batch = to_samples(credited);
    out.update = apply_sgd(batch, UpdateOutcome::Kind::kImmediate);
    buffer_.add_group(out.feedback_id, std::move(credited));
    return out;
  }

  // Replay update every b steps once the buffer holds anything.
  std::optional<UpdateOutcome> periodic_update(std::int64_t step_index) {
    if (cfg_.algorithm != Algorithm::kDeepTamer) return std::nullopt;
    if (step_index % cfg_.buffer_interval_steps != 0 || buffer_.empty()) return std::nullopt;
    std::vector<WeightedSample> batch;
    for (int i = 0; i < cfg_.minibatch_feedback_count; ++i) {
      const auto g = uniform_index(rng_, buffer_.num_groups());
      for (const auto& e : buffer_.group_entries(g)) {
        batch.push_back({&e.experience->embedding, index_of(e.experience->action), e.h, e.weight});
      }
    }
    return apply_sgd(batch, UpdateOutcome::Kind::kPeriodic);
  }

 private:
  static std::vector<WeightedSample> to_samples(const std::vector<ReplayEntry>& entries) {
    std::vector<WeightedSample> batch;
    batch.reserve(entries.size());
    for (const auto& e : entries) {
      batch.push_back({&e.experience->embedding, index_of(e.experience->action), e.h, e.weight});
    }
    return batch;
  }

  UpdateOutcome apply_sgd(const std::vector<WeightedSample>& batch, UpdateOutcome::Kind kind) {
    UpdateOutcome u;
    u.kind = kind;
    u.batch_size = batch.size();
    u.loss_before = batch_loss(model_, std::span<const WeightedSample>(batch));
    try {
      model_.sgd_step(model_.gradient(batch), cfg_.eta);
      u.applied = true;
      ++update_count_;
    } catch (const NonFiniteGradient& e) {
      u.error = e.what();
    }
    u.loss_after = batch_loss(model_, std::span<const WeightedSample>(batch));
    return u;
  }

  // Window loss 0.5 * (h - sum_j w_j H(s_j, a_j))^2, one gradient step.
  UpdateOutcome tamer_update(const std::vector<ReplayEntry>& window, double h) {
    auto predicted = [&] {
      double acc = 0.0;
      for (const auto& e : window) {
        acc += e.weight * model_.value(e.experience->embedding, index_of(e.experience->action));
      }
      return acc;
    };
    UpdateOutcome u;
    u.kind = UpdateOutcome::Kind::kImmediate;
    u.batch_size = window.size();
    const double err = h - predicted();
    u.loss_before = 0.5 * err * err;
    Gradient g{std::vector<double>(model_.parameters().size(), 0.0)};
    const int dim = model_.feature_dim();
    for (const auto& e : window) {
      double* row = g.values.data() + static_cast<std::size_t>(index_of(e.experience->action)) * dim;
      for (int i = 0; i < dim; ++i) row[i] -= err * e.weight * e.experience->embedding[i];
    }
    try {
      model_.sgd_step(g, cfg_.eta);
      u.applied = true;
      ++update_count_;
    } catch (const NonFiniteGradient& ex) {
      u.error = ex.what();
    }
    const double after = h - predicted();
    u.loss_after = 0.5 * after * after;
    return u;
  }

  Model model_;
  LearnerConfig cfg_;
  ExperienceWindow window_;
  ReplayBuffer buffer_;
  Rng rng_;
  std::uint64_t update_count_ = 0;
  std::uint64_t next_feedback_id_ = 0;
  double last_feedback_time_ = -std::numeric_limits<double>::infinity();
};

// Standalone TAMER window update on a linear model, as used by the learner.
inline void tamer_update(LinearPerActionModel& model, std::span<const EmbeddedExperience> window,
                         std::span<const double> weights, double h, double eta) {
  double pred = 0.0;
  for (std::size_t j = 0; j < window.size(); ++j) {
    pred += weights[j] * model.value(window[j].embedding, index_of(window[j].action));
  }
  const double err = h - pred;
  Gradient g{std::vector<double>(model.parameters().size(), 0.0)};
  const int dim = model.feature_dim();
  for (std::size_t j = 0; j < window.size(); ++j) {
    double* row = g.values.data() + static_cast<std::size_t>(index_of(window[j].action)) * dim;
    for (int i = 0; i < dim; ++i) row[i] -= err * weights[j] * window[j].embedding[i];
  }
  model.sgd_step(g, eta);
}

}  // namespace dtamer
