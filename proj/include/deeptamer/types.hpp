#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtamer {

enum class Action : int { kNoAction = 0, kUp = 1, kDown = 2, kBowl = 3 };

inline constexpr int kNumActions = 4;
inline constexpr std::array<Action, kNumActions> kAllActions{Action::kNoAction, Action::kUp,
                                                             Action::kDown, Action::kBowl};

inline int index_of(Action a) { return static_cast<int>(a); }

inline Action action_from_index(int i) {
  if (i < 0 || i >= kNumActions) throw std::out_of_range("action index " + std::to_string(i));
  return static_cast<Action>(i);
}

inline const char* to_string(Action a) {
  switch (a) {
    case Action::kNoAction: return "noop";
    case Action::kUp: return "up";
    case Action::kDown: return "down";
    case Action::kBowl: return "bowl";
  }
  return "?";
}

// State shown to the agent: the two most recent grayscale frames, stacked
// channel-first (channel 0 older, channel 1 newest), values in [0, 1].
// Environments with a natural low-dimensional encoding also fill `features`.
struct Observation {
  static constexpr int kFrames = 2;

  int height = 0;
  int width = 0;
  std::vector<double> pixels;
  std::vector<double> features;

  std::size_t frame_size() const { return static_cast<std::size_t>(height) * width; }

  // Most recent frame.
  const double* newest() const { return pixels.data() + frame_size(); }

  friend bool operator==(const Observation&, const Observation&) = default;
};

using Embedding = std::vector<double>;

}  // namespace dtamer
