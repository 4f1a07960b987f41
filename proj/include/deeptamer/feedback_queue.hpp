#pragma once

// Session clocks and the bounded feedback queue shared between producers
// (gateway, oracle) and the learning loop.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <mutex>
#include <thread>
#include <vector>

#include "deeptamer/learner.hpp"

namespace dtamer {

// Session time in seconds. Paused intervals do not advance it.
class SessionClock {
 public:
  virtual ~SessionClock() = default;
  virtual double now() const = 0;
  // Blocks until now() >= t, or returns immediately for virtual time.
  virtual void wait_until(double t) = 0;
  virtual void pause() {}
  virtual void resume() {}
  virtual bool is_virtual() const = 0;
};

// Jumps straight to each requested time.
class VirtualClock final : public SessionClock {
 public:
  double now() const override { return t_.load(); }
  void wait_until(double t) override {
    if (t > t_.load()) t_.store(t);
  }
  bool is_virtual() const override { return true; }

 private:
  std::atomic<double> t_{0.0};
};

// Steady wall clock minus accumulated pause time. Thread safe.
class WallClock final : public SessionClock {
 public:
  using Steady = std::chrono::steady_clock;

  WallClock() : origin_(Steady::now()) {}

  double now() const override {
    std::lock_guard lock(mu_);
    return elapsed_locked(paused_ ? pause_start_ : Steady::now());
  }

  void wait_until(double t) override {
    for (;;) {
      Steady::time_point target;
      {
        std::lock_guard lock(mu_);
        if (!paused_) {
          const double remaining = t - elapsed_locked(Steady::now());
          if (remaining <= 0.0) return;
          target = Steady::now() + std::chrono::duration_cast<Steady::duration>(
                                       std::chrono::duration<double>(remaining));
        } else {
          target = Steady::now() + std::chrono::milliseconds(5);
        }
      }
      std::this_thread::sleep_until(std::min(target, Steady::now() + std::chrono::milliseconds(20)));
    }
  }

  void pause() override {
    std::lock_guard lock(mu_);
    if (paused_) return;
    paused_ = true;
    pause_start_ = Steady::now();
  }

  void resume() override {
    std::lock_guard lock(mu_);
    if (!paused_) return;
    paused_total_ += Steady::now() - pause_start_;
    paused_ = false;
  }

  bool is_virtual() const override { return false; }

 private:
  double elapsed_locked(Steady::time_point at) const {
    return std::chrono::duration<double>(at - origin_ - paused_total_).count();
  }

  mutable std::mutex mu_;
  Steady::time_point origin_;
  Steady::duration paused_total_{0};
  Steady::time_point pause_start_{};
  bool paused_ = false;
};

// Bounded FIFO of timestamped feedback. When full, the oldest item is
// dropped and counted. Timestamps are nondecreasing in queue order.
class FeedbackQueue {
 public:
  static constexpr std::size_t kDefaultCapacity = 1024;

  explicit FeedbackQueue(std::size_t capacity = kDefaultCapacity) : capacity_(capacity) {}

  // Stamps the feedback with the clock reading taken under the queue lock.
  Feedback push_now(double h, FeedbackSource source, const SessionClock& clock) {
    std::lock_guard lock(mu_);
    Feedback f{h, std::max(clock.now(), last_time_), source};
    push_locked(f);
    return f;
  }

  // Pushes feedback already carrying its time; earlier times are raised to
  // keep the queue ordered.
  void push(Feedback f) {
    std::lock_guard lock(mu_);
    f.t_feedback = std::max(f.t_feedback, last_time_);
    push_locked(f);
  }

  std::vector<Feedback> drain_until(double t) {
    std::lock_guard lock(mu_);
    std::vector<Feedback> out;
    while (!items_.empty() && items_.front().t_feedback <= t) {
      out.push_back(items_.front());
      items_.pop_front();
    }
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }

  std::uint64_t dropped() const { return dropped_.load(); }
  std::size_t capacity() const { return capacity_; }

 private:
  void push_locked(const Feedback& f) {
    if (items_.size() >= capacity_) {
      items_.pop_front();
      ++dropped_;
    }
    items_.push_back(f);
    last_time_ = f.t_feedback;
  }

  mutable std::mutex mu_;
  std::deque<Feedback> items_;
  std::size_t capacity_;
  double last_time_ = 0.0;
  std::atomic<std::uint64_t> dropped_{0};
};

}  // namespace dtamer
