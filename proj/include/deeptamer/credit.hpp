#pragma once

// Delay distributions and importance weights for credit assignment.
//
// A feedback signal observed at time t_f is assumed to refer to behaviour
// that happened some random delay earlier. The weight of an experience that
// occupied [t_start, t_end] is the probability mass the delay density puts on
// [t_f - t_end, t_f - t_start].

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>

#include <nlohmann/json.hpp>

namespace dtamer {

namespace special {

// Regularized lower incomplete gamma P(a, x), a > 0. Series expansion below
// x < a + 1, Lentz continued fraction for Q(a, x) above.
inline double gamma_p(double a, double x) {
  if (!(a > 0.0)) throw std::domain_error("gamma_p: shape must be positive");
  if (x <= 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  const double log_prefix = a * std::log(x) - x - std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a;
    double term = 1.0 / a;
    double sum = term;
    for (int n = 0; n < kMaxIter; ++n) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::fabs(term) < std::fabs(sum) * kEps) break;
    }
    return std::min(1.0, sum * std::exp(log_prefix));
  }
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return std::max(0.0, 1.0 - std::exp(log_prefix) * h);
}

}  // namespace special

struct UniformDelay {
  double lo = 0.2;
  double hi = 4.0;
};

struct GammaDelay {
  double shape = 2.0;
  double scale = 0.28;
};

// f_delay. Parameters are validated once at construction; every query below
// is a pure function of the immutable value.
class DelayDistribution {
 public:
  DelayDistribution() : DelayDistribution(uniform(0.2, 4.0)) {}

  static DelayDistribution uniform(double lo, double hi) {
    if (!(lo >= 0.0) || !(hi > lo) || !std::isfinite(hi)) {
      throw std::invalid_argument("uniform delay requires 0 <= lo < hi");
    }
    return DelayDistribution(UniformDelay{lo, hi});
  }

  static DelayDistribution gamma(double shape, double scale) {
    if (!(shape > 0.0) || !(scale > 0.0) || !std::isfinite(shape) ||
        !std::isfinite(scale)) {
      throw std::invalid_argument("gamma delay requires shape > 0, scale > 0");
    }
    return DelayDistribution(GammaDelay{shape, scale});
  }

  // Named presets.
  static DelayDistribution uniform_default() { return uniform(0.2, 4.0); }
  static DelayDistribution uniform_028() { return uniform(0.28, 4.0); }
  static DelayDistribution gamma_default() { return gamma(2.0, 0.28); }

  bool is_uniform() const { return std::holds_alternative<UniformDelay>(v_); }
  bool is_gamma() const { return std::holds_alternative<GammaDelay>(v_); }
  const UniformDelay& as_uniform() const { return std::get<UniformDelay>(v_); }
  const GammaDelay& as_gamma() const { return std::get<GammaDelay>(v_); }

  double density(double t) const {
    if (is_uniform()) {
      const auto& u = as_uniform();
      return (t >= u.lo && t <= u.hi) ? 1.0 / (u.hi - u.lo) : 0.0;
    }
    const auto& g = as_gamma();
    if (t <= 0.0) return 0.0;
    const double x = t / g.scale;
    return std::exp((g.shape - 1.0) * std::log(x) - x - std::lgamma(g.shape)) /
           g.scale;
  }

  double cdf(double t) const {
    if (is_uniform()) {
      const auto& u = as_uniform();
      if (t <= u.lo) return 0.0;
      if (t >= u.hi) return 1.0;
      return (t - u.lo) / (u.hi - u.lo);
    }
    const auto& g = as_gamma();
    return special::gamma_p(g.shape, t / g.scale);
  }

  // Smallest t with cdf(t) >= p, p in [0, 1].
  double quantile(double p) const {
    if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("quantile: p outside [0,1]");
    if (is_uniform()) {
      const auto& u = as_uniform();
      return u.lo + p * (u.hi - u.lo);
    }
    if (p == 0.0) return 0.0;
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    const auto& g = as_gamma();
    double lo = 0.0;
    double hi = g.scale * std::max(1.0, g.shape);
    while (cdf(hi) < p) hi *= 2.0;
    for (int i = 0; i < 200 && hi - lo > 1e-15 * hi; ++i) {
      const double mid = 0.5 * (lo + hi);
      if (cdf(mid) >= p) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
    return hi;
  }

  double mean() const {
    if (is_uniform()) return 0.5 * (as_uniform().lo + as_uniform().hi);
    return as_gamma().shape * as_gamma().scale;
  }

  // Delay interval outside of which an experience can carry at most
  // 2*epsilon weight. Uniform support is exact and ignores epsilon.
  std::pair<double, double> support_window(double epsilon) const {
    if (!(epsilon >= 0.0 && epsilon < 0.5)) {
      throw std::domain_error("support_window: epsilon must be in [0, 0.5)");
    }
    if (is_uniform()) return {as_uniform().lo, as_uniform().hi};
    return {0.0, quantile(1.0 - epsilon)};
  }

  nlohmann::json to_json() const {
    if (is_uniform()) {
      return {{"kind", "uniform"}, {"lo", as_uniform().lo}, {"hi", as_uniform().hi}};
    }
    return {{"kind", "gamma"}, {"shape", as_gamma().shape}, {"scale", as_gamma().scale}};
  }

  // Accepts {"kind":"uniform","lo","hi"} and {"kind":"gamma","shape",
  // "scale"|"rate"}.
  static DelayDistribution from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "uniform") {
      return uniform(j.at("lo").get<double>(), j.at("hi").get<double>());
    }
    if (kind == "gamma") {
      const double shape = j.at("shape").get<double>();
      if (j.contains("scale") && j.contains("rate")) {
        throw std::invalid_argument("gamma delay: give either scale or rate");
      }
      if (j.contains("rate")) return gamma(shape, 1.0 / j.at("rate").get<double>());
      return gamma(shape, j.at("scale").get<double>());
    }
    throw std::invalid_argument("unknown delay distribution kind: " + kind);
  }

  friend bool operator==(const DelayDistribution& a, const DelayDistribution& b) {
    if (a.is_uniform() != b.is_uniform()) return false;
    if (a.is_uniform()) {
      return a.as_uniform().lo == b.as_uniform().lo && a.as_uniform().hi == b.as_uniform().hi;
    }
    return a.as_gamma().shape == b.as_gamma().shape && a.as_gamma().scale == b.as_gamma().scale;
  }

 private:
  explicit DelayDistribution(std::variant<UniformDelay, GammaDelay> v) : v_(v) {}
  std::variant<UniformDelay, GammaDelay> v_;
};

// Time interval an experience occupied, in session seconds.
struct Stamp {
  double t_start = 0.0;
  double t_end = 0.0;

  static Stamp make(double t_start, double t_end) {
    if (!(t_start <= t_end)) throw std::invalid_argument("stamp: t_start > t_end");
    return {t_start, t_end};
  }
};

inline double cdf(const DelayDistribution& dist, double t) { return dist.cdf(t); }

// Probability that feedback at t_feedback refers to the experience `stamp`.
inline double weight(const Stamp& stamp, double t_feedback, const DelayDistribution& dist) {
  if (t_feedback <= stamp.t_start) return 0.0;
  const double w = dist.cdf(t_feedback - stamp.t_start) - dist.cdf(t_feedback - stamp.t_end);
  return std::clamp(w, 0.0, 1.0);
}

inline std::pair<double, double> support_window(const DelayDistribution& dist, double epsilon) {
  return dist.support_window(epsilon);
}

}  // namespace dtamer
