#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace chaosda {

// Every stochastic draw in the artifact flows through this wrapper so a run
// is a pure function of the config seed. Distribution transforms are spelled
// out here instead of relying on std::normal_distribution, whose internal
// caching makes stream splitting fragile.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller; consumes exactly two uniforms per call
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  double lognormal(double log_mean = 0.0, double log_std = 1.0) {
    return std::exp(normal(log_mean, log_std));
  }

  std::uint64_t raw() { return eng_(); }

 private:
  static constexpr double kTwoPi = 6.283185307179586476925286766559;
  std::mt19937_64 eng_;
};

// Splits one user-facing seed into decorrelated named streams; the tag keeps
// streams for different purposes apart even when the indices collide.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                          std::uint64_t a = 0, std::uint64_t b = 0);

}  // namespace chaosda
