#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace rave {

// Deterministic RNG. mt19937_64 is fully specified by the standard and the
// derived draws below avoid std::*_distribution, whose output differs across
// library implementations. Same seed, same stream, everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; no spare caching so the stream position is a pure function of
  // the call count.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 == 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [lo, hi] inclusive, rejection-sampled (unbiased).
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    std::uint64_t mask = span - 1;
    mask |= mask >> 1;
    mask |= mask >> 2;
    mask |= mask >> 4;
    mask |= mask >> 8;
    mask |= mask >> 16;
    mask |= mask >> 32;
    std::uint64_t draw = next_u64() & mask;
    while (draw >= span) {
      draw = next_u64() & mask;
    }
    return lo + static_cast<int>(draw);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace rave
