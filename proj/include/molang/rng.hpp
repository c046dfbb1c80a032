#pragma once

#include <cmath>
#include <cstdint>

namespace molang {

// Counter-free splittable RNG. All randomness in the project flows through
// explicit Rng instances; there is no global state. Streams derived from
// (seed, epoch, step) make training resumable at epoch granularity.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  static Rng stream(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = mix(seed);
    s = mix(s ^ mix(a + 0x1ull));
    s = mix(s ^ mix(b + 0x2ull));
    s = mix(s ^ mix(c + 0x3ull));
    return Rng(s);
  }

  uint64_t next_u64() {
    // splitmix64 step
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // inclusive bounds; modulo bias is negligible for the small ranges used here
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // normal truncated to +-2 sigma, then scaled; used for weight init
  double truncated_normal(double std) {
    double z;
    do {
      z = normal();
    } while (z < -2.0 || z > 2.0);
    return z * std;
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace molang
