#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mdmt {

// Deterministic RNG wrapper. std::mt19937_64 output is pinned by the
// standard, but the std distributions are not, so uniform/normal transforms
// are done by hand to keep generated datasets and initializations
// byte-stable across library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_index(uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const uint64_t limit = n * (UINT64_MAX / n);
    uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  // Standard normal via Box-Muller, one value per call (the pair's second
  // half is cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename Container>
  void shuffle(Container& c) {
    if (c.size() < 2) return;
    for (size_t i = c.size() - 1; i > 0; --i) {
      const size_t j = static_cast<size_t>(uniform_index(i + 1));
      std::swap(c[i], c[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Mixes a base seed with stream labels so each consumer (epoch shuffles,
// init, synthetic generation, ...) gets an independent deterministic stream.
inline uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  uint64_t x = seed ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xbf58476d1ce4e5b9ULL);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

}  // namespace mdmt
