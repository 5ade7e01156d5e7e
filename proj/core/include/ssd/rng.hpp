#pragma once

#include <cmath>
#include <cstdint>

namespace ssd {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Mixes up to three seed components into one stream seed. Augmentation
/// derives per-image seeds as derive_seed(global_seed, image_index, epoch)
/// so parallel and serial pipelines produce identical bytes.
inline uint64_t derive_seed(uint64_t a, uint64_t b, uint64_t c = 0) {
  uint64_t state = a;
  uint64_t h = splitmix64(state);
  state ^= 0x6a09e667f3bcc909ull + b;
  h ^= splitmix64(state);
  state ^= 0xbb67ae8584caa73bull + c;
  return splitmix64(state) ^ h;
}

/// xoshiro256++ with hand-rolled distributions. <random> distributions are
/// not bit-identical across standard libraries, and seeded pipelines here
/// must reproduce byte-for-byte.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  uint64_t next() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1).
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], both ends inclusive.
  int uniform_int(int lo, int hi) {
    return lo + int(next() % uint64_t(hi - lo + 1));
  }

  /// Standard normal via Box-Muller; two fresh uniforms per call.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
};

}  // namespace ssd
