// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace enhasr {

// Deterministic PRNG with platform-independent output (splitmix64 core).
// Standard-library distributions are implementation-defined, which would break
// the "same seed, bit-identical corpus" contract across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Stable seed derivation for independent streams (epoch, utterance, ...).
  static uint64_t derive(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x2545f4914f6cdd1dULL;
    for (uint64_t p : parts) {
      h ^= p + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      Rng mix(h);
      h = mix.next_u64();
    }
    return h;
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace enhasr
