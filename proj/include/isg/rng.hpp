#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace isg {

// Deterministic RNG with a fully specified bit stream. std::random distributions
// are implementation-defined, so sampling is done by hand here; every artifact
// that must be bit-reproducible draws from this engine.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  // splitmix64
  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in (0, 1]
  double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  // uniform integer in [lo, hi], inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  // Box-Muller; consumes two draws per sample
  double normal(double mu = 0.0, double sigma = 1.0) {
    double u1 = uniform_pos();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mu + sigma * r * std::cos(6.283185307179586476925287 * u2);
  }
};

// FNV-1a over the label, mixed into the root seed. Stages derive their own
// streams so they stay reproducible when run in isolation.
inline uint64_t derive_seed(uint64_t root, std::string_view label) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  Rng mix(root ^ h);
  return mix.next_u64();
}

}  // namespace isg
