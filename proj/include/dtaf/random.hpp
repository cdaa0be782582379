#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace dtaf {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stateless generator: the draw is a pure function of (seed, stream, step, index).
// Used for dropout masks so every stochastic pass can be replayed exactly.
struct CounterRng {
  std::uint64_t seed = 0;

  std::uint64_t bits(std::uint64_t stream, std::uint64_t step, std::uint64_t index) const {
    std::uint64_t h = mix64(seed);
    h = mix64(h ^ stream);
    h = mix64(h ^ step);
    return mix64(h ^ index);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform(std::uint64_t stream, std::uint64_t step, std::uint64_t index) const {
    return static_cast<double>(bits(stream, step, index) >> 11) * 0x1.0p-53;
  }
};

// Derives an independent seed for a named sub-purpose (init, shuffle, dropout, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose) {
  return mix64(mix64(seed) ^ mix64(purpose * 0x2545f4914f6cdd1dULL + 1));
}

using Engine = std::mt19937_64;

// Portable uniform in [lo, hi): std::uniform_real_distribution is
// implementation-defined, this is not.
inline double uniform(Engine& eng, double lo, double hi) {
  double u = static_cast<double>(eng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

// Standard normal via Box-Muller on the portable uniform.
inline double normal(Engine& eng) {
  double u1 = 1.0 - uniform(eng, 0.0, 1.0);
  double u2 = uniform(eng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Fisher-Yates with an explicit index draw (std::shuffle is not portable).
template <class It>
void shuffle(It first, It last, Engine& eng) {
  auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    std::uint64_t j = eng() % i;
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace dtaf
