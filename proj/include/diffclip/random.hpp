#pragma once

#include <cstdint>
#include <random>

namespace diffclip {

using Rng = std::mt19937_64;

/// SplitMix64 finaliser; derives independent stream seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Normal(0, sigma) resampled until |x| <= 2 sigma.
inline double truncated_normal(Rng& rng, double sigma) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (;;) {
    const double x = dist(rng);
    if (x >= -2.0 * sigma && x <= 2.0 * sigma) return x;
  }
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace diffclip
