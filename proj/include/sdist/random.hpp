#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace sdist {

using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a list of integer tags
/// (epoch, batch, ...) with a splitmix64 finalizer.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(seed);
  for (auto t : tags) h = mix(h ^ t);
  return h;
}

template <typename T>
std::vector<T> uniform_values(Rng& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
std::vector<T> normal_values(Rng& rng, std::size_t n, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace sdist
