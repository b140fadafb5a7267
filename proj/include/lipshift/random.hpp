#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "lipshift/tensor.hpp"

namespace lipshift {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream from a base seed and a list of coordinates
/// (epoch, batch index, sample id, ...), so results never depend on scheduling order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = splitmix64(seed);
  for (auto c : coords) h = splitmix64(h ^ splitmix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

inline Tensor randn(const Shape& shape, Rng& rng, real stddev = 1) {
  std::normal_distribution<real> dist(0, stddev);
  Tensor t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor rand_uniform(const Shape& shape, Rng& rng, real lo, real hi) {
  std::uniform_real_distribution<real> dist(lo, hi);
  Tensor t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

/// Uniform direction on the unit sphere.
inline Tensor random_unit(const Shape& shape, Rng& rng) {
  Tensor t = randn(shape, rng);
  const real n = norm2(t);
  for (auto& v : t.data()) v /= n;
  return t;
}

}  // namespace lipshift
