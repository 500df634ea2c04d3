#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "scalenet/errors.hpp"

namespace scalenet {

// Derives an independent stream seed from a master seed and a salt.
// splitmix64 finalizer; different salts give uncorrelated streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt) {
  std::uint64_t z = master + salt * 0x9e3779b97f4a7c15ull + 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Seeded random stream with fixed, implementation-independent draw
// algorithms. std::mt19937_64 output is pinned by the standard, and the
// distributions below are written out by hand, so a seed reproduces the
// same values on every build. Never share a stream across threads.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1]; safe to feed into log().
  double uniform_open() {
    return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller. Two draws per call, no cached spare,
  // so the draw count per call is constant.
  double gaussian() {
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Normal truncated to two standard deviations, then scaled. This is the
  // usual transformer weight-init distribution.
  double truncated_normal(double stddev) {
    for (;;) {
      double z = gaussian();
      if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
  }

  // Uniform index in [0, n).
  std::size_t index(std::size_t n) {
    if (n == 0) throw contract_error("RandomStream::index: n must be positive");
    return static_cast<std::size_t>(engine_() % n);
  }

  // In-place Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace scalenet
