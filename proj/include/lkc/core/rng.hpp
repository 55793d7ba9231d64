#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace lkc {

/// splitmix64 stream. Every random draw in the project goes through this type
/// so results are reproducible across platforms and implementations.
class Rng {
 public:
  explicit constexpr Rng(std::uint64_t seed = 0) : state_(seed) {}

  constexpr std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; only the cosine branch is used.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// next_u64() mod n. The modulo bias is accepted; it is part of the stream contract.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  constexpr std::uint64_t state() const { return state_; }

  /// Independent stream keyed by (seed, a, b), e.g. (base seed, epoch, sample index).
  static constexpr Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    Rng first(seed);
    Rng second(first.next_u64() ^ a);
    Rng third(second.next_u64() ^ b);
    return Rng(third.next_u64());
  }

 private:
  std::uint64_t state_;
};

}  // namespace lkc
