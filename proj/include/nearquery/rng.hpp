#pragma once

#include <cmath>
#include <cstdint>

namespace nq {

// SplitMix64 output mixer.
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based generator: draw i of stream s under seed k is
///   splitmix64_mix(key + (i + 1) * 0x9e3779b97f4a7c15), key = mix(k ^ mix(s)).
/// Any draw can be recomputed from (seed, stream, index) alone, which is what
/// lets other implementations reproduce generated datasets byte for byte.
class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(splitmix64_mix(seed ^ splitmix64_mix(stream))) {}

  std::uint64_t next_u64() {
    ++counter_;
    return splitmix64_mix(key_ + counter_ * kGamma);
  }

  // 53-bit uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, cosine branch only; consumes exactly two draws.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // floor(uniform * n); n >= 1.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace nq
