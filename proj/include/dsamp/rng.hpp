#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dsamp {

/// Counter-based 64-bit generator.
///
/// The i-th draw of stream `s` under seed `k` is `mix(k, s, i)`, a SplitMix64
/// finalizer applied to a Weyl sequence keyed by (seed, stream). Draws are a
/// pure function of (seed, stream, counter), so any sub-stream can be
/// reproduced without replaying the ones before it. This is the generator
/// behind every "seed" in the toolkit, including the fixed construction seed
/// of the distorted energies.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : key_(splitmix(seed ^ splitmix(stream + 0x632be59bd9b4e019ULL))) {}

  static constexpr std::uint64_t splitmix(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() noexcept {
    return splitmix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) %
           (n == 0 ? 1 : n);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Derives a stream id from a purpose tag and an index (iteration, shard, ...).
constexpr std::uint64_t stream_id(std::uint64_t tag, std::uint64_t index) noexcept {
  return CounterRng::splitmix(tag * 0x100000001b3ULL ^ CounterRng::splitmix(index));
}

}  // namespace dsamp
