#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace decisive {

/// SplitMix64 finalizer; the mixing core of every random draw in the project.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: the n-th draw of stream (seed, stream) is a pure
/// function of (seed, stream, n), so independent consumers never share state.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix64(seed ^ mix64(stream + 0x632be59bd9b4e019ULL))) {}

  static constexpr double bits_to_unit(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
  }

  /// Stateless access to draw `index`.
  constexpr std::uint64_t bits_at(std::uint64_t index) const {
    return mix64(key_ + mix64(index));
  }
  double uniform_at(std::uint64_t index) const { return bits_to_unit(bits_at(index)); }
  /// Box-Muller on draws 2*index and 2*index+1.
  double normal_at(std::uint64_t index) const {
    double u1 = bits_to_unit(bits_at(2 * index));
    double u2 = bits_to_unit(bits_at(2 * index + 1));
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t next_bits() { return bits_at(counter_++); }
  /// Uniform in [0, 1).
  double uniform() { return bits_to_unit(next_bits()); }
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // Multiply-shift; bias is below 2^-40 for the ranges used here.
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }
  /// Uniform integer in [lo, hi].
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace decisive
