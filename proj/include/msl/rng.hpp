#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace msl {

/// Deterministic random source. All draws are implemented on top of the
/// mt19937_64 bit stream with explicit arithmetic, so sequences are identical
/// across standard libraries and platforms (std::*_distribution is
/// implementation-defined and is deliberately avoided).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection-free modulo is fine here: n is
  /// always tiny relative to 2^64, so the bias is far below observability.
  std::uint64_t uniform_int(std::uint64_t n) { return gen_() % n; }

  /// Standard normal via Box-Muller (cosine branch only; keeps no state).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Rayleigh magnitude with unit mean square: sqrt(X^2+Y^2)/sqrt(2).
  double rayleigh_unit() {
    const double x = normal();
    const double y = normal();
    return std::sqrt(0.5 * (x * x + y * y));
  }

  /// Fisher-Yates shuffle.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

/// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derived seed for an (epoch, task)-scoped stream; order-independent across
/// tasks so sequential and parallel schedules agree.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return mix64(mix64(seed ^ 0x5851f42d4c957f2dull) ^ mix64(a ^ 0x14057b7ef767814full) ^
               mix64(b ^ 0x27bb2ee687b0b0fdull));
}

}  // namespace msl
