#pragma once

// Seeded random streams. Every stochastic component draws from its own
// stream derived from the run seed and a stream key, so changing one
// component (say the augmentation) never shifts the draws of another.
//
// Key derivation: seed_k = splitmix64(seed_{k-1} ^ fnv1a(key_k)), applied
// left to right over the key path, starting from the root seed. Numeric
// keys (round, client id) are mixed directly instead of hashed.
//
// The sampling helpers below are written out instead of using <random>
// distributions because the standard leaves those implementation-defined,
// and partitions must be identical across platforms.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace fedssl {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Builder for a derived seed: SeedPath(root).key("train").key(client).
class SeedPath {
 public:
  constexpr explicit SeedPath(std::uint64_t root) : state_(splitmix64(root)) {}

  constexpr SeedPath key(std::string_view name) const {
    return SeedPath(splitmix64(state_ ^ fnv1a(name)), 0);
  }
  constexpr SeedPath key(std::uint64_t index) const {
    return SeedPath(splitmix64(state_ ^ splitmix64(index + 0x632BE59BD9B4E019ULL)), 0);
  }
  constexpr std::uint64_t seed() const { return state_; }

 private:
  constexpr SeedPath(std::uint64_t state, int) : state_(state) {}
  std::uint64_t state_;
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  explicit Rng(const SeedPath& path) : engine_(path.seed()) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fedssl
