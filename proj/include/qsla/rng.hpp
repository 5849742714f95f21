// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace qsla {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Folds a list of identifiers into one key; order matters.
constexpr std::uint64_t derive_key(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t k = splitmix64(seed);
  for (auto id : ids) k = splitmix64(k ^ splitmix64(id + 0x632BE59BD9B4E019ULL));
  return k;
}

/// Stateless uniform in [0, 1) addressed by (key, counter).
constexpr double uniform_at(std::uint64_t key, std::uint64_t counter) {
  return static_cast<double>(splitmix64(key ^ splitmix64(counter)) >> 11) * 0x1.0p-53;
}

/// Counter-based generator: the n-th draw depends only on (key, n), so
/// independent streams can be derived per work item and replayed in any
/// order. Normals use Box-Muller with libm, not <random> distributions,
/// whose output is implementation-defined.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}
  static CounterRng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
    return CounterRng(derive_key(seed, ids));
  }

  std::uint64_t next_u64() { return splitmix64(key_ ^ splitmix64(counter_++)); }
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n) {
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }
  double normal() {
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
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Fisher-Yates over any random-access range.
template <typename Range>
void shuffle(Range& r, CounterRng& rng) {
  const auto n = static_cast<std::uint64_t>(r.size());
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    std::swap(r[i - 1], r[j]);
  }
}

}  // namespace qsla
