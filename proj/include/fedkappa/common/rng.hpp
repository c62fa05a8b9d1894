#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace fedkappa {

/// SplitMix64 finalizer; a bijective 64-bit mixer.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Derives an independent stream key from a parent key and a tag.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag) noexcept;
std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag) noexcept;

/// Counter-based generator: draw i of stream `key` is
/// mix64(key + (i + 1) * 0x9E3779B97F4A7C15). This is SplitMix64 with the
/// state exposed as a counter, so any draw is addressable and the sequence is
/// identical on every platform. All derived distributions below are written
/// out explicitly rather than using <random> distributions, whose algorithms
/// are implementation-defined.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

  std::uint64_t next_u64() noexcept;

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound) noexcept;

  /// Standard normal via Box-Muller (one pair consumed per call).
  double normal() noexcept;

  bool bernoulli(double p) noexcept { return uniform() < p; }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates shuffle driven by CounterRng.
template <typename T>
void shuffle(std::span<T> items, CounterRng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace fedkappa
