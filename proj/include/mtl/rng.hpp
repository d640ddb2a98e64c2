#pragma once

#include "mtl/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace mtl {

/// Seeded random stream.
///
/// Wraps mt19937_64, whose output sequence is fixed by the standard, and
/// derives all distributions from raw 64-bit draws so that streams are
/// reproducible across standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal (Box-Muller).
  double normal();
  /// Uniform integer in [0, n).
  Index below(Index n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(static_cast<Index>(i)));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Seed of the named sub-stream of `master`. Streams are keyed by label, so
/// adding a consumer never shifts another consumer's draws.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace mtl
