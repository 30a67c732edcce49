#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>

namespace cpi {

/// Seeded generator whose derived draws are identical across standard
/// libraries: only the raw mt19937_64 stream is used, never the
/// implementation-defined <random> distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n);
  /// Draws an index with probability proportional to weights (nonnegative,
  /// positive sum). Lowest index wins on round-off at the upper end.
  std::size_t categorical(std::span<const double> weights);

  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// Mixes several integers into one seed (splitmix64 chain).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                          std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace cpi
