#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace csdm {

// Counter-based generator: draw k of a stream is mix(key + k * gamma) with the
// SplitMix64 finalizer, so any draw can be regenerated from (seed, counter)
// without stored state. Gaussians come from the Marsaglia polar method, which
// only needs log and sqrt.
class RngStream {
 public:
  static constexpr std::string_view kAlgorithm = "splitmix64-ctr/polar-v1";

  explicit RngStream(std::uint64_t seed = 0) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }
  std::string algorithm() const { return std::string(kAlgorithm); }

  std::uint64_t next_u64() noexcept;
  // Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  // Uniform on the open interval (0, 1).
  double uniform_open() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  double normal() noexcept;
  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) noexcept;

  // Independent child stream; the parent is not advanced, so children are a
  // pure function of (seed, index).
  RngStream split(std::uint64_t index) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64_mix(std::uint64_t z) noexcept;

}  // namespace csdm
