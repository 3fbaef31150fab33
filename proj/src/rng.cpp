#include "csdm/rng.hpp"

#include <cmath>

namespace csdm {

namespace {
constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

RngStream::RngStream(std::uint64_t seed) noexcept
    : seed_(seed), key_(splitmix64_mix(seed ^ 0x6A09E667F3BCC909ULL)) {}

std::uint64_t RngStream::next_u64() noexcept {
  return splitmix64_mix(key_ + (++counter_) * kGamma);
}

double RngStream::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform_open() noexcept {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * f;
  has_spare_ = true;
  return u * f;
}

std::uint64_t RngStream::below(std::uint64_t n) noexcept {
  if (n <= 1) return 0;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return r % n;
}

RngStream RngStream::split(std::uint64_t index) const noexcept {
  return RngStream(splitmix64_mix(seed_ * kGamma + splitmix64_mix(index + 0x243F6A8885A308D3ULL)));
}

}  // namespace csdm
