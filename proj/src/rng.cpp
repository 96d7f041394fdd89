#include "cfmlab/rng.hpp"

#include <cmath>
#include <numbers>

namespace cfmlab {

double RngHandle::normal() {
  // Box-Muller; u1 is kept away from 0 so the log is finite.
  double u1 = uniform01();
  double u2 = uniform01();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngHandle::uniform_below(std::uint64_t n) {
  // Rejection to avoid modulo bias.
  const std::uint64_t limit = n * (UINT64_MAX / n);
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

}  // namespace cfmlab
