#pragma once

#include <cstdint>
#include <vector>

namespace cfmlab {

/// Counter-based splittable random stream.
///
/// The generator is SplitMix64 applied to an incrementing counter. The
/// per-stream key is derived by folding the master seed and the stream path
/// (experiment id, trial index, step index, ...) through the same mixing
/// function, so equal (seed, path) pairs give bit-identical draw sequences
/// and distinct paths give statistically independent streams. The algorithm
/// is fixed; output is reproducible across runs of one build.
class RngHandle {
 public:
  explicit RngHandle(std::uint64_t master_seed) : key_(mix(master_seed)) {}

  /// Derives an independent child stream; does not disturb this stream.
  RngHandle child(std::uint64_t id) const {
    RngHandle r(*this);
    r.key_ = mix(key_ ^ mix(id + 0x9e3779b97f4a7c15ULL));
    r.counter_ = 0;
    return r;
  }

  std::uint64_t next_u64() { return mix(key_ + ++counter_); }

  /// Uniform on [0, 1).
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller (no spare caching).
  double normal();

  std::uint64_t uniform_below(std::uint64_t n);

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace cfmlab
