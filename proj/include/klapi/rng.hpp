#pragma once

#include <cstdint>
#include <random>

namespace klapi {

/// Seeded random stream with a platform-independent draw sequence.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The standard distributions are implementation-defined, so the
/// transforms below are written out: uniform() takes the top 53 bits of one
/// engine word, normal() is Box-Muller on two uniforms (both variates are
/// used, the second one is cached).
///
/// A stream is single-owner. Parallel work allocates one stream per seed.
class RngStream {
public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  /// Number of 64-bit engine words consumed so far.
  std::uint64_t position() const { return position_; }

  std::uint64_t next_u64() {
    ++position_;
    return engine_();
  }

  /// Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);

  /// Standard normal variate.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Derives an independent seed for a child stream (splitmix64 finalizer).
  static std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t position_ = 0;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace klapi
