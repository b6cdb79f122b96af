#pragma once

#include <cstdint>
#include <random>

namespace umic {

/// Seedable generator used by every stochastic operation.
///
/// The engine is std::mt19937_64 (a twisted generalized feedback shift
/// register), whose output sequence is fixed by the C++ standard. The
/// uniform/normal transforms are implemented here rather than with the
/// <random> distributions, whose algorithms are implementation-defined, so
/// that a seed reproduces the same simulation on every toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via the Marsaglia polar method.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Derives an independent stream seed from a base seed (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace umic
