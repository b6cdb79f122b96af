#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "umic/error.hpp"
#include "umic/lighthouse.hpp"
#include "umic/pdm.hpp"
#include "umic/recording.hpp"
#include "umic/syncsig.hpp"

namespace umic {

struct Environment {
  double temperature = 20.0;         ///< degrees C
  double relative_humidity = 50.0;   ///< percent
  double pressure = 101325.0;        ///< Pa

  void validate() const;
};

/// Dry-air model c = 331.3 sqrt(1 + T / 273.15). Humidity and pressure are
/// validated but do not enter the formula.
double speed_of_sound(const Environment& env);

/// Half-width of the windowed-sinc interpolator; the kernel spans 2x taps.
inline constexpr int kFractionalDelayHalfWidth = 8;

/// Band-limited value of x at fractional index pos (zero outside x), using a
/// Kaiser-windowed sinc of 16 taps tabulated at 1/4096-sample phases.
double interpolate(const std::vector<double>& x, double pos);

/// Delays the signal by |dst - src| / c (fractional part by windowed sinc) and
/// scales it by 1 / max(|dst - src|, 0.1 m). Output length equals input length.
/// Throws ParameterError for c <= 0 or src == dst.
PcmStream propagate(const PcmStream& signal, const Vec3& src, const Vec3& dst, double c);

/// Hann-windowed linear chirp.
PcmStream linear_chirp(double f0, double f1, double duration, double amplitude, double sample_rate);

struct SceneNode {
  NodeId id = 0;
  Vec3 position = Vec3::Zero();
  ClockModel clock;
  double start_local = 0.1;  ///< local time at which the recording starts
};

struct Scene {
  Vec3 source_position = Vec3::Zero();
  PcmStream source_signal;   ///< emitted from the source position
  double source_start = 0.0;  ///< global time of source sample 0
  std::vector<SceneNode> nodes;
  Environment environment;
  double recording_length = 1.0;  ///< seconds of local time per node

  /// Throws ParameterError on an empty node list, duplicate ids, non-finite
  /// positions, a non-positive length or a source that ends after the
  /// recordings.
  void validate() const;
};

/// Per-node failures collected while synthesizing.
class SynthesisError : public Error {
 public:
  explicit SynthesisError(std::map<NodeId, std::string> errors);
  const std::map<NodeId, std::string>& errors() const noexcept { return errors_; }

 private:
  std::map<NodeId, std::string> errors_;
};

/// Per node: the source as heard at the node (propagation delay and 1/r gain)
/// evaluated at every local sample instant of the node's clock, sigma-delta
/// modulated at the sample rate, next to the sync trace rendered on the same
/// grid. Edge jitter of the sync channel is drawn from derive_seed(seed, id).
std::vector<NodeRecording> synthesize(const Scene& scene, const SyncSchedule& schedule,
                                      std::uint64_t seed);

}  // namespace umic
