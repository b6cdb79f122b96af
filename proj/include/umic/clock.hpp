#pragma once

#include <cstddef>
#include <vector>

namespace umic {

/// Nominal rate of the dual-channel sampling interface (microphone + sync).
inline constexpr double kNominalSampleRate = 4.5e6;

/// Default bound on the crystal tolerance accepted by ClockModel::validate.
inline constexpr double kDefaultMaxDriftPpm = 200.0;

/// Affine free-running node clock: local = offset + (1 + drift) * global.
///
/// Jitter is not part of the mapping. It is applied only where hardware
/// timestamps an event (photodiode edges, sync GPIO edges); the sample grid
/// itself is jitter-free because both sampled channels share one clock.
struct ClockModel {
  double offset = 0.0;     ///< seconds, local minus global at global t = 0
  double drift_ppm = 0.0;  ///< fractional rate error in parts per million
  double sample_rate = kNominalSampleRate;
  double jitter_std = 0.0;  ///< seconds, per timestamped event

  double rate() const noexcept { return 1.0 + drift_ppm * 1e-6; }

  /// Throws ParameterError unless sample_rate > 0, |drift| <= max_drift_ppm
  /// and jitter_std >= 0.
  void validate(double max_drift_ppm = kDefaultMaxDriftPpm) const;
};

double to_local(const ClockModel& clock, double t_global) noexcept;
double to_global(const ClockModel& clock, double t_local) noexcept;

/// Global times of local sample instants k / sample_rate, k = 0 .. n-1.
std::vector<double> sample_times(const ClockModel& clock, std::size_t n);

}  // namespace umic
