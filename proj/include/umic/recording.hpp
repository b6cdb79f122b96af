#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>

#include "umic/clock.hpp"
#include "umic/pdm.hpp"
#include "umic/syncsig.hpp"

namespace umic {

using NodeId = std::uint16_t;

/// How a recording was moved onto the reference node's sample grid.
struct AlignmentInfo {
  NodeId reference = 0;
  /// Integer shift applied: reference sample k pairs with this node's sample
  /// k + shift_samples (before trimming).
  std::int64_t shift_samples = 0;
  double offset0 = 0.0;    ///< fitted offset at reference sample 0, seconds
  double drift_ppm = 0.0;  ///< fitted relative drift
  double anchor_time = 0.0;  ///< reference time at which the shift was taken
  double residual_samples = 0.0;  ///< fitted offset minus shift at anchor_time
  std::size_t ref_begin = 0;  ///< first reference sample of the common window
  double peak_corr = 0.0;   ///< weakest window correlation

  /// Sub-sample misalignment (samples) left at reference time t.
  double residual_at(double t, double sample_rate) const noexcept {
    return (offset0 + drift_ppm * 1e-6 * t) * sample_rate - static_cast<double>(shift_samples);
  }
};

/// Dual-channel capture of one node: microphone PDM and sync GPIO sampled in
/// lockstep, sharing indices and sample rate.
struct NodeRecording {
  NodeId node_id = 0;
  PdmStream mic;
  SyncTrace sync;
  double start_local = 0.0;  ///< local time of sample 0
  std::uint64_t first_sample_index = 0;
  std::optional<ClockModel> clock_truth;  ///< simulator ground truth, for harnesses
  std::optional<AlignmentInfo> alignment;

  std::size_t size() const noexcept { return sync.size(); }
  double sample_rate() const noexcept { return sync.sample_rate; }

  /// Throws ParameterError unless both channels have equal length and rate.
  void validate() const;

  /// Samples [begin, begin + count) of both channels.
  NodeRecording slice(std::size_t begin, std::size_t count) const;
};

}  // namespace umic
