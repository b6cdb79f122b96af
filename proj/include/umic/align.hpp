#pragma once

#include <vector>

#include "umic/recording.hpp"

namespace umic {

struct AlignOptions {
  double window = 0.25;  ///< drift-tracking window, seconds
  double hop = 1.0;      ///< drift-tracking hop, seconds
  double max_lag = 0.06;  ///< search range for the initial offset, seconds
};

/// Moves every recording onto the reference's sample grid. Each offset and
/// drift is estimated from the sync channels; the integer shift is taken at
/// the middle of the reference trace and applied to both channels, and all
/// outputs are trimmed to the window every recording covers. The sub-sample
/// residual and the fitted line go to the alignment metadata; nothing is
/// resampled. When the reference is shorter than three tracking windows a
/// single offset over the whole trace is used (drift 0).
///
/// Throws ParameterError for an empty list, an unknown reference or duplicate
/// ids, NoSyncLockError from estimation, AlignmentError when the common window
/// is empty.
std::vector<NodeRecording> align(const std::vector<NodeRecording>& recordings, NodeId reference,
                                 const AlignOptions& options = {});

}  // namespace umic
