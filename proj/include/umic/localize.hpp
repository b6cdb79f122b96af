#pragma once

#include <map>
#include <optional>
#include <vector>

#include "umic/lighthouse.hpp"
#include "umic/pdm.hpp"
#include "umic/recording.hpp"

namespace umic {

/// Frequency range kept by the phase-weighted correlation, Hz.
struct Band {
  double low = 0.0;
  double high = 150e3;
};

/// Entries below this confidence are flagged and left out of fits.
inline constexpr double kMinTdoaConfidence = 0.3;

struct TdoaEntry {
  NodeId node = 0;
  double delay = 0.0;       ///< arrival at node minus arrival at reference, seconds
  double confidence = 0.0;  ///< peak / sum of weights, in [0, 1]
  bool flagged = false;     ///< confidence < kMinTdoaConfidence
};

struct TdoaSet {
  NodeId reference = 0;
  std::vector<TdoaEntry> entries;  ///< never contains the reference
};

/// Phase-transform weighted cross-correlation of every stream against the
/// reference, restricted to `band`. Streams must share one sample rate and
/// index grid (aligned, demodulated); the common prefix is used. The search
/// is limited to |delay| <= max_delay when given. Throws ParameterError for
/// fewer than two streams, mismatched rates, a missing reference or an empty
/// band.
TdoaSet estimate_tdoa(const std::map<NodeId, PcmStream>& streams, NodeId reference, const Band& band = {},
                      std::optional<double> max_delay = std::nullopt);

/// Removes the sub-sample misalignment that integer alignment leaves: each
/// entry's delay is reduced by its node's residual (relative to the
/// reference's) at reference time t. Residuals are in samples of
/// `sample_rate`, the rate the alignment was made at.
TdoaSet correct_tdoa(const TdoaSet& tdoa, const std::map<NodeId, AlignmentInfo>& alignment, double t,
                     double sample_rate = kNominalSampleRate);

struct SourceFix {
  Vec3 position = Vec3::Zero();
  double rms_residual = 0.0;  ///< seconds
  int iterations = 0;
  std::vector<Vec3> path;     ///< iterates, starting with the initial point
};

/// Residuals r_i = (|x - p_i| - |x - p_ref|) / c - tau_i over the unflagged
/// entries, in entry order.
Eigen::VectorXd tdoa_residuals(const TdoaSet& tdoa, const std::map<NodeId, Vec3>& positions, double c,
                               const Vec3& x);
/// Analytic Jacobian of tdoa_residuals with respect to x.
Eigen::MatrixXd tdoa_jacobian(const TdoaSet& tdoa, const std::map<NodeId, Vec3>& positions, double c,
                              const Vec3& x);

/// Confidence-weighted Gauss-Newton. Stops when the step is below 1e-6 m or
/// after 50 iterations. Default start is the centroid of the nodes used.
/// Throws ParameterError for fewer than three usable entries or unknown node
/// ids, RankDeficiencyError for a collinear array or a rank-deficient step,
/// ConvergenceError when the step grows five iterations in a row.
SourceFix multilaterate(const TdoaSet& tdoa, const std::map<NodeId, Vec3>& positions, double c,
                        std::optional<Vec3> initial = std::nullopt);

/// Position error (m, RMS over the three axes combined) per second of
/// independent, equal TDOA noise at `source`: sqrt(trace((J^T J)^-1)).
double dilution_of_precision(const TdoaSet& tdoa, const std::map<NodeId, Vec3>& positions, double c,
                             const Vec3& source);

/// Exact delays for a source at `source` (all entries confidence 1).
TdoaSet geometric_tdoa(const std::map<NodeId, Vec3>& positions, NodeId reference, double c, const Vec3& source);

}  // namespace umic
