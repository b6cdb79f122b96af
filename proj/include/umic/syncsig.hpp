#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "umic/bitbuffer.hpp"
#include "umic/clock.hpp"

namespace umic {

/// Beacon packet timing. Payload and gap durations are drawn uniformly from
/// their ranges; rx_latency is the receiver chain delay, identical at every
/// node, so it cancels in pairwise offsets.
struct SyncParams {
  double min_payload = 0.5e-3;
  double max_payload = 4.0e-3;
  double min_gap = 0.5e-3;
  double max_gap = 5.0e-3;
  double rx_latency = 0.0;

  void validate() const;
};

struct SyncEvent {
  double start = 0.0;     ///< global seconds
  double duration = 0.0;  ///< seconds
  friend bool operator==(const SyncEvent&, const SyncEvent&) = default;
};

struct SyncSchedule {
  std::vector<SyncEvent> events;
  std::uint64_t seed = 0;
  SyncParams params;
};

/// Sampled image of the sync GPIO at one node.
struct SyncTrace {
  BitBuffer bits;
  double sample_rate = kNominalSampleRate;
  double start_local = 0.0;  ///< local time of sample 0

  std::size_t size() const noexcept { return bits.size(); }
  double duration() const noexcept { return static_cast<double>(bits.size()) / sample_rate; }
};

/// Throws ParameterError for invalid params or duration <= min_payload + min_gap.
SyncSchedule generate_schedule(std::uint64_t seed, double duration, const SyncParams& params);

/// Renders n samples starting at local time t0_local. Sample k is high iff the
/// global time of its local instant falls inside an event's reception window
/// [start + rx_latency, start + rx_latency + duration). When the clock has
/// jitter, each window's start and end are perturbed independently, drawn
/// from a stream seeded by jitter_seed.
SyncTrace render_trace(const SyncSchedule& schedule, const ClockModel& clock, double t0_local,
                       std::size_t n, std::uint64_t jitter_seed = 0);

// ---------------------------------------------------------------------------
// Correlation engine

enum class CorrelationMethod { Automatic, Direct, Transform };

/// Automatic uses direct time-domain correlation when the analysed window is
/// shorter than this many samples, and the FFT path otherwise.
inline constexpr std::size_t kDirectCorrelationLimit = 4096;

/// Normalized (Pearson, mean-removed) cross-correlation as a function of lag.
/// values[i] belongs to lag first_lag + i (in samples); lags whose overlap is
/// shorter than half the analysed window hold NaN.
struct CorrelationCurve {
  std::int64_t first_lag = 0;
  std::vector<double> values;

  std::int64_t last_lag() const noexcept {
    return first_lag + static_cast<std::int64_t>(values.size()) - 1;
  }
};

/// Correlates a[a_begin, a_begin + a_len) against b for every lag in
/// [center_lag - half_width, center_lag + half_width]. A lag l pairs a[k] with
/// b[k + l], so a positive peak lag means b lags a.
CorrelationCurve correlation_curve(const BitBuffer& a, std::size_t a_begin, std::size_t a_len,
                                   const BitBuffer& b, std::int64_t center_lag,
                                   std::int64_t half_width,
                                   CorrelationMethod method = CorrelationMethod::Automatic);

struct CorrelationPeak {
  std::int64_t lag = 0;      ///< integer argmax
  double refined_lag = 0.0;  ///< after three-point parabolic refinement
  double value = 0.0;        ///< interpolated maximum, clamped to [0, 1]
};

/// Argmax with ties resolved toward the smaller |lag|, refined by a parabola
/// through the peak and its two neighbours. Throws NoSyncLockError when the
/// curve has no finite value.
CorrelationPeak find_peak(const CorrelationCurve& curve);

/// Peak correlation below this is reported as "no sync lock".
inline constexpr double kMinSyncCorrelation = 0.2;

struct OffsetEstimate {
  double offset = 0.0;     ///< seconds by which trace b lags trace a (sample grid)
  double peak_corr = 0.0;  ///< interpolated normalized peak, [0, 1]
  double window_start = 0.0;
  double window_end = 0.0;  ///< analysed window of a, in a's local time
  std::int64_t peak_lag = 0;  ///< integer argmax in samples
  /// Median transition time of a (seconds on a's grid). Under relative drift
  /// the estimate is the offset at this instant.
  double anchor = 0.0;
};

struct OffsetOptions {
  double center = 0.0;  ///< seconds; the search spans center +- max_lag
  CorrelationMethod method = CorrelationMethod::Automatic;
};

/// Offsets are measured on the sample grids (index / sample_rate): an event at
/// sample k of a appears at sample k + offset * sample_rate of b.
OffsetEstimate estimate_offset(const SyncTrace& a, const SyncTrace& b, double max_lag,
                               const OffsetOptions& options = {});

struct WindowOffset {
  std::size_t index = 0;
  double anchor = 0.0;  ///< abscissa used in the fit, seconds on a's grid
  double window_start = 0.0;
  double window_end = 0.0;
  double offset = 0.0;
  double peak_corr = 0.0;
  std::int64_t peak_lag = 0;
};

struct DriftOptions {
  double max_lag = 0.06;  ///< search range of the first window, seconds
  /// Search half-width of later windows around the extrapolated offset,
  /// seconds; 0 selects 400 ppm of the hop plus 256 samples.
  double tracking_half_width = 0.0;
};

struct DriftEstimate {
  double offset0 = 0.0;    ///< seconds, offset at a's sample 0
  double drift_ppm = 0.0;  ///< relative rate of b's grid against a's, minus one
  std::vector<double> residuals;  ///< per-window offset minus fitted line
  std::vector<WindowOffset> windows;

  /// Fitted offset at time t (seconds on a's grid).
  double offset_at(double t) const noexcept { return offset0 + drift_ppm * 1e-6 * t; }
};

/// Windowed offset tracking followed by a least-squares line fit.
///
/// The level correlation of two square waves peaks at the median of the
/// per-transition lags, so under relative drift each window's offset belongs
/// to the median transition time of a inside the window, not to the window
/// centre. That median is used as the fit abscissa.
DriftEstimate estimate_drift(const SyncTrace& a, const SyncTrace& b, double window, double hop,
                             const DriftOptions& options = {});

/// Transition positions of a bit buffer in [begin, end): index i is listed
/// when bit i differs from bit i - 1.
std::vector<std::size_t> transitions(const BitBuffer& bits, std::size_t begin, std::size_t end);

}  // namespace umic
