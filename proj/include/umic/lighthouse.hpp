#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "umic/clock.hpp"
#include "umic/recording.hpp"

namespace umic {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

enum class StationId : std::uint8_t { LH1 = 0, LH2 = 1 };
enum class Axis : std::uint8_t { Horizontal = 0, Vertical = 1 };

const char* to_string(StationId id);
const char* to_string(Axis axis);

// Angle convention, shared by every function below. In the station frame +Z
// is the optical axis (sweep centre), +X is horizontal and +Y vertical. A
// point p in that frame has azimuth atan2(p.x, p.z) (horizontal sweep) and
// elevation atan2(p.y, p.z) (vertical sweep); the bearing is
// normalize(tan az, tan el, 1).

struct StationPose {
  StationId id = StationId::LH1;
  Vec3 position = Vec3::Zero();
  Mat3 orientation = Mat3::Identity();  ///< station -> world

  /// Throws ParameterError unless orientation is orthonormal with det +1
  /// (to 1e-9).
  void validate() const;
};

/// Orientation whose optical axis points from `from` to `target`, with the
/// station X axis horizontal (world Z is up).
Mat3 look_at(const Vec3& from, const Vec3& target);

struct SweepSlot {
  StationId station;
  Axis axis;
};

struct SweepTiming {
  double rotation_period = 1.0 / 60.0;
  double slot_period = 1.0 / 120.0;
  double flash_duration = 100e-6;
  double sweep_pulse = 10e-6;  ///< width of the photodiode pulse of a sweep
  std::vector<SweepSlot> cycle = {{StationId::LH1, Axis::Horizontal},
                                  {StationId::LH1, Axis::Vertical},
                                  {StationId::LH2, Axis::Horizontal},
                                  {StationId::LH2, Axis::Vertical}};

  double cycle_duration() const noexcept { return slot_period * static_cast<double>(cycle.size()); }
  /// Throws ParameterError unless every (station, axis) pair appears exactly
  /// once, durations are positive, and flash and sweep pulses fit a slot.
  void validate() const;
};

enum class Polarity : std::uint8_t { Rising, Falling };

struct Edge {
  double t_local = 0.0;
  Polarity polarity = Polarity::Rising;
};

struct EdgeTimestamps {
  std::vector<Edge> edges;
  double resolution = 1e-6;
};

/// Standard deviation (seconds) of the flash-to-sweep interval applied per
/// (station, axis), common to both edges of the sweep pulse. Indexed by
/// 2 * station + axis.
using SweepJitter = std::array<double, 4>;

/// Timestamp std of the flash-to-sweep interval that yields a given angle std
/// (radians): the angle is linear in the interval with slope 2 pi / period.
double sweep_jitter_for_angle_std(double angle_std, double rotation_period);

enum class Visibility : std::uint8_t {
  Throw,        ///< a node outside a station's sweep range is a GeometryError
  OmitSweeps,   ///< the station's flashes are still seen, its sweeps are not
};

struct SweepOptions {
  double resolution = 1e-6;   ///< quantization of edge times; 0 disables it
  SweepJitter sweep_jitter{};  ///< per (station, axis) interval jitter
  std::uint64_t seed = 0;
  double start_global = 0.0;  ///< global time of the first slot
  Visibility visibility = Visibility::Throw;
};

/// Station-frame azimuth and elevation of a world point; throws GeometryError
/// naming the station when the point is not in front of it.
std::array<double, 2> station_angles(const StationPose& pose, const Vec3& point);

/// Photodiode edges of n_cycles sweep cycles. Per slot: a flash pulse at the
/// slot start and a sweep pulse centred on slot start + period/4 + angle *
/// period / (2 pi). Global edge times go through the node clock, receive
/// clock.jitter_std per edge (and the sweep jitter per pulse), then are
/// quantized.
EdgeTimestamps simulate_sweeps(const std::array<StationPose, 2>& poses, const SweepTiming& timing,
                               const Vec3& node_position, const ClockModel& clock,
                               std::size_t n_cycles, const SweepOptions& options = {});

struct AngularMeasurement {
  StationId station = StationId::LH1;
  double azimuth = 0.0;    ///< radians, mean over cycles
  double elevation = 0.0;  ///< radians, mean over cycles
  std::size_t n_cycles = 0;
  double az_std = 0.0;  ///< sample standard deviation over cycles
  double el_std = 0.0;
  std::vector<double> azimuths;  ///< per cycle
  std::vector<double> elevations;
};

/// Pulses longer than the midpoint of flash and sweep widths are flashes;
/// each flash opens the next slot of the cycle, the first flash opening slot
/// 0. Angle per slot: 2 pi * dt / period - pi / 2 with dt from flash rise to
/// sweep-pulse centre. Returns one measurement per station (LH1, LH2).
///
/// Throws FramingError when edges do not alternate rising/falling, a slot
/// holds more than one sweep, or the slots do not form whole cycles (at least
/// one); DecodeError carrying the slot index when a slot has no sweep.
std::vector<AngularMeasurement> decode_angles(const EdgeTimestamps& edges, const SweepTiming& timing);

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();  ///< unit length
};

/// Throws ParameterError when |azimuth| or |elevation| >= pi / 2.
Ray ray_from_angles(const StationPose& pose, const AngularMeasurement& m);

struct NodeFix {
  Vec3 position = Vec3::Zero();
  double residual = 0.0;   ///< length of the shortest segment between the rays
  double condition = 0.0;  ///< |dA x dB|, sine of the angle between the rays
};

inline constexpr double kMinRayCondition = 1e-3;

/// Midpoint of the shortest segment between two rays (parameters >= 0).
/// Throws DegenerateGeometryError when the condition is below 1e-3.
NodeFix triangulate(const Ray& a, const Ray& b);

struct CalibrationResult {
  std::map<NodeId, NodeFix> fixes;
  std::map<NodeId, std::vector<AngularMeasurement>> angles;
  std::map<NodeId, std::string> errors;  ///< per-node failure messages
};

/// decode_angles -> ray_from_angles (x2) -> triangulate for each node; a
/// failing node is reported in `errors` and does not affect the others.
CalibrationResult self_calibrate(const std::map<NodeId, EdgeTimestamps>& edges,
                                 const std::array<StationPose, 2>& poses, const SweepTiming& timing);

}  // namespace umic
