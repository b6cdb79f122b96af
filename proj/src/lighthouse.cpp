#include "umic/lighthouse.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <utility>

#include "umic/error.hpp"
#include "umic/rng.hpp"

namespace umic {

namespace {

constexpr double kPi = std::numbers::pi;

std::size_t jitter_index(StationId s, Axis a) {
  return 2 * static_cast<std::size_t>(s) + static_cast<std::size_t>(a);
}

const StationPose& pose_of(const std::array<StationPose, 2>& poses, StationId id) {
  for (const auto& p : poses) {
    if (p.id == id) return p;
  }
  throw ParameterError(std::string("no pose for station ") + to_string(id));
}

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

const char* to_string(StationId id) { return id == StationId::LH1 ? "LH1" : "LH2"; }
const char* to_string(Axis axis) { return axis == Axis::Horizontal ? "horizontal" : "vertical"; }

void StationPose::validate() const {
  const Mat3 gram = orientation.transpose() * orientation;
  if ((gram - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
      std::abs(orientation.determinant() - 1.0) > 1e-9) {
    throw ParameterError(std::string("station ") + to_string(id) +
                         ": orientation is not a proper rotation");
  }
  if (!position.allFinite()) throw ParameterError(std::string("station ") + to_string(id) + ": position not finite");
}

Mat3 look_at(const Vec3& from, const Vec3& target) {
  const Vec3 d = target - from;
  if (!(d.norm() > 0.0)) throw ParameterError("look_at: target coincides with position");
  const Vec3 z = d.normalized();
  const Vec3 up = Vec3::UnitZ();
  const Vec3 side = up.cross(z);
  if (side.norm() < 1e-9) throw ParameterError("look_at: optical axis is vertical");
  const Vec3 x = side.normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return r;
}

void SweepTiming::validate() const {
  if (!(rotation_period > 0.0) || !(slot_period > 0.0) || !(flash_duration > 0.0) ||
      !(sweep_pulse > 0.0)) {
    throw ParameterError("sweep timing: durations must be positive");
  }
  if (!(sweep_pulse < flash_duration)) {
    throw ParameterError("sweep timing: flash must be longer than a sweep pulse");
  }
  if (!(flash_duration + 2.0 * sweep_pulse < slot_period)) {
    throw ParameterError("sweep timing: pulses do not fit a slot");
  }
  std::set<std::pair<StationId, Axis>> seen;
  for (const auto& s : cycle) {
    if (!seen.insert({s.station, s.axis}).second) {
      throw ParameterError("sweep timing: cycle repeats a (station, axis) pair");
    }
  }
  if (seen.size() != 4) throw ParameterError("sweep timing: cycle must cover all four (station, axis) pairs");
}

double sweep_jitter_for_angle_std(double angle_std, double rotation_period) {
  return angle_std * rotation_period / (2.0 * kPi);
}

std::array<double, 2> station_angles(const StationPose& pose, const Vec3& point) {
  const Vec3 p = pose.orientation.transpose() * (point - pose.position);
  if (!(p.z() > 0.0)) {
    throw GeometryError(std::string("node is behind station ") + to_string(pose.id));
  }
  return {std::atan2(p.x(), p.z()), std::atan2(p.y(), p.z())};
}

EdgeTimestamps simulate_sweeps(const std::array<StationPose, 2>& poses, const SweepTiming& timing,
                               const Vec3& node_position, const ClockModel& clock,
                               std::size_t n_cycles, const SweepOptions& options) {
  timing.validate();
  clock.validate();
  if (n_cycles == 0) throw ParameterError("simulate_sweeps: n_cycles must be >= 1");
  if (!(options.resolution >= 0.0)) throw ParameterError("simulate_sweeps: negative resolution");
  for (const auto& p : poses) p.validate();

  // Sweep centre offset from slot start per (station, axis); NaN = not seen.
  std::array<double, 4> centre{};
  centre.fill(std::nan(""));
  for (StationId s : {StationId::LH1, StationId::LH2}) {
    const StationPose& pose = pose_of(poses, s);
    std::array<double, 2> ang{};
    try {
      ang = station_angles(pose, node_position);
    } catch (const GeometryError&) {
      if (options.visibility == Visibility::Throw) throw;
      continue;
    }
    for (Axis a : {Axis::Horizontal, Axis::Vertical}) {
      const double dt = timing.rotation_period / 4.0 + ang[static_cast<std::size_t>(a)] * timing.rotation_period / (2.0 * kPi);
      const double lo = timing.flash_duration + timing.sweep_pulse;
      const double hi = timing.slot_period - timing.sweep_pulse;
      if (dt < lo || dt > hi) {
        if (options.visibility == Visibility::Throw) {
          throw GeometryError(std::string("node is outside the ") + to_string(a) +
                              " sweep range of station " + to_string(s));
        }
        continue;
      }
      centre[jitter_index(s, a)] = dt;
    }
  }

  Rng rng(options.seed);
  EdgeTimestamps out;
  out.resolution = options.resolution;
  out.edges.reserve(n_cycles * timing.cycle.size() * 4);
  auto emit = [&](double t_global, Polarity pol) {
    double t = to_local(clock, t_global);
    if (clock.jitter_std > 0.0) t += rng.normal(0.0, clock.jitter_std);
    if (options.resolution > 0.0) t = std::round(t / options.resolution) * options.resolution;
    out.edges.push_back({t, pol});
  };
  const std::size_t nslots = timing.cycle.size();
  for (std::size_t c = 0; c < n_cycles; ++c) {
    for (std::size_t j = 0; j < nslots; ++j) {
      const double start = options.start_global + static_cast<double>(c * nslots + j) * timing.slot_period;
      emit(start, Polarity::Rising);
      emit(start + timing.flash_duration, Polarity::Falling);
      const std::size_t k = jitter_index(timing.cycle[j].station, timing.cycle[j].axis);
      if (std::isnan(centre[k])) continue;
      double mid = start + centre[k];
      if (options.sweep_jitter[k] > 0.0) mid += rng.normal(0.0, options.sweep_jitter[k]);
      emit(mid - timing.sweep_pulse / 2.0, Polarity::Rising);
      emit(mid + timing.sweep_pulse / 2.0, Polarity::Falling);
    }
  }
  for (std::size_t i = 1; i < out.edges.size(); ++i) {
    if (!(out.edges[i].t_local > out.edges[i - 1].t_local)) {
      throw ParameterError("simulate_sweeps: edges collide after jitter and quantization");
    }
  }
  return out;
}

std::vector<AngularMeasurement> decode_angles(const EdgeTimestamps& edges, const SweepTiming& timing) {
  timing.validate();
  const auto& e = edges.edges;
  if (e.size() % 2 != 0) throw FramingError("decode_angles: odd number of edges");
  const double threshold = 0.5 * (timing.flash_duration + timing.sweep_pulse);

  struct Slot {
    double flash = 0.0;
    std::vector<double> sweeps;
  };
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < e.size(); i += 2) {
    if (e[i].polarity != Polarity::Rising || e[i + 1].polarity != Polarity::Falling) {
      throw FramingError("decode_angles: edge polarities do not alternate at edge " + std::to_string(i));
    }
    const double width = e[i + 1].t_local - e[i].t_local;
    if (width >= threshold) {
      slots.push_back({e[i].t_local, {}});
    } else {
      if (slots.empty()) throw FramingError("decode_angles: sweep pulse before the first flash");
      slots.back().sweeps.push_back(0.5 * (e[i].t_local + e[i + 1].t_local));
    }
  }
  const std::size_t nslots = timing.cycle.size();
  if (slots.empty() || slots.size() % nslots != 0) {
    throw FramingError("decode_angles: " + std::to_string(slots.size()) +
                       " slots do not form whole cycles of " + std::to_string(nslots));
  }

  std::array<std::vector<double>, 4> per_axis;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].sweeps.empty()) {
      throw DecodeError("decode_angles: no sweep in slot " + std::to_string(i), i);
    }
    if (slots[i].sweeps.size() > 1) {
      throw FramingError("decode_angles: " + std::to_string(slots[i].sweeps.size()) +
                         " sweeps in slot " + std::to_string(i));
    }
    const double dt = slots[i].sweeps[0] - slots[i].flash;
    const double angle = 2.0 * kPi * dt / timing.rotation_period - kPi / 2.0;
    const auto& s = timing.cycle[i % nslots];
    per_axis[jitter_index(s.station, s.axis)].push_back(angle);
  }

  std::vector<AngularMeasurement> out;
  for (StationId s : {StationId::LH1, StationId::LH2}) {
    AngularMeasurement m;
    m.station = s;
    m.azimuths = per_axis[jitter_index(s, Axis::Horizontal)];
    m.elevations = per_axis[jitter_index(s, Axis::Vertical)];
    m.n_cycles = m.azimuths.size();
    m.azimuth = mean_of(m.azimuths);
    m.elevation = mean_of(m.elevations);
    m.az_std = sample_std(m.azimuths, m.azimuth);
    m.el_std = sample_std(m.elevations, m.elevation);
    out.push_back(std::move(m));
  }
  return out;
}

Ray ray_from_angles(const StationPose& pose, const AngularMeasurement& m) {
  if (!(std::abs(m.azimuth) < kPi / 2) || !(std::abs(m.elevation) < kPi / 2)) {
    throw ParameterError("ray_from_angles: angle outside (-pi/2, pi/2)");
  }
  Ray r;
  r.origin = pose.position;
  r.direction = pose.orientation * Vec3(std::tan(m.azimuth), std::tan(m.elevation), 1.0).normalized();
  return r;
}

NodeFix triangulate(const Ray& a, const Ray& b) {
  const Vec3 u = a.direction.normalized();
  const Vec3 v = b.direction.normalized();
  const double condition = u.cross(v).norm();
  if (!(condition >= kMinRayCondition)) {
    throw DegenerateGeometryError("triangulate: rays are nearly parallel (condition " +
                                      std::to_string(condition) + ")",
                                  condition);
  }
  const Vec3 w0 = a.origin - b.origin;
  const double uv = u.dot(v);
  const double d = u.dot(w0);
  const double e = v.dot(w0);
  const double denom = 1.0 - uv * uv;
  double s = (uv * e - d) / denom;
  double t = (e - uv * d) / denom;
  if (s < 0.0 || t < 0.0) {
    // The squared distance is convex, so the constrained minimum lies on an
    // edge of the quadrant: try both edges and keep the closer pair.
    const double t_edge = std::max(0.0, e);   // s = 0
    const double s_edge = std::max(0.0, -d);  // t = 0
    const double d1 = (a.origin - (b.origin + t_edge * v)).squaredNorm();
    const double d2 = ((a.origin + s_edge * u) - b.origin).squaredNorm();
    if (d1 <= d2) {
      s = 0.0;
      t = t_edge;
    } else {
      s = s_edge;
      t = 0.0;
    }
  }
  const Vec3 p = a.origin + s * u;
  const Vec3 q = b.origin + t * v;
  NodeFix fix;
  fix.position = 0.5 * (p + q);
  fix.residual = (p - q).norm();
  fix.condition = std::min(1.0, condition);
  return fix;
}

CalibrationResult self_calibrate(const std::map<NodeId, EdgeTimestamps>& edges,
                                 const std::array<StationPose, 2>& poses, const SweepTiming& timing) {
  CalibrationResult result;
  for (const auto& [id, e] : edges) {
    try {
      auto angles = decode_angles(e, timing);
      const Ray ra = ray_from_angles(pose_of(poses, StationId::LH1), angles[0]);
      const Ray rb = ray_from_angles(pose_of(poses, StationId::LH2), angles[1]);
      result.fixes[id] = triangulate(ra, rb);
      result.angles[id] = std::move(angles);
    } catch (const Error& err) {
      result.errors[id] = err.what();
    }
  }
  return result;
}

}  // namespace umic
