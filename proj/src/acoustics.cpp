#include "umic/acoustics.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <set>

#include "umic/error.hpp"
#include "umic/rng.hpp"

namespace umic {

namespace {

constexpr int kPhases = 4096;
constexpr int kTaps = 2 * kFractionalDelayHalfWidth;
constexpr double kMinDistance = 0.1;

// table[p][j]: weight of x[floor(pos) - 7 + j] when frac(pos) = p / kPhases.
const std::vector<std::array<double, kTaps>>& kernel_table() {
  static const auto table = [] {
    std::vector<std::array<double, kTaps>> t(kPhases + 1);
    const double beta = 8.0;
    const double i0b = std::cyl_bessel_i(0.0, beta);
    for (int p = 0; p <= kPhases; ++p) {
      const double frac = static_cast<double>(p) / kPhases;
      for (int j = 0; j < kTaps; ++j) {
        const double x = static_cast<double>(j - (kFractionalDelayHalfWidth - 1)) - frac;
        const double sinc = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
        const double u = x / kFractionalDelayHalfWidth;
        const double w = std::abs(u) >= 1.0 ? 0.0 : std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - u * u)) / i0b;
        t[static_cast<std::size_t>(p)][static_cast<std::size_t>(j)] = sinc * w;
      }
    }
    // Exact identity at integer positions.
    t[0].fill(0.0);
    t[0][kFractionalDelayHalfWidth - 1] = 1.0;
    t[kPhases].fill(0.0);
    t[kPhases][kFractionalDelayHalfWidth] = 1.0;
    return t;
  }();
  return table;
}

}  // namespace

void Environment::validate() const {
  if (!(temperature >= -30.0 && temperature <= 60.0)) throw ParameterError("environment: temperature outside [-30, 60] C");
  if (!(relative_humidity >= 0.0 && relative_humidity <= 100.0)) throw ParameterError("environment: humidity outside [0, 100] %");
  if (!(pressure >= 5e4 && pressure <= 1.1e5)) throw ParameterError("environment: pressure outside [5e4, 1.1e5] Pa");
}

double speed_of_sound(const Environment& env) {
  env.validate();
  return 331.3 * std::sqrt(1.0 + env.temperature / 273.15);
}

double interpolate(const std::vector<double>& x, double pos) {
  const auto n = static_cast<std::int64_t>(x.size());
  const double fl = std::floor(pos);
  const auto base = static_cast<std::int64_t>(fl) - (kFractionalDelayHalfWidth - 1);
  if (base + kTaps <= 0 || base >= n) return 0.0;
  const auto phase = static_cast<std::size_t>(std::llround((pos - fl) * kPhases));
  const auto& w = kernel_table()[phase];
  double acc = 0.0;
  for (int j = 0; j < kTaps; ++j) {
    const std::int64_t k = base + j;
    if (k >= 0 && k < n) acc += w[static_cast<std::size_t>(j)] * x[static_cast<std::size_t>(k)];
  }
  return acc;
}

PcmStream propagate(const PcmStream& signal, const Vec3& src, const Vec3& dst, double c) {
  if (!(c > 0.0)) throw ParameterError("propagate: speed of sound must be positive");
  const double dist = (dst - src).norm();
  if (!(dist > 0.0)) throw ParameterError("propagate: source and destination coincide");
  const double delay = dist / c * signal.sample_rate;
  const double gain = 1.0 / std::max(dist, kMinDistance);
  PcmStream out;
  out.sample_rate = signal.sample_rate;
  out.samples.resize(signal.size());
  const double rounded = std::round(delay);
  if (std::abs(delay - rounded) < 1e-9) {
    const auto shift = static_cast<std::size_t>(rounded);
    for (std::size_t i = shift; i < out.size(); ++i) out.samples[i] = gain * signal.samples[i - shift];
    return out;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.samples[i] = gain * interpolate(signal.samples, static_cast<double>(i) - delay);
  }
  return out;
}

PcmStream linear_chirp(double f0, double f1, double duration, double amplitude, double sample_rate) {
  if (!(sample_rate > 0.0) || !(duration > 0.0) || !(std::abs(amplitude) <= 1.0)) {
    throw ParameterError("linear_chirp: invalid parameters");
  }
  if (!(std::max(f0, f1) < sample_rate / 2)) throw ParameterError("linear_chirp: frequency above Nyquist");
  const auto n = static_cast<std::size_t>(std::llround(duration * sample_rate));
  if (n < 2) throw ParameterError("linear_chirp: shorter than two samples");
  PcmStream out;
  out.sample_rate = sample_rate;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
    out.samples[i] = amplitude * w * std::sin(2.0 * std::numbers::pi * (f0 * t + 0.5 * (f1 - f0) / duration * t * t));
  }
  return out;
}

void Scene::validate() const {
  if (nodes.empty()) throw ParameterError("scene: no nodes");
  if (!source_position.allFinite()) throw ParameterError("scene: source position not finite");
  if (!(recording_length > 0.0) || !std::isfinite(recording_length)) {
    throw ParameterError("scene: recording_length must be positive");
  }
  environment.validate();
  std::set<NodeId> ids;
  for (const auto& n : nodes) {
    if (!ids.insert(n.id).second) throw ParameterError("scene: duplicate node id " + std::to_string(n.id));
    if (!n.position.allFinite()) throw ParameterError("scene: node " + std::to_string(n.id) + " position not finite");
  }
  if (!source_signal.samples.empty()) {
    source_signal.validate();
    if (source_start < 0.0 || source_start + source_signal.duration() > recording_length) {
      throw ParameterError("scene: source signal does not fit within recording_length");
    }
  }
}

SynthesisError::SynthesisError(std::map<NodeId, std::string> errors)
    : Error([&] {
        std::string msg = "synthesis failed for";
        for (const auto& [id, what] : errors) msg += " node " + std::to_string(id) + " (" + what + ")";
        return msg;
      }()),
      errors_(std::move(errors)) {}

std::vector<NodeRecording> synthesize(const Scene& scene, const SyncSchedule& schedule,
                                      std::uint64_t seed) {
  scene.validate();
  const double c = speed_of_sound(scene.environment);
  std::vector<NodeRecording> out;
  std::map<NodeId, std::string> errors;
  for (const auto& node : scene.nodes) {
    try {
      node.clock.validate();
      const double fs = node.clock.sample_rate;
      const auto n = static_cast<std::size_t>(std::llround(scene.recording_length * fs));
      if (n == 0) throw ParameterError("recording shorter than one sample");
      NodeRecording rec;
      rec.node_id = node.id;
      rec.start_local = node.start_local;
      // The node's free-running sample counter, started at local time 0.
      rec.first_sample_index = static_cast<std::uint64_t>(std::llround(node.start_local * fs));
      rec.clock_truth = node.clock;
      rec.sync = render_trace(schedule, node.clock, node.start_local, n, derive_seed(seed, node.id));
      rec.mic.sample_rate = fs;
      rec.mic.bits = BitBuffer(n);

      const double dist = (node.position - scene.source_position).norm();
      const double delay = dist / c;
      const double gain = 1.0 / std::max(dist, kMinDistance);
      const double src_fs = scene.source_signal.sample_rate;
      const auto src_len = static_cast<double>(scene.source_signal.size());
      SigmaDeltaModulator sdm;
      for (std::size_t k = 0; k < n; ++k) {
        const double g = to_global(node.clock, node.start_local + static_cast<double>(k) / fs);
        const double pos = (g - delay - scene.source_start) * src_fs;
        double v = 0.0;
        if (pos > -kFractionalDelayHalfWidth && pos < src_len + kFractionalDelayHalfWidth) {
          v = gain * interpolate(scene.source_signal.samples, pos);
        }
        if (!(std::abs(v) <= 1.0)) {
          throw RangeError("microphone overload: level " + std::to_string(v) + " at sample " + std::to_string(k));
        }
        rec.mic.bits.set(k, sdm.step(v));
      }
      rec.validate();
      out.push_back(std::move(rec));
    } catch (const Error& e) {
      errors[node.id] = e.what();
    }
  }
  if (!errors.empty()) throw SynthesisError(std::move(errors));
  return out;
}

}  // namespace umic
