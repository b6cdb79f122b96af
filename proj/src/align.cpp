#include "umic/align.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "umic/error.hpp"

namespace umic {

namespace {

AlignmentInfo estimate_alignment(const NodeRecording& ref, const NodeRecording& rec,
                                 const AlignOptions& options) {
  const double fs = ref.sample_rate();
  const double length = static_cast<double>(ref.size()) / fs;
  AlignmentInfo info;
  info.reference = ref.node_id;
  info.anchor_time = 0.5 * length;
  // Same window count as estimate_drift.
  const auto wlen = static_cast<std::size_t>(std::llround(options.window * fs));
  const auto hlen = static_cast<std::size_t>(std::llround(options.hop * fs));
  const bool tracking = wlen > 0 && hlen > 0 && ref.size() >= wlen && (ref.size() - wlen) / hlen >= 2;
  if (tracking) {
    DriftOptions drift_options;
    drift_options.max_lag = options.max_lag;
    const DriftEstimate d = estimate_drift(ref.sync, rec.sync, options.window, options.hop, drift_options);
    info.offset0 = d.offset0;
    info.drift_ppm = d.drift_ppm;
    info.peak_corr = 1.0;
    for (const auto& w : d.windows) info.peak_corr = std::min(info.peak_corr, w.peak_corr);
  } else {
    const double max_lag = std::min(options.max_lag, 0.5 * std::min(length, rec.sync.duration()));
    const OffsetEstimate e = estimate_offset(ref.sync, rec.sync, max_lag);
    info.offset0 = e.offset;
    info.peak_corr = e.peak_corr;
    info.anchor_time = e.anchor;
  }
  info.shift_samples = std::llround((info.offset0 + info.drift_ppm * 1e-6 * info.anchor_time) * fs);
  info.residual_samples = info.residual_at(info.anchor_time, fs);
  return info;
}

}  // namespace

std::vector<NodeRecording> align(const std::vector<NodeRecording>& recordings, NodeId reference,
                                 const AlignOptions& options) {
  if (recordings.empty()) throw ParameterError("align: no recordings");
  std::set<NodeId> ids;
  const NodeRecording* ref = nullptr;
  for (const auto& r : recordings) {
    r.validate();
    if (!ids.insert(r.node_id).second) {
      throw ParameterError("align: duplicate node id " + std::to_string(r.node_id));
    }
    if (r.node_id == reference) ref = &r;
  }
  if (ref == nullptr) {
    throw ParameterError("align: reference node " + std::to_string(reference) + " not found");
  }

  std::vector<AlignmentInfo> infos;
  infos.reserve(recordings.size());
  // Common window in reference indices: [lo, hi).
  std::int64_t lo = 0;
  auto hi = static_cast<std::int64_t>(ref->size());
  for (const auto& r : recordings) {
    AlignmentInfo info;
    info.reference = reference;
    info.peak_corr = 1.0;
    if (&r != ref) {
      if (r.sample_rate() != ref->sample_rate()) {
        throw ParameterError("align: node " + std::to_string(r.node_id) + " has a different sample rate");
      }
      info = estimate_alignment(*ref, r, options);
    } else {
      info.anchor_time = 0.5 * static_cast<double>(ref->size()) / ref->sample_rate();
    }
    lo = std::max(lo, -info.shift_samples);
    hi = std::min(hi, static_cast<std::int64_t>(r.size()) - info.shift_samples);
    infos.push_back(info);
  }
  if (hi <= lo) throw AlignmentError("align: recordings do not overlap after shifting");

  std::vector<NodeRecording> out;
  out.reserve(recordings.size());
  for (std::size_t i = 0; i < recordings.size(); ++i) {
    infos[i].ref_begin = static_cast<std::size_t>(lo);
    NodeRecording r = recordings[i].slice(static_cast<std::size_t>(lo + infos[i].shift_samples),
                                          static_cast<std::size_t>(hi - lo));
    r.alignment = infos[i];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace umic
