#include "umic/syncsig.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <limits>
#include <string>

#include "umic/error.hpp"
#include "umic/fft.hpp"
#include "umic/rng.hpp"

namespace umic {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_range(const char* name, double lo, double hi) {
  if (!(lo > 0.0) || !(hi >= lo) || !std::isfinite(hi)) {
    throw ParameterError(std::string("sync params: invalid ") + name + " range [" +
                         std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

// Smallest k in [0, n] whose local instant maps to a global time >= t.
std::size_t first_sample_at_or_after(const ClockModel& clock, double t0_local, std::size_t n,
                                     double t) {
  const double fs = clock.sample_rate;
  auto global_of = [&](std::int64_t k) {
    return to_global(clock, t0_local + static_cast<double>(k) / fs);
  };
  const double guess = std::ceil((to_local(clock, t) - t0_local) * fs);
  if (guess <= 0.0) {
    if (global_of(0) >= t) return 0;
  }
  const auto limit = static_cast<std::int64_t>(n);
  auto k = static_cast<std::int64_t>(std::clamp(guess, 0.0, static_cast<double>(n)));
  while (k > 0 && global_of(k - 1) >= t) --k;
  while (k < limit && global_of(k) < t) ++k;
  return static_cast<std::size_t>(k);
}

double pearson(std::int64_t n, std::int64_t sx, std::int64_t sy, std::int64_t sxy) {
  // Binary data: sum of squares equals the sum.
  const std::int64_t vx = n * sx - sx * sx;
  const std::int64_t vy = n * sy - sy * sy;
  if (vx <= 0 || vy <= 0) return 0.0;
  const std::int64_t num = n * sxy - sx * sy;
  return static_cast<double>(num) / std::sqrt(static_cast<double>(vx) * static_cast<double>(vy));
}

// Median transition of a[begin, end) in samples; the window centre when the
// window holds no transition.
double median_transition(const BitBuffer& a, std::size_t begin, std::size_t end) {
  const auto edges = transitions(a, begin, end);
  if (edges.empty()) return 0.5 * static_cast<double>(begin + end);
  const std::size_t m = edges.size();
  return m % 2 == 1 ? static_cast<double>(edges[m / 2])
                    : 0.5 * static_cast<double>(edges[m / 2 - 1] + edges[m / 2]);
}

}  // namespace

void SyncParams::validate() const {
  check_range("payload", min_payload, max_payload);
  check_range("gap", min_gap, max_gap);
  if (!(rx_latency >= 0.0) || !std::isfinite(rx_latency)) {
    throw ParameterError("sync params: rx_latency must be >= 0");
  }
}

SyncSchedule generate_schedule(std::uint64_t seed, double duration, const SyncParams& params) {
  params.validate();
  if (!(duration > params.min_payload + params.min_gap) || !std::isfinite(duration)) {
    throw ParameterError("generate_schedule: duration must exceed min_payload + min_gap");
  }
  SyncSchedule schedule;
  schedule.seed = seed;
  schedule.params = params;
  Rng rng(seed);
  double t = rng.uniform(params.min_gap, params.max_gap);
  while (t < duration) {
    const double d = rng.uniform(params.min_payload, params.max_payload);
    if (t + d > duration) break;
    schedule.events.push_back({t, d});
    t += d + rng.uniform(params.min_gap, params.max_gap);
  }
  return schedule;
}

SyncTrace render_trace(const SyncSchedule& schedule, const ClockModel& clock, double t0_local,
                       std::size_t n, std::uint64_t jitter_seed) {
  if (n == 0) throw ParameterError("render_trace: n must be >= 1");
  clock.validate();
  SyncTrace trace;
  trace.bits = BitBuffer(n);
  trace.sample_rate = clock.sample_rate;
  trace.start_local = t0_local;
  Rng rng(jitter_seed);
  const double latency = schedule.params.rx_latency;
  const double first_global = to_global(clock, t0_local);
  const double last_global = to_global(clock, t0_local + static_cast<double>(n) / clock.sample_rate);
  for (const SyncEvent& ev : schedule.events) {
    double start = ev.start + latency;
    double end = start + ev.duration;
    if (clock.jitter_std > 0.0) {
      start += rng.normal(0.0, clock.jitter_std);
      end += rng.normal(0.0, clock.jitter_std);
    }
    if (end <= first_global || start >= last_global || end <= start) continue;
    const std::size_t lo = first_sample_at_or_after(clock, t0_local, n, start);
    const std::size_t hi = first_sample_at_or_after(clock, t0_local, n, end);
    trace.bits.fill(lo, hi, true);
  }
  return trace;
}

CorrelationCurve correlation_curve(const BitBuffer& a, std::size_t a_begin, std::size_t a_len,
                                   const BitBuffer& b, std::int64_t center_lag,
                                   std::int64_t half_width, CorrelationMethod method) {
  if (a_len == 0 || a_begin + a_len > a.size()) {
    throw ParameterError("correlation_curve: window outside trace a");
  }
  if (half_width < 0) throw ParameterError("correlation_curve: negative half width");
  if (method == CorrelationMethod::Automatic) {
    method = a_len < kDirectCorrelationLimit ? CorrelationMethod::Direct
                                             : CorrelationMethod::Transform;
  }

  const auto nb = static_cast<std::int64_t>(b.size());
  const auto abeg = static_cast<std::int64_t>(a_begin);
  const auto alen = static_cast<std::int64_t>(a_len);
  const std::int64_t nlags = 2 * half_width + 1;
  const std::int64_t first_lag = center_lag - half_width;
  // y[j] = b[ybase + j] for j in [0, alen + 2 * half_width), zero outside b.
  const std::int64_t ybase = abeg + first_lag;
  const std::int64_t ylen = alen + 2 * half_width;

  thread_local std::vector<std::int64_t> pa;
  thread_local std::vector<std::int64_t> py;
  thread_local std::vector<double> buf;
  thread_local std::vector<std::complex<double>> xa;
  thread_local std::vector<std::complex<double>> yb;
  thread_local std::vector<std::complex<double>> acc;
  thread_local std::vector<double> r;
  pa.assign(static_cast<std::size_t>(alen) + 1, 0);
  for (std::int64_t k = 0; k < alen; ++k) {
    pa[static_cast<std::size_t>(k + 1)] =
        pa[static_cast<std::size_t>(k)] + (a.get(static_cast<std::size_t>(abeg + k)) ? 1 : 0);
  }
  auto b_at = [&](std::int64_t idx) -> bool {
    return idx >= 0 && idx < nb && b.get(static_cast<std::size_t>(idx));
  };
  py.assign(static_cast<std::size_t>(ylen) + 1, 0);
  for (std::int64_t j = 0; j < ylen; ++j) {
    py[static_cast<std::size_t>(j + 1)] = py[static_cast<std::size_t>(j)] + (b_at(ybase + j) ? 1 : 0);
  }

  std::vector<std::int64_t> sxy(static_cast<std::size_t>(nlags), 0);
  if (method == CorrelationMethod::Direct) {
    for (std::int64_t j = 0; j < nlags; ++j) {
      std::int64_t acc = 0;
      for (std::int64_t k = 0; k < alen; ++k) {
        if (a.get(static_cast<std::size_t>(abeg + k)) && b_at(ybase + k + j)) ++acc;
      }
      sxy[static_cast<std::size_t>(j)] = acc;
    }
  } else {
    // Overlap-save: a is cut into blocks of length blk, each correlated with
    // the matching stretch of y. Product spectra add up, so one inverse
    // transform serves all blocks. Narrow searches thus run on short,
    // cache-resident transforms; wide ones fall back to a single block.
    std::size_t m = std::bit_ceil(static_cast<std::size_t>(4 * nlags));
    m = std::max<std::size_t>(m, 4096);
    if (m >= static_cast<std::size_t>(ylen)) m = fast_fft_size(static_cast<std::size_t>(ylen));
    const auto blk = static_cast<std::int64_t>(m) - nlags + 1;
    const auto fft = real_fft(m);
    acc.assign(fft->bins(), std::complex<double>(0.0, 0.0));
    for (std::int64_t off = 0; off < alen; off += blk) {
      const std::int64_t xl = std::min(blk, alen - off);
      const std::int64_t yl = xl + nlags - 1;
      buf.resize(static_cast<std::size_t>(yl));
      for (std::int64_t k = 0; k < xl; ++k) {
        buf[static_cast<std::size_t>(k)] = a.get(static_cast<std::size_t>(abeg + off + k)) ? 1.0 : 0.0;
      }
      fft->forward(std::span<const double>(buf.data(), static_cast<std::size_t>(xl)), xa);
      for (std::int64_t j = 0; j < yl; ++j) {
        buf[static_cast<std::size_t>(j)] = b_at(ybase + off + j) ? 1.0 : 0.0;
      }
      fft->forward(std::span<const double>(buf.data(), static_cast<std::size_t>(yl)), yb);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += std::conj(xa[i]) * yb[i];
    }
    fft->inverse(acc, r);
    const double scale = 1.0 / static_cast<double>(m);
    // Products of 0/1 samples are integers; rounding recovers them exactly.
    for (std::int64_t j = 0; j < nlags; ++j) {
      sxy[static_cast<std::size_t>(j)] = std::llround(r[static_cast<std::size_t>(j)] * scale);
    }
  }

  CorrelationCurve curve;
  curve.first_lag = first_lag;
  curve.values.resize(static_cast<std::size_t>(nlags));
  const std::int64_t min_overlap = std::max<std::int64_t>(1, (alen + 1) / 2);
  for (std::int64_t j = 0; j < nlags; ++j) {
    const std::int64_t lag = first_lag + j;
    const std::int64_t lo = std::max(abeg, -lag);
    const std::int64_t hi = std::min(abeg + alen, nb - lag);
    const std::int64_t n = hi - lo;
    if (n < min_overlap) {
      curve.values[static_cast<std::size_t>(j)] = kNaN;
      continue;
    }
    const std::int64_t sx = pa[static_cast<std::size_t>(hi - abeg)] - pa[static_cast<std::size_t>(lo - abeg)];
    const std::int64_t sy = py[static_cast<std::size_t>(hi + lag - ybase)] -
                            py[static_cast<std::size_t>(lo + lag - ybase)];
    curve.values[static_cast<std::size_t>(j)] = pearson(n, sx, sy, sxy[static_cast<std::size_t>(j)]);
  }
  return curve;
}

CorrelationPeak find_peak(const CorrelationCurve& curve) {
  const auto& v = curve.values;
  std::size_t best = v.size();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) continue;
    if (best == v.size() || v[i] > v[best]) {
      best = i;
    } else if (v[i] == v[best]) {
      const std::int64_t li = curve.first_lag + static_cast<std::int64_t>(i);
      const std::int64_t lb = curve.first_lag + static_cast<std::int64_t>(best);
      if (std::llabs(li) < std::llabs(lb)) best = i;
    }
  }
  if (best == v.size()) throw NoSyncLockError("no sync lock: correlation undefined", 0.0);

  CorrelationPeak peak;
  peak.lag = curve.first_lag + static_cast<std::int64_t>(best);
  peak.refined_lag = static_cast<double>(peak.lag);
  peak.value = v[best];
  if (best > 0 && best + 1 < v.size() && std::isfinite(v[best - 1]) && std::isfinite(v[best + 1])) {
    const double ym = v[best - 1];
    const double y0 = v[best];
    const double yp = v[best + 1];
    const double denom = ym - 2.0 * y0 + yp;
    if (denom < 0.0) {
      const double p = std::clamp(0.5 * (ym - yp) / denom, -0.5, 0.5);
      peak.refined_lag += p;
      peak.value = y0 - 0.25 * (ym - yp) * p;
    }
  }
  peak.value = std::clamp(peak.value, 0.0, 1.0);
  return peak;
}

OffsetEstimate estimate_offset(const SyncTrace& a, const SyncTrace& b, double max_lag,
                               const OffsetOptions& options) {
  if (!(a.sample_rate > 0.0) || std::abs(a.sample_rate - b.sample_rate) > 1e-9 * a.sample_rate) {
    throw ParameterError("estimate_offset: traces must share one nominal sample rate");
  }
  if (!(max_lag >= 0.0)) throw ParameterError("estimate_offset: max_lag must be >= 0");
  const double fs = a.sample_rate;
  const auto half = static_cast<std::int64_t>(std::ceil(max_lag * fs));
  if (a.size() < static_cast<std::size_t>(2 * half) || b.size() < static_cast<std::size_t>(2 * half) ||
      a.size() == 0 || b.size() == 0) {
    throw ParameterError("estimate_offset: traces must be at least twice max_lag long");
  }
  const auto center = static_cast<std::int64_t>(std::llround(options.center * fs));
  const CorrelationCurve curve =
      correlation_curve(a.bits, 0, a.size(), b.bits, center, half, options.method);
  const CorrelationPeak peak = find_peak(curve);
  if (peak.value < kMinSyncCorrelation) {
    throw NoSyncLockError("no sync lock: peak correlation " + std::to_string(peak.value) +
                              " below " + std::to_string(kMinSyncCorrelation),
                          peak.value);
  }
  OffsetEstimate est;
  est.offset = peak.refined_lag / fs;
  est.peak_corr = peak.value;
  est.peak_lag = peak.lag;
  est.window_start = a.start_local;
  est.window_end = a.start_local + a.duration();
  est.anchor = median_transition(a.bits, 0, a.size()) / fs;
  return est;
}

std::vector<std::size_t> transitions(const BitBuffer& bits, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  end = std::min(end, bits.size());
  if (begin == 0) begin = 1;
  if (begin >= end) return out;
  bool prev = bits.get(begin - 1);
  for (std::size_t i = begin; i < end; ++i) {
    const bool cur = bits.get(i);
    if (cur != prev) out.push_back(i);
    prev = cur;
  }
  return out;
}

DriftEstimate estimate_drift(const SyncTrace& a, const SyncTrace& b, double window, double hop,
                             const DriftOptions& options) {
  if (std::abs(a.sample_rate - b.sample_rate) > 1e-9 * a.sample_rate) {
    throw ParameterError("estimate_drift: traces must share one nominal sample rate");
  }
  if (!(window > 0.0) || !(hop > 0.0)) {
    throw ParameterError("estimate_drift: window and hop must be positive");
  }
  const double fs = a.sample_rate;
  const auto wlen = static_cast<std::size_t>(std::llround(window * fs));
  const auto hlen = static_cast<std::size_t>(std::llround(hop * fs));
  if (wlen == 0 || hlen == 0) throw ParameterError("estimate_drift: window shorter than a sample");
  std::size_t nwin = 0;
  if (a.size() >= wlen) nwin = (a.size() - wlen) / hlen + 1;
  if (nwin < 3) throw ParameterError("estimate_drift: traces must hold at least three windows");

  const auto first_half = static_cast<std::int64_t>(std::ceil(options.max_lag * fs));
  const auto track_half =
      options.tracking_half_width > 0.0
          ? static_cast<std::int64_t>(std::ceil(options.tracking_half_width * fs))
          : static_cast<std::int64_t>(std::ceil(400e-6 * static_cast<double>(hlen))) + 256;

  DriftEstimate est;
  for (std::size_t w = 0; w < nwin; ++w) {
    const std::size_t begin = w * hlen;
    // Predict this window's lag from the windows seen so far.
    std::int64_t center = 0;
    std::int64_t half = first_half;
    if (w == 1) {
      center = est.windows[0].peak_lag;
      half = track_half;
    } else if (w >= 2) {
      const auto& p = est.windows[w - 1];
      const auto& q = est.windows[w - 2];
      const double slope = (p.offset - q.offset) / (p.anchor - q.anchor);
      const double mid = (static_cast<double>(begin) + 0.5 * static_cast<double>(wlen)) / fs;
      center = std::llround((p.offset + slope * (mid - p.anchor)) * fs);
      half = track_half;
    }
    const CorrelationCurve curve = correlation_curve(a.bits, begin, wlen, b.bits, center, half);
    CorrelationPeak peak;
    try {
      peak = find_peak(curve);
    } catch (const NoSyncLockError& e) {
      throw NoSyncLockError(std::string(e.what()) + " in window " + std::to_string(w), 0.0, w);
    }
    if (peak.value < kMinSyncCorrelation) {
      throw NoSyncLockError("no sync lock in window " + std::to_string(w) + ": peak correlation " +
                                std::to_string(peak.value),
                            peak.value, w);
    }
    WindowOffset wo;
    wo.index = w;
    wo.anchor = median_transition(a.bits, begin, begin + wlen) / fs;
    wo.window_start = static_cast<double>(begin) / fs;
    wo.window_end = static_cast<double>(begin + wlen) / fs;
    wo.offset = peak.refined_lag / fs;
    wo.peak_corr = peak.value;
    wo.peak_lag = peak.lag;
    est.windows.push_back(wo);
  }

  // Ordinary least squares of offset against anchor, centred for conditioning.
  double mx = 0.0;
  double my = 0.0;
  for (const auto& wo : est.windows) {
    mx += wo.anchor;
    my += wo.offset;
  }
  mx /= static_cast<double>(nwin);
  my /= static_cast<double>(nwin);
  double sxx = 0.0;
  double sxy = 0.0;
  for (const auto& wo : est.windows) {
    sxx += (wo.anchor - mx) * (wo.anchor - mx);
    sxy += (wo.anchor - mx) * (wo.offset - my);
  }
  const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
  est.drift_ppm = slope * 1e6;
  est.offset0 = my - slope * mx;
  for (const auto& wo : est.windows) est.residuals.push_back(wo.offset - est.offset_at(wo.anchor));
  return est;
}

}  // namespace umic
