#include <doctest.h>

#include <cmath>
#include <vector>

#include "umic/error.hpp"
#include "umic/rng.hpp"
#include "umic/syncsig.hpp"

using namespace umic;

namespace {

constexpr double kFs = 4.5e6;

// Test-side oracle: Pearson correlation computed directly on doubles over the
// overlap of a[k] and b[k + lag].
double oracle_corr(const BitBuffer& a, const BitBuffer& b, long lag) {
  double n = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (long k = 0; k < static_cast<long>(a.size()); ++k) {
    const long j = k + lag;
    if (j < 0 || j >= static_cast<long>(b.size())) continue;
    const double x = a.get(static_cast<std::size_t>(k)) ? 1.0 : -1.0;
    const double y = b.get(static_cast<std::size_t>(j)) ? 1.0 : -1.0;
    n += 1;
    sx += x;
    sy += y;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
  }
  const double cov = sxy / n - (sx / n) * (sy / n);
  const double vx = sxx / n - (sx / n) * (sx / n);
  const double vy = syy / n - (sy / n) * (sy / n);
  if (vx <= 0 || vy <= 0) return 0.0;
  return cov / std::sqrt(vx * vy);
}

BitBuffer shifted(const BitBuffer& a, long k) {
  BitBuffer out(a.size());
  for (long i = 0; i < static_cast<long>(a.size()); ++i) {
    const long src = i - k;
    if (src >= 0 && src < static_cast<long>(a.size())) out.set(static_cast<std::size_t>(i), a.get(static_cast<std::size_t>(src)));
  }
  return out;
}

SyncTrace trace_of(const BitBuffer& bits) { return SyncTrace{bits, kFs, 0.0}; }

std::size_t n_of(double seconds) { return static_cast<std::size_t>(std::llround(seconds * kFs)); }

}  // namespace

TEST_CASE("generate_schedule: bounds, determinism, invariants") {
  const SyncParams params;  // payload [0.5, 4] ms, gap [0.5, 5] ms
  const auto s = generate_schedule(1, 1.0, params);
  // Event pitch lies in [1, 9] ms, so a 1 s schedule holds 110..1000 events.
  CHECK(s.events.size() >= 110);
  CHECK(s.events.size() <= 2000);

  const auto again = generate_schedule(1, 1.0, params);
  CHECK(s.events == again.events);

  for (std::size_t i = 0; i < s.events.size(); ++i) {
    const auto& e = s.events[i];
    CHECK(e.duration >= params.min_payload);
    CHECK(e.duration <= params.max_payload);
    CHECK(e.start >= 0.0);
    CHECK(e.start + e.duration <= 1.0);
    if (i > 0) {
      const auto& p = s.events[i - 1];
      const double gap = e.start - (p.start + p.duration);
      CHECK(gap >= params.min_gap - 1e-15);
      CHECK(gap <= params.max_gap + 1e-15);
    }
  }

  SyncParams bad = params;
  bad.min_payload = 5e-3;  // > max_payload
  CHECK_THROWS_AS(generate_schedule(1, 1.0, bad), ParameterError);
  bad = params;
  bad.min_gap = 0.0;
  CHECK_THROWS_AS(generate_schedule(1, 1.0, bad), ParameterError);
  CHECK_THROWS_AS(generate_schedule(1, 0.5e-3, params), ParameterError);
}

TEST_CASE("different seeds give uncorrelated schedules") {
  const SyncParams params;
  const ClockModel ideal;
  const auto a = render_trace(generate_schedule(1, 1.0, params), ideal, 0.0, n_of(1.0));
  const auto b = render_trace(generate_schedule(2, 1.0, params), ideal, 0.0, n_of(1.0));
  CHECK(std::abs(oracle_corr(a.bits, b.bits, 0)) < 0.5);
}

TEST_CASE("render_trace index arithmetic") {
  const ClockModel ideal;
  SyncSchedule empty;
  CHECK(render_trace(empty, ideal, 0.0, 1000).bits.count_ones() == 0);

  SyncSchedule one;
  one.events.push_back({1e-3, 1e-3});
  const auto t = render_trace(one, ideal, 0.0, 20000);
  CHECK(t.bits.count_ones() == 4500);
  CHECK_FALSE(t.bits.get(4499));
  CHECK(t.bits.get(4500));
  CHECK(t.bits.get(8999));
  CHECK_FALSE(t.bits.get(9000));

  // +10 us local offset moves every edge 45 samples later.
  const auto sched = generate_schedule(9, 0.2, SyncParams{});
  const auto a = render_trace(sched, ideal, 0.0, n_of(0.2));
  const auto b = render_trace(sched, ClockModel{10e-6, 0.0}, 0.0, n_of(0.2));
  CHECK(shifted(a.bits, 45) == b.bits);
}

TEST_CASE("estimate_offset examples") {
  const auto sched = generate_schedule(5, 1.0, SyncParams{});
  const auto a = render_trace(sched, ClockModel{}, 0.0, n_of(1.0));

  SUBCASE("identical traces") {
    const auto e = estimate_offset(a, a, 0.01);
    CHECK(e.offset == 0.0);
    CHECK(e.peak_corr == doctest::Approx(1.0));
  }
  SUBCASE("integer shift of 45 samples") {
    const auto e = estimate_offset(a, trace_of(shifted(a.bits, 45)), 0.01);
    CHECK(std::abs(e.offset - 10e-6) <= 0.25e-6);
    CHECK(e.peak_lag == 45);
  }
  SUBCASE("two renders with a 123.456 us clock offset and edge jitter") {
    ClockModel ca;
    ca.jitter_std = 1e-6;
    ClockModel cb = ca;
    cb.offset = 123.456e-6;
    const auto ta = render_trace(sched, ca, 0.0, n_of(1.0), 11);
    const auto tb = render_trace(sched, cb, 0.0, n_of(1.0), 12);
    const auto e = estimate_offset(ta, tb, 0.005);
    CHECK(std::abs(e.offset - 123.456e-6) < 1e-6);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(estimate_offset(a, a, 0.6), ParameterError);
    SyncTrace other = a;
    other.sample_rate = 4e6;
    CHECK_THROWS_AS(estimate_offset(a, other, 0.01), ParameterError);
  }
}

TEST_CASE("estimate_offset reports no sync lock for unrelated beacons") {
  const SyncParams params;
  const auto a = render_trace(generate_schedule(1, 2.0, params), ClockModel{}, 0.0, n_of(2.0));
  const auto b = render_trace(generate_schedule(2, 2.0, params), ClockModel{}, 0.0, n_of(2.0));
  CHECK_THROWS_AS(estimate_offset(a, b, 0.01), NoSyncLockError);

  SyncSchedule empty;
  const auto z = render_trace(empty, ClockModel{}, 0.0, n_of(0.1));
  CHECK_THROWS_AS(estimate_offset(z, z, 0.001), NoSyncLockError);
}

TEST_CASE("estimate_drift examples over 10 s") {
  const auto sched = generate_schedule(77, 10.5, SyncParams{});
  ClockModel ca;
  ca.jitter_std = 1e-6;
  const auto a = render_trace(sched, ca, 0.0, n_of(10.0), 1);

  SUBCASE("zero relative drift") {
    const auto b = render_trace(sched, ca, 0.0, n_of(10.0), 2);
    const auto e = estimate_drift(a, b, 0.25, 1.0);
    CHECK(std::abs(e.drift_ppm) < 0.5);
    CHECK(e.windows.size() == 10);
    CHECK(e.residuals.size() == 10);
  }
  SUBCASE("20 ppm relative drift") {
    ClockModel cb = ca;
    cb.drift_ppm = 20.0;
    const auto b = render_trace(sched, cb, 0.0, n_of(10.0), 3);
    const auto e = estimate_drift(a, b, 0.25, 1.0);
    CHECK(std::abs(e.drift_ppm - 20.0) < 1.0);
  }
  SUBCASE("5 ms offset, zero drift") {
    ClockModel cb = ca;
    cb.offset = 5e-3;
    const auto b = render_trace(sched, cb, 0.0, n_of(10.0), 4);
    const auto e = estimate_drift(a, b, 0.25, 1.0);
    CHECK(std::abs(e.offset0 - 5e-3) < 1e-6);
  }
}

TEST_CASE("estimate_drift preconditions and lock propagation") {
  const auto sched = generate_schedule(3, 1.0, SyncParams{});
  const auto a = render_trace(sched, ClockModel{}, 0.0, n_of(1.0));
  CHECK_THROWS_AS(estimate_drift(a, a, 0.4, 0.4), ParameterError);

  // Second half of b is silent: a later window loses lock and names itself.
  auto b = a;
  b.bits.fill(n_of(0.5), b.size(), false);
  try {
    estimate_drift(a, b, 0.1, 0.1, DriftOptions{0.01});
    FAIL("expected NoSyncLockError");
  } catch (const NoSyncLockError& e) {
    REQUIRE(e.window().has_value());
    CHECK(*e.window() >= 4);
  }
}

TEST_CASE("property: antisymmetry, shift equivariance, transitivity") {
  Rng rng(2024);
  const auto sched = generate_schedule(31, 1.0, SyncParams{});
  const auto a = render_trace(sched, ClockModel{}, 0.0, n_of(0.5));
  for (int i = 0; i < 5; ++i) {
    ClockModel cb;
    cb.offset = rng.uniform(-200e-6, 200e-6);
    cb.jitter_std = 0.5e-6;
    const auto b = render_trace(sched, cb, 0.0, n_of(0.5), 100 + static_cast<unsigned>(i));
    const double ab = estimate_offset(a, b, 0.002).offset;
    const double ba = estimate_offset(b, a, 0.002).offset;
    CHECK(std::abs(ab + ba) <= 1.0 / kFs);

    const long k = static_cast<long>(rng.uniform(-300.0, 300.0));
    const auto bk = trace_of(shifted(b.bits, k));
    const double abk = estimate_offset(a, bk, 0.002).offset;
    CHECK(std::abs((abk - ab) - static_cast<double>(k) / kFs) <= 0.25e-6);

    ClockModel cc;
    cc.offset = rng.uniform(-200e-6, 200e-6);
    cc.jitter_std = 0.5e-6;
    const auto c = render_trace(sched, cc, 0.0, n_of(0.5), 200 + static_cast<unsigned>(i));
    const double ac = estimate_offset(a, c, 0.002).offset;
    const double bc = estimate_offset(b, c, 0.002).offset;
    CHECK(std::abs(ac - (ab + bc)) < 2e-6);
  }
}

TEST_CASE("property: transform correlation matches direct correlation exactly") {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform(64.0, 4096.0));
    BitBuffer a(n);
    BitBuffer b(n);
    // Random runs so the curve has structure.
    bool va = false;
    bool vb = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.uniform() < 0.05) va = !va;
      if (rng.uniform() < 0.05) vb = !vb;
      a.set(i, va);
      b.set(i, rng.uniform() < 0.7 ? va : vb);
    }
    const auto half = static_cast<std::int64_t>(rng.uniform(1.0, static_cast<double>(n) / 4));
    const auto fast = correlation_curve(a, 0, n, b, 0, half, CorrelationMethod::Transform);
    const auto direct = correlation_curve(a, 0, n, b, 0, half, CorrelationMethod::Direct);
    REQUIRE(fast.values.size() == direct.values.size());
    bool same = true;
    for (std::size_t i = 0; i < fast.values.size(); ++i) {
      const double x = fast.values[i];
      const double y = direct.values[i];
      same = same && ((std::isnan(x) && std::isnan(y)) || x == y);
    }
    CHECK(same);
    CHECK(find_peak(fast).lag == find_peak(direct).lag);

    // And both agree with the independent double-precision oracle.
    for (std::int64_t lag = -half; lag <= half; lag += std::max<std::int64_t>(1, half / 7)) {
      const double v = direct.values[static_cast<std::size_t>(lag + half)];
      if (std::isnan(v)) continue;
      CHECK(std::abs(v - oracle_corr(a, b, static_cast<long>(lag))) < 1e-9);
    }
  }
}

TEST_CASE("property: blocked transform over long windows matches direct correlation") {
  // Narrow searches over long windows split the transform into blocks.
  Rng rng(77);
  const auto sched = generate_schedule(12, 0.05, SyncParams{});
  for (int trial = 0; trial < 5; ++trial) {
    const ClockModel ca{rng.uniform(-1e-4, 1e-4), rng.uniform(-50.0, 50.0), 4.5e6, 1e-6};
    const ClockModel cb{rng.uniform(-1e-4, 1e-4), rng.uniform(-50.0, 50.0), 4.5e6, 1e-6};
    const auto a = render_trace(sched, ca, 0.0, 60000, derive_seed(5, trial));
    const auto b = render_trace(sched, cb, 0.0, 60000, derive_seed(6, trial));
    const auto begin = static_cast<std::size_t>(rng.uniform(0.0, 5000.0));
    const auto center = static_cast<std::int64_t>(rng.uniform(-300.0, 300.0));
    const auto half = static_cast<std::int64_t>(rng.uniform(20.0, 200.0));
    const auto fast = correlation_curve(a.bits, begin, 40000, b.bits, center, half,
                                        CorrelationMethod::Transform);
    const auto direct = correlation_curve(a.bits, begin, 40000, b.bits, center, half,
                                          CorrelationMethod::Direct);
    REQUIRE(fast.values.size() == direct.values.size());
    bool same = true;
    for (std::size_t i = 0; i < fast.values.size(); ++i) {
      same = same && fast.values[i] == direct.values[i];
    }
    CHECK(same);
  }
}

TEST_CASE("property: autocorrelation sidelobes of a 1 s schedule stay below 0.5") {
  const auto sched = generate_schedule(4, 1.0, SyncParams{});
  const auto a = render_trace(sched, ClockModel{}, 0.0, n_of(1.0));
  const std::int64_t half = 100000;
  const auto curve = correlation_curve(a.bits, 0, a.size(), a.bits, 0, half);
  // A sidelobe is a local maximum of the curve away from the main peak; the
  // main lobe of a square wave decreases monotonically from lag 0.
  double worst = -1.0;
  for (std::size_t i = 1; i + 1 < curve.values.size(); ++i) {
    const std::int64_t lag = curve.first_lag + static_cast<std::int64_t>(i);
    if (std::llabs(lag) <= 10) continue;
    const double v = curve.values[i];
    if (v >= curve.values[i - 1] && v > curve.values[i + 1]) worst = std::max(worst, v);
  }
  CHECK(worst < 0.5);
  CHECK(worst > -1.0);
}
