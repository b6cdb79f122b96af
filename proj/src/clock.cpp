#include "umic/clock.hpp"

#include <cmath>
#include <string>

#include "umic/error.hpp"

namespace umic {

void ClockModel::validate(double max_drift_ppm) const {
  if (!(sample_rate > 0.0) || !std::isfinite(sample_rate)) {
    throw ParameterError("clock: sample_rate must be positive");
  }
  if (!std::isfinite(offset)) throw ParameterError("clock: offset must be finite");
  if (!(std::abs(drift_ppm) <= max_drift_ppm)) {
    throw ParameterError("clock: |drift| " + std::to_string(drift_ppm) + " ppm exceeds " +
                         std::to_string(max_drift_ppm) + " ppm");
  }
  if (!(jitter_std >= 0.0) || !std::isfinite(jitter_std)) {
    throw ParameterError("clock: jitter_std must be >= 0");
  }
}

double to_local(const ClockModel& clock, double t_global) noexcept {
  return clock.offset + clock.rate() * t_global;
}

double to_global(const ClockModel& clock, double t_local) noexcept {
  return (t_local - clock.offset) / clock.rate();
}

std::vector<double> sample_times(const ClockModel& clock, std::size_t n) {
  if (n == 0) throw ParameterError("sample_times: n must be >= 1");
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    out[k] = to_global(clock, static_cast<double>(k) / clock.sample_rate);
  }
  return out;
}

}  // namespace umic
