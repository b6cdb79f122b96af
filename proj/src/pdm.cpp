#include "umic/pdm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>

#include "umic/error.hpp"

namespace umic {

namespace {

constexpr double kQ24 = 16777216.0;  // 2^24

void check_decimation(std::size_t r) {
  if (r != 8 && r != 16 && r != 32) {
    throw ParameterError("unsupported decimation " + std::to_string(r) + " (use 8, 16 or 32)");
  }
}

double cic_response(double nu, std::size_t r) {
  // nu in cycles per PCM sample.
  if (nu == 0.0) return 1.0;
  const double rr = static_cast<double>(r);
  const double h = std::sin(std::numbers::pi * nu) / (rr * std::sin(std::numbers::pi * nu / rr));
  return h * h * h * h;
}

}  // namespace

void PdmStream::validate() const {
  if (bits.empty()) throw ParameterError("PDM stream is empty");
  if (!(sample_rate > 0.0)) throw ParameterError("PDM sample rate must be positive");
}

void PcmStream::validate() const {
  if (!(sample_rate > 0.0)) throw ParameterError("PCM sample rate must be positive");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!(std::abs(samples[i]) <= 1.0)) {
      throw RangeError("PCM sample " + std::to_string(i) + " outside [-1, 1]");
    }
  }
}

bool SigmaDeltaModulator::step(double x) {
  if (!(std::abs(x) <= 1.0)) throw RangeError("modulator input outside [-1, 1]");
  const double y = i2_ >= 0.0 ? 1.0 : -1.0;
  i1_ += x - y;
  i2_ += i1_ - y;
  return y > 0.0;
}

PdmStream pdm_modulate(const PcmStream& pcm, std::size_t oversample) {
  if (oversample < 8) throw ParameterError("pdm_modulate: oversample must be >= 8");
  pcm.validate();
  PdmStream out;
  out.sample_rate = pcm.sample_rate * static_cast<double>(oversample);
  out.bits = BitBuffer(pcm.size() * oversample);
  SigmaDeltaModulator sdm;
  std::size_t k = 0;
  for (double x : pcm.samples) {
    for (std::size_t j = 0; j < oversample; ++j, ++k) out.bits.set(k, sdm.step(x));
  }
  return out;
}

std::size_t cic_phase(std::size_t decimation) {
  check_decimation(decimation);
  // Places the round trip 2(R-1) - phase + (R+1)/2 just above 2R bits, so
  // the CIC output lands within 1/(2R) of the PCM grid.
  return (5 * decimation / 2 - 2) % decimation;
}

std::size_t demod_delay_bits(std::size_t decimation) {
  const std::size_t phase = cic_phase(decimation);
  return kCicStages * (decimation - 1) / 2 - phase + (kCompensationTaps - 1) / 2 * decimation;
}

double round_trip_delay(std::size_t decimation) {
  const auto r = static_cast<double>(decimation);
  return (static_cast<double>(demod_delay_bits(decimation)) + (r + 1.0) / 2.0) / r;
}

std::vector<double> compensation_taps(std::size_t decimation) {
  check_decimation(decimation);
  const std::size_t n = kCompensationTaps;
  const double mid = static_cast<double>(n - 1) / 2.0;
  const double beta = 6.0;
  const int grid = 8192;
  const double dnu = 0.5 / grid;
  std::vector<double> h(n, 0.0);
  for (int g = 0; g < grid; ++g) {
    const double nu = (g + 0.5) * dnu;
    if (nu > kCompensationPassband) break;
    const double d = 1.0 / cic_response(nu, decimation);
    for (std::size_t i = 0; i < n; ++i) {
      h[i] += 2.0 * d * std::cos(2.0 * std::numbers::pi * nu * (static_cast<double>(i) - mid)) * dnu;
    }
  }
  const double i0b = std::cyl_bessel_i(0.0, beta);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(i) / mid - 1.0;
    h[i] *= std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - u * u))) / i0b;
    sum += h[i];
  }
  for (double& v : h) v /= sum;
  return h;
}

PdmDecimator::PdmDecimator(std::size_t decimation)
    : r_(decimation), phase_(cic_phase(decimation)), shift_(0),
      taps_(compensation_taps(decimation)), history_(kCompensationTaps, 0.0) {
  while ((std::size_t{1} << shift_) < r_) ++shift_;
  shift_ *= static_cast<int>(kCicStages);
}

void PdmDecimator::feed(std::int64_t q, std::vector<double>& out) {
  // Integrators wrap modulo 2^64; the combs undo the wrap exactly.
  std::uint64_t v = static_cast<std::uint64_t>(q);
  for (auto& acc : integ_) {
    acc += v;
    v = acc;
  }
  const bool emit = count_ % r_ == phase_;
  ++count_;
  if (!emit) return;
  for (auto& prev : comb_) {
    const std::uint64_t cur = v;
    v -= prev;
    prev = cur;
  }
  const double cic = static_cast<double>(static_cast<std::int64_t>(v)) /
                     (kQ24 * static_cast<double>(std::uint64_t{1} << shift_));
  head_ = head_ == 0 ? history_.size() - 1 : head_ - 1;
  history_[head_] = cic;
  double acc = 0.0;
  std::size_t idx = head_;
  for (double t : taps_) {
    acc += t * history_[idx];
    if (++idx == history_.size()) idx = 0;
  }
  out.push_back(std::clamp(acc, -1.0, 1.0));
}

void PdmDecimator::push(const BitBuffer& bits, std::size_t begin, std::size_t end,
                        std::vector<double>& out) {
  end = std::min(end, bits.size());
  constexpr auto one = static_cast<std::int64_t>(kQ24);
  for (std::size_t i = begin; i < end; ++i) feed(bits.get(i) ? one : -one, out);
}

void PdmDecimator::push_values(std::span<const double> values, std::vector<double>& out) {
  for (double x : values) {
    if (!(std::abs(x) <= 1.0)) throw RangeError("decimator input outside [-1, 1]");
    feed(std::llround(x * kQ24), out);
  }
}

PcmStream pdm_demodulate(const PdmStream& pdm, std::size_t decimation) {
  check_decimation(decimation);
  pdm.validate();
  const std::size_t filter_bits = kCompensationTaps * decimation + kCicStages * (decimation - 1);
  if (pdm.size() < 4 * filter_bits) {
    throw ParameterError("pdm_demodulate: stream shorter than four filter lengths (" +
                         std::to_string(4 * filter_bits) + " samples)");
  }
  PcmStream pcm;
  pcm.sample_rate = pdm.sample_rate / static_cast<double>(decimation);
  pcm.samples.reserve(pdm.size() / decimation + 1);
  PdmDecimator dec(decimation);
  dec.push(pdm.bits, pcm.samples);
  return pcm;
}

void write_wav(const std::filesystem::path& path, const PcmStream& pcm) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  auto u32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  auto u16 = [&](std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    f.write(reinterpret_cast<const char*>(b), 2);
  };
  const auto rate = static_cast<std::uint32_t>(std::llround(pcm.sample_rate));
  const auto data_bytes = static_cast<std::uint32_t>(pcm.size() * 4);
  f.write("RIFF", 4);
  u32(4 + 26 + 12 + 8 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  u32(18);
  u16(3);  // IEEE float
  u16(1);
  u32(rate);
  u32(rate * 4);
  u16(4);
  u16(32);
  u16(0);
  f.write("fact", 4);
  u32(4);
  u32(static_cast<std::uint32_t>(pcm.size()));
  f.write("data", 4);
  u32(data_bytes);
  for (double s : pcm.samples) {
    const auto v = static_cast<float>(s);
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  if (!f) throw Error("write failed: " + path.string());
}

}  // namespace umic
