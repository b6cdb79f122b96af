#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "umic/bitbuffer.hpp"
#include "umic/clock.hpp"

namespace umic {

/// 1-bit microphone stream; bit 1 is +1, bit 0 is -1.
struct PdmStream {
  BitBuffer bits;
  double sample_rate = kNominalSampleRate;

  std::size_t size() const noexcept { return bits.size(); }
  void validate() const;
};

struct PcmStream {
  std::vector<double> samples;
  double sample_rate = kNominalSampleRate / 16;

  std::size_t size() const noexcept { return samples.size(); }
  double duration() const noexcept { return static_cast<double>(samples.size()) / sample_rate; }
  void validate() const;
};

inline constexpr std::size_t kDefaultDecimation = 16;
inline constexpr std::size_t kCicStages = 4;
inline constexpr std::size_t kCompensationTaps = 31;
/// Passband edge of the compensation filter as a fraction of the PCM rate.
inline constexpr double kCompensationPassband = 0.3733;

/// Second-order sigma-delta modulator with carried state, so a signal can be
/// modulated in pieces. The output bit of a step is decided before the input
/// of that step is integrated (one sample of latency).
class SigmaDeltaModulator {
 public:
  /// Throws RangeError for |x| > 1 or non-finite x.
  bool step(double x);
  void reset() noexcept { i1_ = i2_ = 0.0; }

 private:
  double i1_ = 0.0;
  double i2_ = 0.0;
};

/// Zero-order-holds each PCM sample for `oversample` output bits and
/// modulates; the output rate is pcm.sample_rate * oversample.
/// Throws ParameterError for oversample < 8, RangeError for |x| > 1.
PdmStream pdm_modulate(const PcmStream& pcm, std::size_t oversample);

/// Four-stage CIC decimator on Q24 fixed point followed by a 31-tap
/// compensation low-pass. Streaming: feeding a stream in any chunking yields
/// exactly the output of one push of the whole stream.
///
/// Timing: PCM output m is the filtered signal at PDM sample
/// m * R - demod_delay_bits(R). The decimation phase is chosen so that this
/// delay is an integer number of PDM samples.
class PdmDecimator {
 public:
  /// Throws ParameterError unless decimation is 8, 16 or 32.
  explicit PdmDecimator(std::size_t decimation = kDefaultDecimation);

  std::size_t decimation() const noexcept { return r_; }

  void push(const BitBuffer& bits, std::size_t begin, std::size_t end, std::vector<double>& out);
  void push(const BitBuffer& bits, std::vector<double>& out) { push(bits, 0, bits.size(), out); }
  /// Multi-level input in [-1, 1] (quantized to Q24); bit streams enter as +-1.
  void push_values(std::span<const double> values, std::vector<double>& out);

 private:
  void feed(std::int64_t q, std::vector<double>& out);

  std::size_t r_;
  std::size_t phase_;
  int shift_;
  std::size_t count_ = 0;
  std::array<std::uint64_t, kCicStages> integ_{};
  std::array<std::uint64_t, kCicStages> comb_{};
  std::vector<double> taps_;
  std::vector<double> history_;  // circular, newest at head_
  std::size_t head_ = 0;
};

/// Demodulates to sample rate pdm.sample_rate / decimation, clamped to [-1, 1].
/// Throws ParameterError for unsupported decimation or a stream shorter than
/// four filter lengths.
PcmStream pdm_demodulate(const PdmStream& pdm, std::size_t decimation = kDefaultDecimation);

/// Compensation taps for the given decimation: inverse CIC droop up to the
/// passband edge, zero above, Kaiser window (beta 6), unit DC gain.
std::vector<double> compensation_taps(std::size_t decimation);

/// CIC output sampling phase within each block of R input bits.
std::size_t cic_phase(std::size_t decimation);

/// Delay of the demodulator in PDM samples (see PdmDecimator).
std::size_t demod_delay_bits(std::size_t decimation);

/// Delay of pdm_demodulate(pdm_modulate(x, R), R) relative to x, in PCM
/// samples: the zero-order hold centres sample n at bit n*R + (R - 1)/2, the
/// modulator adds one bit, the demodulator demod_delay_bits(R).
double round_trip_delay(std::size_t decimation);

/// Writes mono 32-bit float WAV at pcm.sample_rate (rounded to whole Hz).
void write_wav(const std::filesystem::path& path, const PcmStream& pcm);

}  // namespace umic
