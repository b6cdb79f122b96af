#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

namespace umic {

/// Smallest n' >= n of the form 2^a 3^b 5^c 7^d.
std::size_t fast_fft_size(std::size_t n);

/// Real-to-complex / complex-to-real transform pair of one size, backed by
/// FFTW. Plans are created under a process-wide lock (the FFTW planner is not
/// thread-safe); execution is lock-free and uses the new-array interface.
class RealFft {
 public:
  explicit RealFft(std::size_t n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const noexcept { return n_; }
  std::size_t bins() const noexcept { return n_ / 2 + 1; }

  /// Forward transform of `in` zero-padded to size(); `out` gets bins() values.
  void forward(std::span<const double> in, std::vector<std::complex<double>>& out) const;

  /// Unnormalized inverse: out[k] = sum_j X[j] e^{+2 pi i jk/n}.
  void inverse(std::span<const std::complex<double>> in, std::vector<double>& out) const;

 private:
  struct Impl;
  std::size_t n_;
  std::unique_ptr<Impl> impl_;
};

/// Shared, cached transform for size n.
std::shared_ptr<const RealFft> real_fft(std::size_t n);

}  // namespace umic
