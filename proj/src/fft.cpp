#include "umic/fft.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cstring>
#include <map>
#include <mutex>

#include "umic/error.hpp"

namespace umic {

namespace {

std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const noexcept { fftw_free(p); }
};

}  // namespace

std::size_t fast_fft_size(std::size_t n) {
  if (n <= 1) return 1;
  for (std::size_t m = n;; ++m) {
    std::size_t r = m;
    for (std::size_t p : {2U, 3U, 5U, 7U}) {
      while (r % p == 0) r /= p;
    }
    if (r == 1) return m;
  }
}

struct RealFft::Impl {
  std::unique_ptr<double, FftwFree> real;
  std::unique_ptr<fftw_complex, FftwFree> spec;
  fftw_plan fwd = nullptr;
  fftw_plan inv = nullptr;
};

RealFft::RealFft(std::size_t n) : n_(n), impl_(std::make_unique<Impl>()) {
  if (n == 0) throw ParameterError("RealFft: size must be positive");
  impl_->real.reset(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
  impl_->spec.reset(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * bins())));
  std::lock_guard lock(planner_mutex());
  const int size = static_cast<int>(n);
  impl_->fwd = fftw_plan_dft_r2c_1d(size, impl_->real.get(), impl_->spec.get(), FFTW_ESTIMATE | FFTW_UNALIGNED);
  impl_->inv = fftw_plan_dft_c2r_1d(size, impl_->spec.get(), impl_->real.get(), FFTW_ESTIMATE | FFTW_UNALIGNED);
}

RealFft::~RealFft() {
  std::lock_guard lock(planner_mutex());
  if (impl_->fwd) fftw_destroy_plan(impl_->fwd);
  if (impl_->inv) fftw_destroy_plan(impl_->inv);
}

void RealFft::forward(std::span<const double> in, std::vector<std::complex<double>>& out) const {
  // Scratch is per thread so that one cached plan can run on several threads;
  // reusing it avoids faulting in fresh pages for every large transform.
  thread_local std::vector<double> buf;
  buf.resize(n_);
  const std::size_t m = std::min(in.size(), n_);
  std::memcpy(buf.data(), in.data(), m * sizeof(double));
  std::fill(buf.begin() + static_cast<std::ptrdiff_t>(m), buf.end(), 0.0);
  out.resize(bins());
  fftw_execute_dft_r2c(impl_->fwd, buf.data(), reinterpret_cast<fftw_complex*>(out.data()));
}

void RealFft::inverse(std::span<const std::complex<double>> in, std::vector<double>& out) const {
  if (in.size() != bins()) throw ParameterError("RealFft::inverse: wrong spectrum length");
  // c2r destroys its input, so work on a copy.
  thread_local std::vector<std::complex<double>> spec;
  spec.assign(in.begin(), in.end());
  out.resize(n_);
  fftw_execute_dft_c2r(impl_->inv, reinterpret_cast<fftw_complex*>(spec.data()), out.data());
}

std::shared_ptr<const RealFft> real_fft(std::size_t n) {
  static std::mutex cache_mutex;
  static std::map<std::size_t, std::shared_ptr<const RealFft>> cache;
  std::lock_guard lock(cache_mutex);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  auto fft = std::make_shared<const RealFft>(n);
  // Large transforms are not worth pinning in memory.
  if (n <= (std::size_t{1} << 24)) cache.emplace(n, fft);
  return fft;
}

}  // namespace umic
