#pragma once

// Thin RAII wrappers over FFTW for the two transforms this project needs.
// FFTW planning is not thread-safe, so plan creation is serialized.

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <mutex>
#include <span>
#include <vector>

namespace qds::fft {

inline std::mutex& plan_mutex() {
  static std::mutex mu;
  return mu;
}

/// Real field [h, w] from a Hermitian half spectrum [h, w/2 + 1] (unnormalized inverse).
inline std::vector<double> inverse_real_2d(std::span<const std::complex<double>> half, std::size_t h, std::size_t w) {
  const std::size_t wc = w / 2 + 1;
  auto* in = fftw_alloc_complex(h * wc);
  auto* out = fftw_alloc_real(h * w);
  fftw_plan plan;
  {
    std::lock_guard lk(plan_mutex());
    plan = fftw_plan_dft_c2r_2d(static_cast<int>(h), static_cast<int>(w), in, out, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < h * wc; ++i) {
    in[i][0] = half[i].real();
    in[i][1] = half[i].imag();
  }
  fftw_execute(plan);
  std::vector<double> field(out, out + h * w);
  {
    std::lock_guard lk(plan_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);
  return field;
}

/// Forward real-to-complex 1-D transforms of a fixed length, reused across calls.
class RealDft1d {
 public:
  explicit RealDft1d(std::size_t n) : n_(n) {
    in_ = fftw_alloc_real(n);
    out_ = fftw_alloc_complex(n / 2 + 1);
    std::lock_guard lk(plan_mutex());
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
  }
  ~RealDft1d() {
    {
      std::lock_guard lk(plan_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealDft1d(const RealDft1d&) = delete;
  RealDft1d& operator=(const RealDft1d&) = delete;

  /// |X_k|^2 for k = 0..n/2 of the strided input signal.
  std::vector<double> power(const double* signal, std::size_t stride = 1) {
    for (std::size_t i = 0; i < n_; ++i) in_[i] = signal[i * stride];
    fftw_execute(plan_);
    std::vector<double> p(n_ / 2 + 1);
    for (std::size_t k = 0; k <= n_ / 2; ++k) p[k] = out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1];
    return p;
  }

 private:
  std::size_t n_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

}  // namespace qds::fft
