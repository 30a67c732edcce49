#include "cpi/kernels.hpp"

#include <arm_neon.h>

#include <cmath>

namespace cpi::kernels::neon {

double dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double sum(const double* a, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(a + i));
  double s = vaddvq_f64(acc);
  for (; i < n; ++i) s += a[i];
  return s;
}

void scale(double* a, std::size_t n, double factor) {
  const float64x2_t f = vdupq_n_f64(factor);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(a + i, vmulq_f64(vld1q_f64(a + i), f));
  for (; i < n; ++i) a[i] *= factor;
}

double max_abs_diff(const double* a, const double* b, std::size_t n) {
  double w = 0.0;
  std::size_t i = 0;
  float64x2_t worst = vdupq_n_f64(0.0);
  bool nan_seen = false;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t d = vabdq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
    nan_seen |= vminvq_u32(vreinterpretq_u32_u64(vceqq_f64(d, d))) == 0;
    worst = vmaxq_f64(worst, d);
  }
  w = vmaxvq_f64(worst);
  if (nan_seen) w = std::nan("");
  for (; i < n; ++i) {
    const double d = std::fabs(a[i] - b[i]);
    if (d > w || std::isnan(d)) w = d;
  }
  return w;
}

void affine_matvec(const double* m, std::size_t rows, std::size_t cols,
                   const double* x, const double* b, double alpha, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    y[r] = b[r] + alpha * dot(m + r * cols, x, cols);
  }
}

}  // namespace cpi::kernels::neon
