#include "cpi/kernels.hpp"

#include <cmath>

namespace cpi::kernels::scalar {

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double sum(const double* a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

void scale(double* a, std::size_t n, double factor) {
  for (std::size_t i = 0; i < n; ++i) a[i] *= factor;
}

double max_abs_diff(const double* a, const double* b, std::size_t n) {
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = std::fabs(a[i] - b[i]);
    // NaN propagates so a diverged sweep never looks converged.
    if (d > worst || std::isnan(d)) worst = d;
  }
  return worst;
}

void affine_matvec(const double* m, std::size_t rows, std::size_t cols,
                   const double* x, const double* b, double alpha, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    y[r] = b[r] + alpha * dot(m + r * cols, x, cols);
  }
}

}  // namespace cpi::kernels::scalar
