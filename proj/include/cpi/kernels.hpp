#pragma once

// Dense double-precision kernels used by the dynamic-programming sweeps and
// the policy-update rules. Every kernel has a scalar reference implementation;
// vectorized variants (AVX2+FMA on x86-64, NEON on aarch64) are selected once at
// startup from the CPU feature set and can be overridden for testing.
//
// The vector variants reassociate sums, so results agree with the scalar
// reference to rounding, not bit-for-bit. Within one backend every kernel is
// deterministic.

#include <cstddef>
#include <span>
#include <string_view>

namespace cpi::kernels {

enum class Backend { kScalar, kAvx2, kNeon };

struct KernelTable {
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum)(const double* a, std::size_t n);
  void (*scale)(double* a, std::size_t n, double factor);
  double (*max_abs_diff)(const double* a, const double* b, std::size_t n);
  // y[i] = b[i] + alpha * sum_j m[i * cols + j] * x[j]
  void (*affine_matvec)(const double* m, std::size_t rows, std::size_t cols,
                        const double* x, const double* b, double alpha,
                        double* y);
};

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
double sum(const double* a, std::size_t n);
void scale(double* a, std::size_t n, double factor);
double max_abs_diff(const double* a, const double* b, std::size_t n);
void affine_matvec(const double* m, std::size_t rows, std::size_t cols,
                   const double* x, const double* b, double alpha, double* y);
}  // namespace scalar

/// Table for a specific backend. Throws std::runtime_error when the backend
/// was not compiled in or the CPU lacks the instructions.
const KernelTable& table(Backend backend);

bool available(Backend backend);

/// The currently selected table. Chosen on first use: the widest available
/// backend, unless the environment variable CPI_KERNELS names one
/// ("scalar", "avx2", "neon").
const KernelTable& active();
Backend active_backend();
void set_backend(Backend backend);

std::string_view name(Backend backend);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
inline double sum(std::span<const double> a) {
  return active().sum(a.data(), a.size());
}
inline void scale(std::span<double> a, double factor) {
  active().scale(a.data(), a.size(), factor);
}
inline double max_abs_diff(std::span<const double> a,
                           std::span<const double> b) {
  return active().max_abs_diff(a.data(), b.data(), a.size());
}

}  // namespace cpi::kernels
