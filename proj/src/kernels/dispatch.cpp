#include "cpi/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace cpi::kernels {

#if defined(CPI_KERNELS_AVX2)
namespace avx2 {
double dot(const double*, const double*, std::size_t);
double sum(const double*, std::size_t);
void scale(double*, std::size_t, double);
double max_abs_diff(const double*, const double*, std::size_t);
void affine_matvec(const double*, std::size_t, std::size_t, const double*,
                   const double*, double, double*);
}  // namespace avx2
#endif

#if defined(CPI_KERNELS_NEON)
namespace neon {
double dot(const double*, const double*, std::size_t);
double sum(const double*, std::size_t);
void scale(double*, std::size_t, double);
double max_abs_diff(const double*, const double*, std::size_t);
void affine_matvec(const double*, std::size_t, std::size_t, const double*,
                   const double*, double, double*);
}  // namespace neon
#endif

namespace {

constexpr KernelTable kScalarTable{scalar::dot, scalar::sum, scalar::scale,
                                   scalar::max_abs_diff, scalar::affine_matvec};
#if defined(CPI_KERNELS_AVX2)
constexpr KernelTable kAvx2Table{avx2::dot, avx2::sum, avx2::scale,
                                 avx2::max_abs_diff, avx2::affine_matvec};
#endif
#if defined(CPI_KERNELS_NEON)
constexpr KernelTable kNeonTable{neon::dot, neon::sum, neon::scale,
                                 neon::max_abs_diff, neon::affine_matvec};
#endif

Backend widest_available() {
  if (available(Backend::kAvx2)) return Backend::kAvx2;
  if (available(Backend::kNeon)) return Backend::kNeon;
  return Backend::kScalar;
}

Backend initial_backend() {
  if (const char* forced = std::getenv("CPI_KERNELS")) {
    const std::string v(forced);
    for (Backend b : {Backend::kScalar, Backend::kAvx2, Backend::kNeon}) {
      if (v == name(b) && available(b)) return b;
    }
  }
  return widest_available();
}

struct Selection {
  std::atomic<Backend> backend;
  std::atomic<const KernelTable*> kernels;
};

Selection& current() {
  static Selection selection{initial_backend(), nullptr};
  if (selection.kernels.load() == nullptr) {
    selection.kernels.store(&table(selection.backend.load()));
  }
  return selection;
}

}  // namespace

bool available(Backend backend) {
  switch (backend) {
    case Backend::kScalar:
      return true;
    case Backend::kAvx2:
#if defined(CPI_KERNELS_AVX2)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::kNeon:
#if defined(CPI_KERNELS_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& table(Backend backend) {
  if (!available(backend)) {
    throw std::runtime_error("kernel backend '" + std::string(name(backend)) +
                             "' is not available on this machine");
  }
  switch (backend) {
#if defined(CPI_KERNELS_AVX2)
    case Backend::kAvx2:
      return kAvx2Table;
#endif
#if defined(CPI_KERNELS_NEON)
    case Backend::kNeon:
      return kNeonTable;
#endif
    default:
      return kScalarTable;
  }
}

const KernelTable& active() { return *current().kernels.load(); }

Backend active_backend() { return current().backend.load(); }

void set_backend(Backend backend) {
  const KernelTable& t = table(backend);
  Selection& s = current();
  s.backend.store(backend);
  s.kernels.store(&t);
}

std::string_view name(Backend backend) {
  switch (backend) {
    case Backend::kScalar:
      return "scalar";
    case Backend::kAvx2:
      return "avx2";
    case Backend::kNeon:
      return "neon";
  }
  return "unknown";
}

}  // namespace cpi::kernels
