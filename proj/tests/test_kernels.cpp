#include <cmath>
#include <cstdlib>
#include <string>
#include <limits>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "cpi/kernels.hpp"
#include "cpi/rng.hpp"

using namespace cpi;
namespace k = cpi::kernels;

namespace {

std::vector<double> random_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = 20.0 * rng.uniform() - 10.0;
  return v;
}

std::vector<k::Backend> vector_backends() {
  std::vector<k::Backend> out;
  for (auto b : {k::Backend::kAvx2, k::Backend::kNeon}) {
    if (k::available(b)) out.push_back(b);
  }
  return out;
}

// Reassociated sums differ from the sequential reference by a few ulps of
// the sum of magnitudes.
double sum_tol(const std::vector<double>& a, const std::vector<double>* b = nullptr) {
  double mag = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mag += std::fabs(a[i] * (b ? (*b)[i] : 1.0));
  return 1e-14 * (mag + 1.0);
}

}  // namespace

TEST_CASE("scalar kernels on hand-checked inputs") {
  const std::vector<double> a = {1, 2, 3, 4, 5};
  const std::vector<double> b = {5, 4, 3, 2, 1};
  CHECK(k::scalar::dot(a.data(), b.data(), 5) == 35.0);
  CHECK(k::scalar::sum(a.data(), 5) == 15.0);
  CHECK(k::scalar::max_abs_diff(a.data(), b.data(), 5) == 4.0);
  std::vector<double> c = a;
  k::scalar::scale(c.data(), c.size(), 0.5);
  CHECK(c == std::vector<double>{0.5, 1, 1.5, 2, 2.5});
  CHECK(k::scalar::sum(a.data(), 0) == 0.0);
  CHECK(k::scalar::max_abs_diff(a.data(), b.data(), 0) == 0.0);

  // [[1 2] [3 4]] x (1, 1), b = (10, 20), alpha = 2
  const std::vector<double> m = {1, 2, 3, 4};
  const std::vector<double> x = {1, 1};
  const std::vector<double> off = {10, 20};
  std::vector<double> y(2);
  k::scalar::affine_matvec(m.data(), 2, 2, x.data(), off.data(), 2.0, y.data());
  CHECK(y == std::vector<double>{16, 34});
}

TEST_CASE("vector backends agree with the scalar reference") {
  const auto backends = vector_backends();
  if (backends.empty()) MESSAGE("no vector backend on this machine; scalar only");
  Rng rng(11);
  for (auto backend : backends) {
    const auto& t = k::table(backend);
    CAPTURE(k::name(backend));
    // Every length through several vector widths plus tails.
    for (std::size_t n = 0; n <= 67; ++n) {
      CAPTURE(n);
      const auto a = random_vector(rng, n);
      const auto b = random_vector(rng, n);
      CHECK(std::fabs(t.dot(a.data(), b.data(), n) - k::scalar::dot(a.data(), b.data(), n)) <=
            sum_tol(a, &b));
      CHECK(std::fabs(t.sum(a.data(), n) - k::scalar::sum(a.data(), n)) <= sum_tol(a));
      // max and scale involve no reassociation: exact agreement.
      CHECK(t.max_abs_diff(a.data(), b.data(), n) ==
            k::scalar::max_abs_diff(a.data(), b.data(), n));
      auto s1 = a;
      auto s2 = a;
      t.scale(s1.data(), n, -1.75);
      k::scalar::scale(s2.data(), n, -1.75);
      CHECK(s1 == s2);
    }
    for (std::size_t rows : {1u, 3u, 8u, 50u}) {
      for (std::size_t cols : {1u, 4u, 7u, 50u}) {
        const auto m = random_vector(rng, rows * cols);
        const auto x = random_vector(rng, cols);
        const auto off = random_vector(rng, rows);
        std::vector<double> y1(rows), y2(rows);
        t.affine_matvec(m.data(), rows, cols, x.data(), off.data(), 0.9, y1.data());
        k::scalar::affine_matvec(m.data(), rows, cols, x.data(), off.data(), 0.9, y2.data());
        for (std::size_t i = 0; i < rows; ++i) CHECK(std::fabs(y1[i] - y2[i]) <= 1e-11);
      }
    }
  }
}

TEST_CASE("max_abs_diff propagates NaN in every backend") {
  std::vector<k::Backend> all = vector_backends();
  all.push_back(k::Backend::kScalar);
  for (auto backend : all) {
    const auto& t = k::table(backend);
    for (std::size_t pos : {0u, 3u, 4u, 9u}) {
      std::vector<double> a(10, 1.0), b(10, 1.0);
      a[pos] = std::numeric_limits<double>::quiet_NaN();
      CHECK(std::isnan(t.max_abs_diff(a.data(), b.data(), 10)));
    }
  }
}

TEST_CASE("backend selection") {
  CHECK(k::available(k::Backend::kScalar));
  const auto before = k::active_backend();
  k::set_backend(k::Backend::kScalar);
  CHECK(k::active_backend() == k::Backend::kScalar);
  CHECK(k::active().dot == k::table(k::Backend::kScalar).dot);
  for (auto b : {k::Backend::kAvx2, k::Backend::kNeon}) {
    if (!k::available(b)) CHECK_THROWS_AS(k::table(b), std::runtime_error);
  }
  k::set_backend(before);
  CHECK(k::name(k::Backend::kAvx2) == "avx2");
}

TEST_CASE("CPI_KERNELS picks the initial backend") {
  const char* forced = std::getenv("CPI_KERNELS");
  if (forced == nullptr) return;
  // The selection test above restores whatever was chosen at startup.
  if (std::string(forced) == "scalar") CHECK(k::active_backend() == k::Backend::kScalar);
}
