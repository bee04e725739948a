#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "peerdistill/kernels.hpp"

using namespace peerdistill;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

std::vector<const kernels::KernelTable*> simd_tables() {
  std::vector<const kernels::KernelTable*> out;
  if (auto* t = kernels::avx2()) out.push_back(t);
  if (auto* t = kernels::neon()) out.push_back(t);
  return out;
}

// Reassociation and FMA contraction differ between variants; bound the
// difference by the magnitude of the summed products.
void check_close(const std::vector<double>& ref, const std::vector<double>& got,
                 const std::vector<double>& magnitude) {
  REQUIRE(ref.size() == got.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(std::abs(ref[i] - got[i]) <= 1e-14 * (magnitude[i] + 1.0));
  }
}

}  // namespace

TEST_CASE("active table is one of the compiled variants") {
  const auto& active = kernels::active();
  const bool known = &active == &kernels::scalar() || &active == kernels::avx2() ||
                     &active == kernels::neon();
  CHECK(known);
  MESSAGE("active kernels: " << active.name);
}

TEST_CASE("simd variants match the scalar reference") {
  const auto& ref = kernels::scalar();
  std::mt19937_64 rng(11);
  for (const kernels::KernelTable* simd : simd_tables()) {
    CAPTURE(simd->name);
    for (std::size_t n : {1u, 3u, 4u, 7u, 8u, 9u, 31u, 64u, 257u}) {
      CAPTURE(n);
      auto x = random_vec(n, rng), y = random_vec(n, rng);
      double mag = 0.0;
      for (std::size_t i = 0; i < n; ++i) mag += std::abs(x[i] * y[i]);
      CHECK(std::abs(ref.dot(x.data(), y.data(), n) - simd->dot(x.data(), y.data(), n)) <=
            1e-14 * (mag + 1.0));

      auto y1 = y, y2 = y;
      ref.axpy(0.37, x.data(), y1.data(), n);
      simd->axpy(0.37, x.data(), y2.data(), n);
      std::vector<double> m(n);
      for (std::size_t i = 0; i < n; ++i) m[i] = std::abs(y[i]) + std::abs(0.37 * x[i]);
      check_close(y1, y2, m);

      std::vector<double> a1(n), a2(n);
      ref.add(x.data(), y.data(), a1.data(), n);
      simd->add(x.data(), y.data(), a2.data(), n);
      CHECK(a1 == a2);
      ref.mul(x.data(), y.data(), a1.data(), n);
      simd->mul(x.data(), y.data(), a2.data(), n);
      CHECK(a1 == a2);
      a1 = x;
      a2 = x;
      ref.scale(-1.5, a1.data(), n);
      simd->scale(-1.5, a2.data(), n);
      CHECK(a1 == a2);
    }
  }
}

TEST_CASE("simd gemm variants match the scalar reference") {
  const auto& ref = kernels::scalar();
  std::mt19937_64 rng(5);
  for (const kernels::KernelTable* simd : simd_tables()) {
    CAPTURE(simd->name);
    for (auto [m, k, n] : std::vector<std::array<std::size_t, 3>>{
             {1, 1, 1}, {2, 3, 5}, {7, 9, 4}, {8, 8, 8}, {13, 17, 11}, {3, 64, 33}}) {
      CAPTURE(m);
      CAPTURE(k);
      CAPTURE(n);
      // Magnitude bound: |A| |B| computed with the scalar kernel.
      auto magnitude = [&](auto gemm, const std::vector<double>& a,
                           const std::vector<double>& b, std::size_t size) {
        std::vector<double> aa(a.size()), bb(b.size()), out(size, 0.0);
        for (std::size_t i = 0; i < a.size(); ++i) aa[i] = std::abs(a[i]);
        for (std::size_t i = 0; i < b.size(); ++i) bb[i] = std::abs(b[i]);
        gemm(aa.data(), bb.data(), out.data());
        return out;
      };

      auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
      std::vector<double> c1(m * n, 0.5), c2(m * n, 0.5);
      ref.gemm_nn(a.data(), b.data(), c1.data(), m, k, n);
      simd->gemm_nn(a.data(), b.data(), c2.data(), m, k, n);
      check_close(c1, c2, magnitude([&](auto x, auto y, auto z) { ref.gemm_nn(x, y, z, m, k, n); },
                                    a, b, m * n));

      auto bt = random_vec(n * k, rng);
      std::fill(c1.begin(), c1.end(), 0.0);
      std::fill(c2.begin(), c2.end(), 0.0);
      ref.gemm_nt(a.data(), bt.data(), c1.data(), m, k, n);
      simd->gemm_nt(a.data(), bt.data(), c2.data(), m, k, n);
      check_close(c1, c2, magnitude([&](auto x, auto y, auto z) { ref.gemm_nt(x, y, z, m, k, n); },
                                    a, bt, m * n));

      auto at = random_vec(k * m, rng);
      std::fill(c1.begin(), c1.end(), 0.0);
      std::fill(c2.begin(), c2.end(), 0.0);
      ref.gemm_tn(at.data(), b.data(), c1.data(), m, k, n);
      simd->gemm_tn(at.data(), b.data(), c2.data(), m, k, n);
      check_close(c1, c2, magnitude([&](auto x, auto y, auto z) { ref.gemm_tn(x, y, z, m, k, n); },
                                    at, b, m * n));
    }
  }
}

TEST_CASE("gemm variants agree with a naive triple loop") {
  std::mt19937_64 rng(9);
  const std::size_t m = 5, k = 6, n = 7;
  auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
  std::vector<double> naive(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) naive[i * n + j] += a[i * k + p] * b[p * n + j];
  std::vector<double> got(m * n, 0.0);
  kernels::active().gemm_nn(a.data(), b.data(), got.data(), m, k, n);
  for (std::size_t i = 0; i < m * n; ++i) CHECK(got[i] == doctest::Approx(naive[i]).epsilon(1e-12));
}
