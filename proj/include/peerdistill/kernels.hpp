#pragma once

// Dense double-precision inner loops used by grad-core and the GP surrogate.
//
// Every kernel has a scalar reference implementation and, where the target
// supports it, an AVX2+FMA (x86-64) or NEON (aarch64) variant. The variant is
// chosen once per process at first use; PEERDISTILL_KERNELS=scalar|avx2|neon
// forces a specific table. All matrices are row-major and densely packed.

#include <cstddef>
#include <string_view>

namespace peerdistill::kernels {

struct KernelTable {
  std::string_view name;

  // sum_i x[i] * y[i]
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out[i] = x[i] + y[i]   (out may alias x or y)
  void (*add)(const double* x, const double* y, double* out, std::size_t n);
  // out[i] = x[i] * y[i]   (out may alias x or y)
  void (*mul)(const double* x, const double* y, double* out, std::size_t n);
  // x[i] *= alpha
  void (*scale)(double alpha, double* x, std::size_t n);

  // C[m x n] += A[m x k] * B[k x n]
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n);
  // C[m x n] += A[m x k] * B[n x k]^T
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n);
  // C[m x n] += A[k x m]^T * B[k x n]
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n);
};

const KernelTable& scalar();

// nullptr when the variant is not compiled in or the CPU lacks the feature.
const KernelTable* avx2();
const KernelTable* neon();

// The table selected for this process.
const KernelTable& active();

}  // namespace peerdistill::kernels
