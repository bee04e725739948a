#include <cstdlib>
#include <string_view>

#include "peerdistill/kernels.hpp"

namespace peerdistill::kernels {

#if defined(PEERDISTILL_HAVE_AVX2)
const KernelTable* avx2_table_unchecked();
#endif
#if defined(PEERDISTILL_HAVE_NEON)
const KernelTable* neon_table_unchecked();
#endif

const KernelTable* avx2() {
#if defined(PEERDISTILL_HAVE_AVX2)
  static const bool supported =
      __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? avx2_table_unchecked() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable* neon() {
#if defined(PEERDISTILL_HAVE_NEON)
  return neon_table_unchecked();
#else
  return nullptr;
#endif
}

namespace {

const KernelTable& select() {
  const char* forced = std::getenv("PEERDISTILL_KERNELS");
  if (forced != nullptr) {
    const std::string_view want{forced};
    if (want == "scalar") return scalar();
    if (want == "avx2" && avx2() != nullptr) return *avx2();
    if (want == "neon" && neon() != nullptr) return *neon();
  }
  if (const KernelTable* t = avx2()) return *t;
  if (const KernelTable* t = neon()) return *t;
  return scalar();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = select();
  return table;
}

}  // namespace peerdistill::kernels
