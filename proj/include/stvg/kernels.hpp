#pragma once

// Dense double-precision inner loops used by the autograd engine.
//
// Every kernel has a scalar reference implementation; AVX2+FMA (x86-64) and
// NEON (aarch64) variants are compiled when the toolchain supports them and
// picked at runtime. Set STVG_KERNELS=scalar|avx2|neon to force a variant.

#include <cstddef>
#include <string_view>

namespace stvg::kernels {

struct KernelTable {
  std::string_view name;

  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // C[n,m] += A[n,k] * B[k,m]
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                  std::size_t m);
  // C[n,k] += A[n,m] * B[k,m]^T
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
                  std::size_t k);
  // C[k,m] += A[n,k]^T * B[n,m]
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                  std::size_t m);
};

const KernelTable& scalar_kernels();
// nullptr when the variant is not compiled in or the CPU lacks the feature.
const KernelTable* avx2_kernels();
const KernelTable* neon_kernels();

// The table selected for this process. Fixed after the first call.
const KernelTable& active();

}  // namespace stvg::kernels
