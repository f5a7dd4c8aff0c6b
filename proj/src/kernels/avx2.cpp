// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include <immintrin.h>

#include "stvg/kernels.hpp"

namespace stvg::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// crow += sum_{q<4} a[q] * brow_q, four source rows per pass over crow.
inline void axpy4(const double* a, const double* b0, const double* b1, const double* b2,
                  const double* b3, double* crow, std::size_t m) {
  const __m256d a0 = _mm256_set1_pd(a[0]);
  const __m256d a1 = _mm256_set1_pd(a[1]);
  const __m256d a2 = _mm256_set1_pd(a[2]);
  const __m256d a3 = _mm256_set1_pd(a[3]);
  std::size_t j = 0;
  for (; j + 4 <= m; j += 4) {
    __m256d c = _mm256_loadu_pd(crow + j);
    c = _mm256_fmadd_pd(a0, _mm256_loadu_pd(b0 + j), c);
    c = _mm256_fmadd_pd(a1, _mm256_loadu_pd(b1 + j), c);
    c = _mm256_fmadd_pd(a2, _mm256_loadu_pd(b2 + j), c);
    c = _mm256_fmadd_pd(a3, _mm256_loadu_pd(b3 + j), c);
    _mm256_storeu_pd(crow + j, c);
  }
  for (; j < m; ++j) crow[j] += a[0] * b0[j] + a[1] * b1[j] + a[2] * b2[j] + a[3] * b3[j];
}

void gemm_nn_avx2(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                  std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    const double* arow = a + i * k;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4)
      axpy4(arow + p, b + p * m, b + (p + 1) * m, b + (p + 2) * m, b + (p + 3) * m, crow, m);
    for (; p < k; ++p) axpy_avx2(arow[p], b + p * m, crow, m);
  }
}

void gemm_nt_avx2(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
                  std::size_t k) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) c[i * k + p] += dot_avx2(a + i * m, b + p * m, m);
}

void gemm_tn_avx2(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                  std::size_t m) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const double* b0 = b + i * m;
    const double* b1 = b0 + m;
    const double* b2 = b1 + m;
    const double* b3 = b2 + m;
    for (std::size_t p = 0; p < k; ++p) {
      const double coeff[4] = {a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p],
                               a[(i + 3) * k + p]};
      axpy4(coeff, b0, b1, b2, b3, c + p * m, m);
    }
  }
  for (; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) axpy_avx2(a[i * k + p], b + i * m, c + p * m, m);
}

}  // namespace

const KernelTable* avx2_kernels() {
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  static const KernelTable table{"avx2", dot_avx2, axpy_avx2, gemm_nn_avx2, gemm_nt_avx2,
                                 gemm_tn_avx2};
  return supported ? &table : nullptr;
}

}  // namespace stvg::kernels
