// Compiled with -mavx2 -mfma. Nothing in this file may run before
// cpu_has_avx2_fma() has returned true.

#include "rwl/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>

namespace rwl::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4),
                           acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i),
                                            _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void add_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i,
                     _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i,
                     _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_avx2(double alpha, const double* x, double* out, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

// 4 x 8 register tile: rows i..i+3 of C, columns j..j+7.
inline void tile_4x8(const double* a, const double* b, double* c, std::size_t k,
                     std::size_t n, std::size_t i, std::size_t j) {
  __m256d c00 = _mm256_loadu_pd(c + (i + 0) * n + j);
  __m256d c01 = _mm256_loadu_pd(c + (i + 0) * n + j + 4);
  __m256d c10 = _mm256_loadu_pd(c + (i + 1) * n + j);
  __m256d c11 = _mm256_loadu_pd(c + (i + 1) * n + j + 4);
  __m256d c20 = _mm256_loadu_pd(c + (i + 2) * n + j);
  __m256d c21 = _mm256_loadu_pd(c + (i + 2) * n + j + 4);
  __m256d c30 = _mm256_loadu_pd(c + (i + 3) * n + j);
  __m256d c31 = _mm256_loadu_pd(c + (i + 3) * n + j + 4);
  const double* a0 = a + (i + 0) * k;
  const double* a1 = a + (i + 1) * k;
  const double* a2 = a + (i + 2) * k;
  const double* a3 = a + (i + 3) * k;
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
    __m256d av = _mm256_broadcast_sd(a0 + p);
    c00 = _mm256_fmadd_pd(av, b0, c00);
    c01 = _mm256_fmadd_pd(av, b1, c01);
    av = _mm256_broadcast_sd(a1 + p);
    c10 = _mm256_fmadd_pd(av, b0, c10);
    c11 = _mm256_fmadd_pd(av, b1, c11);
    av = _mm256_broadcast_sd(a2 + p);
    c20 = _mm256_fmadd_pd(av, b0, c20);
    c21 = _mm256_fmadd_pd(av, b1, c21);
    av = _mm256_broadcast_sd(a3 + p);
    c30 = _mm256_fmadd_pd(av, b0, c30);
    c31 = _mm256_fmadd_pd(av, b1, c31);
  }
  _mm256_storeu_pd(c + (i + 0) * n + j, c00);
  _mm256_storeu_pd(c + (i + 0) * n + j + 4, c01);
  _mm256_storeu_pd(c + (i + 1) * n + j, c10);
  _mm256_storeu_pd(c + (i + 1) * n + j + 4, c11);
  _mm256_storeu_pd(c + (i + 2) * n + j, c20);
  _mm256_storeu_pd(c + (i + 2) * n + j + 4, c21);
  _mm256_storeu_pd(c + (i + 3) * n + j, c30);
  _mm256_storeu_pd(c + (i + 3) * n + j + 4, c31);
}

// One row of C, columns j..j+3.
inline void tile_1x4(const double* a, const double* b, double* c, std::size_t k,
                     std::size_t n, std::size_t i, std::size_t j) {
  __m256d acc = _mm256_loadu_pd(c + i * n + j);
  const double* arow = a + i * k;
  for (std::size_t p = 0; p < k; ++p)
    acc = _mm256_fmadd_pd(_mm256_broadcast_sd(arow + p),
                          _mm256_loadu_pd(b + p * n + j), acc);
  _mm256_storeu_pd(c + i * n + j, acc);
}

inline void tile_1x1(const double* a, const double* b, double* c, std::size_t k,
                     std::size_t n, std::size_t i, std::size_t j) {
  double acc = c[i * n + j];
  const double* arow = a + i * k;
  for (std::size_t p = 0; p < k; ++p) acc = std::fma(arow[p], b[p * n + j], acc);
  c[i * n + j] = acc;
}

void gemm_avx2(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  const std::size_t m4 = m - m % 4;
  const std::size_t n8 = n - n % 8;
  for (std::size_t i = 0; i < m4; i += 4)
    for (std::size_t j = 0; j < n8; j += 8) tile_4x8(a, b, c, k, n, i, j);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t j = i < m4 ? n8 : 0;
    for (; j + 4 <= n; j += 4) tile_1x4(a, b, c, k, n, i, j);
    for (; j < n; ++j) tile_1x1(a, b, c, k, n, i, j);
  }
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{"avx2",  dot_avx2, axpy_avx2, add_avx2,
                                 mul_avx2, scale_avx2, gemm_avx2};
  return &table;
}

}  // namespace rwl::kernels
