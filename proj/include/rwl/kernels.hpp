#pragma once

// Dense double-precision inner loops used by the tensor layer.
//
// Every kernel has a scalar reference implementation. On x86-64 an AVX2/FMA
// variant is compiled in a separate translation unit and selected at runtime
// when the CPU reports support. Setting RWL_KERNELS=scalar in the environment
// forces the reference path.

#include <cstddef>
#include <string_view>

namespace rwl::kernels {

struct KernelTable {
  std::string_view name;

  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out[i] = a[i] + b[i]
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  // out[i] = a[i] * b[i]
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // out[i] = alpha * x[i]
  void (*scale)(double alpha, const double* x, double* out, std::size_t n);
  // Row-major C(m x n) (+)= A(m x k) * B(k x n). Leading dims equal the
  // logical column counts.
  void (*gemm)(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate);
};

const KernelTable& scalar_table();

// nullptr when the AVX2 variant was not compiled for this target.
const KernelTable* avx2_table();

bool cpu_has_avx2_fma();

// The table used by the tensor layer. Chosen once on first use.
const KernelTable& active();

// Overrides the runtime choice; intended for tests and benchmarks.
void set_active(const KernelTable& table);

}  // namespace rwl::kernels
