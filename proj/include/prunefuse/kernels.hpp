#pragma once
// Dense double-precision inner loops used by the tensor graph and the signal
// reductions. Each backend fills one KernelTable; the active table is chosen
// once at startup from CPU features and can be pinned with the
// PRUNEFUSE_KERNELS environment variable ("scalar" or "avx2").

#include <cstddef>
#include <string_view>

namespace prunefuse::kernels {

struct KernelTable {
  const char* name;

  double (*dot)(std::size_t n, const double* x, const double* y);
  // y += a * x
  void (*axpy)(std::size_t n, double a, const double* x, double* y);
  double (*sum)(std::size_t n, const double* x);
  double (*sum_abs)(std::size_t n, const double* x);
  double (*sum_sq)(std::size_t n, const double* x);
  // sum of x[i] * 0: zero when every element is finite, NaN otherwise.
  double (*sum_zeroed)(std::size_t n, const double* x);

  // Row-major, contiguous operands. All three accumulate into C.
  // C[m,n] += A[m,k] * B[k,n]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c);
  // C[m,n] += A[m,k] * B[n,k]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c);
  // C[m,n] += A[k,m]^T * B[k,n]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c);
};

const KernelTable& scalar_table();
// nullptr when the build or the CPU lacks AVX2+FMA.
const KernelTable* avx2_table();

// The table every caller should use.
const KernelTable& active();

// Overrides the runtime choice; returns false for an unknown or unavailable name.
bool select(std::string_view name);

bool cpu_has_avx2();

}  // namespace prunefuse::kernels
