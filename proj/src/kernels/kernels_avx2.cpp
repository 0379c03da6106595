// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include <immintrin.h>

#include "prunefuse/kernels.hpp"

namespace prunefuse::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy_avx2(std::size_t n, double a, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

template <class Load>
double reduce_avx2(std::size_t n, const double* x, Load load) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, load(x + i));
    acc1 = _mm256_add_pd(acc1, load(x + i + 4));
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, load(x + i));
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) {
    const double v[4] = {x[i], 0.0, 0.0, 0.0};
    s += hsum(load(v));
  }
  return s;
}

double sum_avx2(std::size_t n, const double* x) {
  return reduce_avx2(n, x, [](const double* p) { return _mm256_loadu_pd(p); });
}

double sum_abs_avx2(std::size_t n, const double* x) {
  const __m256d sign = _mm256_set1_pd(-0.0);
  return reduce_avx2(n, x, [sign](const double* p) { return _mm256_andnot_pd(sign, _mm256_loadu_pd(p)); });
}

double sum_sq_avx2(std::size_t n, const double* x) {
  return reduce_avx2(n, x, [](const double* p) {
    const __m256d v = _mm256_loadu_pd(p);
    return _mm256_mul_pd(v, v);
  });
}

double sum_zeroed_avx2(std::size_t n, const double* x) {
  const __m256d zero = _mm256_setzero_pd();
  return reduce_avx2(n, x, [zero](const double* p) { return _mm256_mul_pd(_mm256_loadu_pd(p), zero); });
}

// C[m,n] += op(A) * B where op(A)(i,p) = a[i*si + p*sp]. Register block of
// 4 rows x 8 columns; column and row tails fall back to narrower loops.
void gemm_strided_a(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    std::size_t si, std::size_t sp, const double* b, double* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
      __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
      __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
      __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
      for (std::size_t p = 0; p < k; ++p) {
        const double* bp = b + p * n + j;
        const __m256d b0 = _mm256_loadu_pd(bp);
        const __m256d b1 = _mm256_loadu_pd(bp + 4);
        const double* ap = a + i * si + p * sp;
        __m256d av = _mm256_broadcast_sd(ap);
        c00 = _mm256_fmadd_pd(av, b0, c00);
        c01 = _mm256_fmadd_pd(av, b1, c01);
        av = _mm256_broadcast_sd(ap + si);
        c10 = _mm256_fmadd_pd(av, b0, c10);
        c11 = _mm256_fmadd_pd(av, b1, c11);
        av = _mm256_broadcast_sd(ap + 2 * si);
        c20 = _mm256_fmadd_pd(av, b0, c20);
        c21 = _mm256_fmadd_pd(av, b1, c21);
        av = _mm256_broadcast_sd(ap + 3 * si);
        c30 = _mm256_fmadd_pd(av, b0, c30);
        c31 = _mm256_fmadd_pd(av, b1, c31);
      }
      double* c0 = c + i * n + j;
      _mm256_storeu_pd(c0, _mm256_add_pd(_mm256_loadu_pd(c0), c00));
      _mm256_storeu_pd(c0 + 4, _mm256_add_pd(_mm256_loadu_pd(c0 + 4), c01));
      double* c1 = c0 + n;
      _mm256_storeu_pd(c1, _mm256_add_pd(_mm256_loadu_pd(c1), c10));
      _mm256_storeu_pd(c1 + 4, _mm256_add_pd(_mm256_loadu_pd(c1 + 4), c11));
      double* c2 = c1 + n;
      _mm256_storeu_pd(c2, _mm256_add_pd(_mm256_loadu_pd(c2), c20));
      _mm256_storeu_pd(c2 + 4, _mm256_add_pd(_mm256_loadu_pd(c2 + 4), c21));
      double* c3 = c2 + n;
      _mm256_storeu_pd(c3, _mm256_add_pd(_mm256_loadu_pd(c3), c30));
      _mm256_storeu_pd(c3 + 4, _mm256_add_pd(_mm256_loadu_pd(c3 + 4), c31));
    }
    if (j < n) {
      for (std::size_t r = 0; r < 4; ++r) {
        double* cr = c + (i + r) * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a[(i + r) * si + p * sp];
          const double* bp = b + p * n;
          for (std::size_t jj = j; jj < n; ++jj) cr[jj] += av * bp[jj];
        }
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) axpy_avx2(n, a[i * si + p * sp], b + p * n, ci);
  }
}

void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c) {
  gemm_strided_a(m, n, k, a, k, 1, b, c);
}

void gemm_tn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c) {
  gemm_strided_a(m, n, k, a, 1, m, b, c);
}

// C[i,j] += dot(A_i, B_j); four B rows share each A load.
void gemm_nt_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c) {
  const std::size_t kv = k & ~std::size_t{3};
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
      __m256d s2 = _mm256_setzero_pd(), s3 = _mm256_setzero_pd();
      for (std::size_t p = 0; p < kv; p += 4) {
        const __m256d av = _mm256_loadu_pd(ai + p);
        s0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b0 + p), s0);
        s1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b1 + p), s1);
        s2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b2 + p), s2);
        s3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b3 + p), s3);
      }
      // Transpose-reduce the four accumulators into one vector of dots.
      const __m256d h01 = _mm256_hadd_pd(s0, s1);
      const __m256d h23 = _mm256_hadd_pd(s2, s3);
      const __m256d perm = _mm256_permute2f128_pd(h01, h23, 0x21);
      const __m256d blend = _mm256_blend_pd(h01, h23, 0b1100);
      __m256d dots = _mm256_add_pd(perm, blend);
      if (kv < k) {
        alignas(32) double tail[4] = {0.0, 0.0, 0.0, 0.0};
        for (std::size_t p = kv; p < k; ++p) {
          tail[0] += ai[p] * b0[p];
          tail[1] += ai[p] * b1[p];
          tail[2] += ai[p] * b2[p];
          tail[3] += ai[p] * b3[p];
        }
        dots = _mm256_add_pd(dots, _mm256_load_pd(tail));
      }
      _mm256_storeu_pd(ci + j, _mm256_add_pd(_mm256_loadu_pd(ci + j), dots));
    }
    for (; j < n; ++j) ci[j] += dot_avx2(k, ai, b + j * k);
  }
}

constexpr KernelTable kAvx2{
    "avx2",      dot_avx2,     axpy_avx2,    sum_avx2,     sum_abs_avx2,
    sum_sq_avx2, sum_zeroed_avx2, gemm_nn_avx2, gemm_nt_avx2, gemm_tn_avx2,
};

}  // namespace

const KernelTable* avx2_kernels() { return &kAvx2; }

}  // namespace prunefuse::kernels
