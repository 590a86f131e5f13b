#pragma once

#include <cblas.h>

#include <cstddef>

namespace asd::detail {

// Row-major C = alpha * op(A) * op(B) + beta * C. A single-row product goes
// through gemv: OpenBLAS gemm kernels are several times slower at m = 1.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  if (m == 1) {
    const int inc_a = trans_a ? lda : 1;
    if (trans_b) {
      cblas_sgemv(CblasRowMajor, CblasNoTrans, n, k, alpha, b, ldb, a, inc_a, beta, c, 1);
    } else {
      cblas_sgemv(CblasRowMajor, CblasTrans, k, n, alpha, b, ldb, a, inc_a, beta, c, 1);
    }
    return;
  }
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

// Double precision does not go to OpenBLAS. On AVX-512 machines that report
// as Cooper Lake, OpenBLAS 0.3.20 selects a DGEMM kernel that returns wrong
// products once m reaches about 40 (m = 40, n = 980, k = 27 is off by tens).
// Double only serves gradient checks and reference runs, so a plain loop with
// a fixed summation order is fast enough and behaves the same everywhere.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
  const auto op_a = [&](int i, int p) { return trans_a ? a[p * lda + i] : a[i * lda + p]; };
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (trans_b) {
      for (int j = 0; j < n; ++j) {
        const double* brow = b + static_cast<std::ptrdiff_t>(j) * ldb;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += op_a(i, p) * brow[p];
        crow[j] = beta == 0.0 ? alpha * acc : alpha * acc + beta * crow[j];
      }
      continue;
    }
    // BLAS semantics: with beta = 0 the old contents of C are never read.
    for (int j = 0; j < n; ++j) crow[j] = beta == 0.0 ? 0.0 : beta * crow[j];
    for (int p = 0; p < k; ++p) {
      const double s = alpha * op_a(i, p);
      const double* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

void set_single_threaded_blas();

}  // namespace asd::detail
