#pragma once

#include <cstddef>

namespace mq {

// C (m x n) = alpha * op(A) * op(B) + beta * C, row-major.
// op(A) is (m x k): A itself when trans_a is false, A^T (A stored k x m... A is m-by-k after op).
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc);

// Bounds the BLAS worker count (and with it the only source of
// parallelism inside a single graph).
void set_num_threads(int n);

bool blas_backed();

}  // namespace mq
