#include "multiquant/blas.hpp"

#ifdef MQ_WITH_OPENBLAS
#include <cblas.h>
#endif

namespace mq {

#ifdef MQ_WITH_OPENBLAS

namespace {
// GEMMs run inside this project's own worker loops; a threaded BLAS on top
// would oversubscribe the cores
struct PinBlasThreads {
  PinBlasThreads() { openblas_set_num_threads(1); }
};
const PinBlasThreads pin_once;
}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void set_num_threads(int n) {
  if (n > 0) openblas_set_num_threads(n);
}

bool blas_backed() { return true; }

#else

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const double bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      // beta == 0 means C is write-only, matching BLAS semantics
      c[i * ldc + j] = alpha * acc + (beta == 0.0 ? 0.0 : beta * c[i * ldc + j]);
    }
  }
}

void set_num_threads(int) {}

bool blas_backed() { return false; }

#endif

}  // namespace mq
