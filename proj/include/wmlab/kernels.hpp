#pragma once

namespace wmlab::kernels {

// C = op(A) * op(B) + (accumulate ? C : 0)
// op(A) is A [m x k] when trans_a is false, A^T (A stored [k x m]) otherwise.
// Row-major storage everywhere.
//
// The parallel kernel owns whole rows of C per thread, so every C element is
// summed in the same order as the serial reference and results are
// bit-identical to it. gemm_serial is the reference kept for tests and for
// the kernel benchmark.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a,
          const double* b, double* c, bool accumulate = false);

void gemm_serial(bool trans_a, bool trans_b, int m, int n, int k,
                 const double* a, const double* b, double* c,
                 bool accumulate = false);

}  // namespace wmlab::kernels
