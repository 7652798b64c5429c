#include "wmlab/kernels.hpp"

#include <cstring>

namespace wmlab::kernels {
namespace {

// All four layouts keep the reduction index p ascending for every C element,
// so serial and parallel variants agree bit for bit.

inline void gemm_rows(bool trans_a, bool trans_b, int m, int n, int k,
                      const double* a, const double* b, double* c,
                      bool accumulate, int i0, int i1) {
  if (!trans_a && !trans_b) {
    for (int i = i0; i < i1; ++i) {
      double* cr = c + static_cast<long>(i) * n;
      if (!accumulate) std::memset(cr, 0, sizeof(double) * n);
      const double* ar = a + static_cast<long>(i) * k;
      for (int p = 0; p < k; ++p) {
        const double aip = ar[p];
        const double* br = b + static_cast<long>(p) * n;
        for (int j = 0; j < n; ++j) cr[j] += aip * br[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (int i = i0; i < i1; ++i) {
      const double* ar = a + static_cast<long>(i) * k;
      double* cr = c + static_cast<long>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* br = b + static_cast<long>(j) * k;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += ar[p] * br[p];
        cr[j] = accumulate ? cr[j] + s : s;
      }
    }
  } else if (trans_a && !trans_b) {
    for (int i = i0; i < i1; ++i) {
      double* cr = c + static_cast<long>(i) * n;
      if (!accumulate) std::memset(cr, 0, sizeof(double) * n);
      for (int p = 0; p < k; ++p) {
        const double api = a[static_cast<long>(p) * m + i];
        const double* br = b + static_cast<long>(p) * n;
        for (int j = 0; j < n; ++j) cr[j] += api * br[j];
      }
    }
  } else {
    for (int i = i0; i < i1; ++i) {
      double* cr = c + static_cast<long>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* br = b + static_cast<long>(j) * k;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += a[static_cast<long>(p) * m + i] * br[p];
        cr[j] = accumulate ? cr[j] + s : s;
      }
    }
  }
}

}  // namespace

void gemm_serial(bool trans_a, bool trans_b, int m, int n, int k,
                 const double* a, const double* b, double* c, bool accumulate) {
  gemm_rows(trans_a, trans_b, m, n, k, a, b, c, accumulate, 0, m);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a,
          const double* b, double* c, bool accumulate) {
  const long work = static_cast<long>(m) * n * k;
  if (work < 262144 || m < 2) {
    gemm_rows(trans_a, trans_b, m, n, k, a, b, c, accumulate, 0, m);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    gemm_rows(trans_a, trans_b, m, n, k, a, b, c, accumulate, i, i + 1);
}

}  // namespace wmlab::kernels
