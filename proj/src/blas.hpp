#pragma once

namespace lbsac {

// C = A * B with optional transposes, row-major.
// A is (m x k) or (k x m) when ta; B is (k x n) or (n x k) when tb.
// Dispatches to OpenBLAS when available (loaded lazily via dlopen so the
// CPU kernel can be pinned before the library initializes), otherwise to a
// portable blocked kernel with a fixed summation order.
void gemm_f32(bool ta, bool tb, int m, int n, int k, const float* a, const float* b,
              float* c);
void gemm_f64(bool ta, bool tb, int m, int n, int k, const double* a, const double* b,
              double* c);

// Name of the active backend ("openblas" or "portable"), for logs and tests.
const char* blas_backend();

}  // namespace lbsac
