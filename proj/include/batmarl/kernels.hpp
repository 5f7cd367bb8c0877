#pragma once

#include <cstdint>

// Shared dense kernels. Every code path (recorded forward, gradient sweep,
// no-grad action selection) funnels through these so results are reproducible
// bit for bit across call sites.
namespace batmarl::kernels {

// C = A[r,n] * B[n,m], or += when accumulate.
void gemm(const double* a, const double* b, double* c, int r, int n, int m, bool accumulate);
// C = A^T[n,r] * B[r,m] with A stored [r,n], or += when accumulate.
void gemm_at(const double* a, const double* b, double* c, int r, int n, int m, bool accumulate);
// C = A[r,m] * B^T[m,n] with B stored [n,m], or += when accumulate.
void gemm_bt(const double* a, const double* b, double* c, int r, int n, int m, bool accumulate);
// out[j] (+)= sum_i a[i,j]
void colsum(const double* a, double* out, int r, int m, bool accumulate);

}  // namespace batmarl::kernels
