// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

// OpenMP compute kernels. Every kernel assigns each output element to a
// single task with a fixed-order inner reduction, so results are
// bit-identical for any thread count. Serial reference versions used by the
// tests live in reference.hpp.
namespace occdiff::nn::kern {

// C[M,N] = A[M,K] * B[K,N]            (+ C if accumulate)
void gemm_nn(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate);
// C[M,N] = A[M,K] * B[N,K]^T
void gemm_nt(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate);
// C[M,N] = A[K,M]^T * B[K,N]
void gemm_tn(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate);

// in [C, X, Y, Z] -> col [C*kx*ky*kz, X*Y*Z], zero padding (kx/2, ky/2, kz/2).
void im2col3d(const float* in, int C, int X, int Y, int Z, int kx, int ky, int kz, float* col);

// rows of C[M,N] += bias[m]
void bias_add_rows(float* C, int M, int N, const float* bias);
// out[m] += sum of row m of C[M,N]   (deterministic per-row serial sum)
void row_sums_accum(const float* C, int M, int N, float* out);

// Average pooling, factors (fx, fy, fz); X, Y, Z divisible by factors.
void avg_pool3d(const float* in, int C, int X, int Y, int Z, int fx, int fy, int fz, float* out);
void avg_pool3d_back(const float* gout, int C, int X, int Y, int Z, int fx, int fy, int fz,
                     float* gin);  // X.. are input dims; gin accumulated
// Nearest-neighbor upsampling by integer factors.
void upsample3d(const float* in, int C, int X, int Y, int Z, int fx, int fy, int fz, float* out);
void upsample3d_back(const float* gout, int C, int X, int Y, int Z, int fx, int fy, int fz,
                     float* gin);  // X.. are input dims; gin accumulated

// Group norm over x[N, C, S]; saves per-(n,g) mean and rstd for backward.
void group_norm(const float* x, int N, int C, int S, int G, float eps, const float* gamma,
                const float* beta, float* y, float* mean, float* rstd);
void group_norm_back(const float* x, const float* gy, int N, int C, int S, int G,
                     const float* gamma, const float* mean, const float* rstd, float* gx,
                     float* ggamma, float* gbeta);  // ggamma/gbeta accumulated

void silu(const float* x, int64_t n, float* y);
void silu_back(const float* x, const float* gy, int64_t n, float* gx);  // accumulated

// Row-wise softmax of X[R,C].
void softmax_rows(const float* x, int R, int C, float* y);

// Elementwise helpers (all deterministic).
void add(const float* a, const float* b, int64_t n, float* out);
void axpy(float alpha, const float* x, int64_t n, float* y);  // y += alpha*x
void scale(const float* x, float alpha, int64_t n, float* out);
void hadamard(const float* a, const float* b, int64_t n, float* out);

// Deterministic sum: fixed-size chunks reduced in order, double accumulate.
double det_sum(const float* x, int64_t n);
double det_dot(const float* a, const float* b, int64_t n);

// For each row p of z[P,c], index of nearest row of cb[K,c] under squared
// Euclidean distance (double accumulation), ties to the lowest index.
void nearest_rows(const float* z, int P, const float* cb, int K, int c, int* idx);

int max_threads();

}  // namespace occdiff::nn::kern
