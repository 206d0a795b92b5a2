// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Serial reference implementations of the compute kernels. Straight loops,
// no vectorization, no threading. Tests compare the OpenMP kernels against
// these; the benchmark target reports the speedup.

#pragma once

#include <cstdint>

namespace occdiff::nn::ref {

void gemm_nn(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate = false);
void gemm_nt(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate = false);
void gemm_tn(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate = false);

// Direct 3D convolution, stride 1, zero padding k/2. in [Cin,X,Y,Z],
// w [Cout,Cin,kx,ky,kz], bias [Cout] (may be null), out [Cout,X,Y,Z].
void conv3d(const float* in, int Cin, int X, int Y, int Z, const float* w, int Cout, int kx,
            int ky, int kz, const float* bias, float* out);

void avg_pool3d(const float* in, int C, int X, int Y, int Z, int fx, int fy, int fz, float* out);
void upsample3d(const float* in, int C, int X, int Y, int Z, int fx, int fy, int fz, float* out);

void group_norm(const float* x, int N, int C, int S, int G, float eps, const float* gamma,
                const float* beta, float* y);

void softmax_rows(const float* x, int R, int C, float* y);

void nearest_rows(const float* z, int P, const float* cb, int K, int c, int* idx);

}  // namespace occdiff::nn::ref
