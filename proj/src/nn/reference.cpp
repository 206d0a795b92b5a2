// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/nn/reference.hpp"

#include <algorithm>
#include <cmath>

namespace occdiff::nn::ref {

void gemm_nn(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate) {
  for (int m = 0; m < M; ++m) {
    for (int n = 0; n < N; ++n) {
      double s = 0.0;
      for (int k = 0; k < K; ++k)
        s += static_cast<double>(A[static_cast<int64_t>(m) * lda + k]) *
             B[static_cast<int64_t>(k) * ldb + n];
      float* c = C + static_cast<int64_t>(m) * ldc + n;
      *c = (accumulate ? *c : 0.0f) + static_cast<float>(s);
    }
  }
}

void gemm_nt(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate) {
  for (int m = 0; m < M; ++m) {
    for (int n = 0; n < N; ++n) {
      double s = 0.0;
      for (int k = 0; k < K; ++k)
        s += static_cast<double>(A[static_cast<int64_t>(m) * lda + k]) *
             B[static_cast<int64_t>(n) * ldb + k];
      float* c = C + static_cast<int64_t>(m) * ldc + n;
      *c = (accumulate ? *c : 0.0f) + static_cast<float>(s);
    }
  }
}

void gemm_tn(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate) {
  for (int m = 0; m < M; ++m) {
    for (int n = 0; n < N; ++n) {
      double s = 0.0;
      for (int k = 0; k < K; ++k)
        s += static_cast<double>(A[static_cast<int64_t>(k) * lda + m]) *
             B[static_cast<int64_t>(k) * ldb + n];
      float* c = C + static_cast<int64_t>(m) * ldc + n;
      *c = (accumulate ? *c : 0.0f) + static_cast<float>(s);
    }
  }
}

void conv3d(const float* in, int Cin, int X, int Y, int Z, const float* w, int Cout, int kx,
            int ky, int kz, const float* bias, float* out) {
  const int px = kx / 2, py = ky / 2, pz = kz / 2;
  const int64_t S = static_cast<int64_t>(X) * Y * Z;
  for (int co = 0; co < Cout; ++co) {
    for (int x = 0; x < X; ++x) {
      for (int y = 0; y < Y; ++y) {
        for (int z = 0; z < Z; ++z) {
          double s = bias ? bias[co] : 0.0;
          for (int ci = 0; ci < Cin; ++ci) {
            for (int ax = 0; ax < kx; ++ax) {
              const int sx = x + ax - px;
              if (sx < 0 || sx >= X) continue;
              for (int ay = 0; ay < ky; ++ay) {
                const int sy = y + ay - py;
                if (sy < 0 || sy >= Y) continue;
                for (int az = 0; az < kz; ++az) {
                  const int sz = z + az - pz;
                  if (sz < 0 || sz >= Z) continue;
                  s += static_cast<double>(
                           in[static_cast<int64_t>(ci) * S +
                              (static_cast<int64_t>(sx) * Y + sy) * Z + sz]) *
                       w[(((static_cast<int64_t>(co) * Cin + ci) * kx + ax) * ky + ay) * kz + az];
                }
              }
            }
          }
          out[static_cast<int64_t>(co) * S + (static_cast<int64_t>(x) * Y + y) * Z + z] =
              static_cast<float>(s);
        }
      }
    }
  }
}

void avg_pool3d(const float* in, int C, int X, int Y, int Z, int fx, int fy, int fz, float* out) {
  const int OX = X / fx, OY = Y / fy, OZ = Z / fz;
  for (int c = 0; c < C; ++c)
    for (int ox = 0; ox < OX; ++ox)
      for (int oy = 0; oy < OY; ++oy)
        for (int oz = 0; oz < OZ; ++oz) {
          float s = 0.0f;
          for (int ax = 0; ax < fx; ++ax)
            for (int ay = 0; ay < fy; ++ay)
              for (int az = 0; az < fz; ++az)
                s += in[((static_cast<int64_t>(c) * X + (ox * fx + ax)) * Y + (oy * fy + ay)) * Z +
                        (oz * fz + az)];
          out[((static_cast<int64_t>(c) * OX + ox) * OY + oy) * OZ + oz] =
              s / static_cast<float>(fx * fy * fz);
        }
}

void upsample3d(const float* in, int C, int X, int Y, int Z, int fx, int fy, int fz, float* out) {
  const int OX = X * fx, OY = Y * fy, OZ = Z * fz;
  for (int c = 0; c < C; ++c)
    for (int ox = 0; ox < OX; ++ox)
      for (int oy = 0; oy < OY; ++oy)
        for (int oz = 0; oz < OZ; ++oz)
          out[((static_cast<int64_t>(c) * OX + ox) * OY + oy) * OZ + oz] =
              in[((static_cast<int64_t>(c) * X + ox / fx) * Y + oy / fy) * Z + oz / fz];
}

void group_norm(const float* x, int N, int C, int S, int G, float eps, const float* gamma,
                const float* beta, float* y) {
  const int cg = C / G;
  const int64_t gs = static_cast<int64_t>(cg) * S;
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < G; ++g) {
      const float* xg = x + (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cg) * S;
      double s1 = 0.0, s2 = 0.0;
      for (int64_t i = 0; i < gs; ++i) {
        s1 += xg[i];
        s2 += static_cast<double>(xg[i]) * xg[i];
      }
      const double mu = s1 / static_cast<double>(gs);
      const double var = std::max(0.0, s2 / static_cast<double>(gs) - mu * mu);
      const double rs = 1.0 / std::sqrt(var + eps);
      float* yg = y + (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cg) * S;
      for (int cc = 0; cc < cg; ++cc)
        for (int i = 0; i < S; ++i)
          yg[static_cast<int64_t>(cc) * S + i] =
              static_cast<float>((xg[static_cast<int64_t>(cc) * S + i] - mu) * rs) *
                  gamma[g * cg + cc] +
              beta[g * cg + cc];
    }
  }
}

void softmax_rows(const float* x, int R, int C, float* y) {
  for (int r = 0; r < R; ++r) {
    const float* xr = x + static_cast<int64_t>(r) * C;
    float* yr = y + static_cast<int64_t>(r) * C;
    float mx = xr[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    for (int c = 0; c < C; ++c) yr[c] = static_cast<float>(yr[c] / sum);
  }
}

void nearest_rows(const float* z, int P, const float* cb, int K, int c, int* idx) {
  for (int p = 0; p < P; ++p) {
    const float* zp = z + static_cast<int64_t>(p) * c;
    int best = 0;
    double best_d = 0.0;
    for (int k = 0; k < K; ++k) {
      double d = 0.0;
      for (int j = 0; j < c; ++j) {
        const double diff = static_cast<double>(zp[j]) - cb[static_cast<int64_t>(k) * c + j];
        d += diff * diff;
      }
      if (k == 0 || d < best_d) {
        best_d = d;
        best = k;
      }
    }
    idx[p] = best;
  }
}

}  // namespace occdiff::nn::ref
