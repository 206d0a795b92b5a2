// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/nn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <omp.h>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define OCCDIFF_AVX2 1
#endif

namespace occdiff::nn::kern {

int max_threads() { return omp_get_max_threads(); }

namespace {

constexpr int kMT = 6;   // microkernel rows
constexpr int kNT = 16;  // microkernel cols

#ifdef OCCDIFF_AVX2

// C tile [mr<=6, 16] at C+m0*ldc+n0. A accessed as a(k, r): broadcast scalar.
template <typename AGet>
inline void mk_broadcast_16(int mr, int K, AGet a, const float* B, int ldb, float* C, int ldc,
                            bool accumulate) {
  __m256 acc[kMT][2];
  for (int r = 0; r < mr; ++r) {
    if (accumulate) {
      acc[r][0] = _mm256_loadu_ps(C + r * ldc);
      acc[r][1] = _mm256_loadu_ps(C + r * ldc + 8);
    } else {
      acc[r][0] = _mm256_setzero_ps();
      acc[r][1] = _mm256_setzero_ps();
    }
  }
  for (int k = 0; k < K; ++k) {
    const __m256 b0 = _mm256_loadu_ps(B + static_cast<int64_t>(k) * ldb);
    const __m256 b1 = _mm256_loadu_ps(B + static_cast<int64_t>(k) * ldb + 8);
    for (int r = 0; r < mr; ++r) {
      const __m256 av = _mm256_set1_ps(a(k, r));
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < mr; ++r) {
    _mm256_storeu_ps(C + r * ldc, acc[r][0]);
    _mm256_storeu_ps(C + r * ldc + 8, acc[r][1]);
  }
}

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

#endif  // OCCDIFF_AVX2

template <typename AGet>
inline void tail_broadcast(int mr, int nr, int K, AGet a, const float* B, int ldb, float* C,
                           int ldc, bool accumulate) {
  for (int r = 0; r < mr; ++r) {
    for (int n = 0; n < nr; ++n) {
      float s = accumulate ? C[r * ldc + n] : 0.0f;
      for (int k = 0; k < K; ++k) s += a(k, r) * B[static_cast<int64_t>(k) * ldb + n];
      C[r * ldc + n] = s;
    }
  }
}

// Shared driver for gemm_nn / gemm_tn: both stream B rows and broadcast A.
template <typename AGet>
void gemm_broadcast(int M, int N, int K, AGet a_at, const float* B, int ldb, float* C, int ldc,
                    bool accumulate) {
  const int mtiles = (M + kMT - 1) / kMT;
  const int ntiles = (N + kNT - 1) / kNT;
#pragma omp parallel for collapse(2) schedule(static)
  for (int mt = 0; mt < mtiles; ++mt) {
    for (int nt = 0; nt < ntiles; ++nt) {
      const int m0 = mt * kMT;
      const int n0 = nt * kNT;
      const int mr = std::min(kMT, M - m0);
      const int nr = std::min(kNT, N - n0);
      auto a = [&](int k, int r) { return a_at(k, m0 + r); };
      float* c = C + static_cast<int64_t>(m0) * ldc + n0;
#ifdef OCCDIFF_AVX2
      if (nr == kNT) {
        mk_broadcast_16(mr, K, a, B + n0, ldb, c, ldc, accumulate);
        continue;
      }
#endif
      tail_broadcast(mr, nr, K, a, B + n0, ldb, c, ldc, accumulate);
    }
  }
}

}  // namespace

void gemm_nn(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate) {
  auto a_at = [A, lda](int k, int m) { return A[static_cast<int64_t>(m) * lda + k]; };
  gemm_broadcast(M, N, K, a_at, B, ldb, C, ldc, accumulate);
}

void gemm_tn(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate) {
  auto a_at = [A, lda](int k, int m) { return A[static_cast<int64_t>(k) * lda + m]; };
  gemm_broadcast(M, N, K, a_at, B, ldb, C, ldc, accumulate);
}

void gemm_nt(int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
             int ldc, bool accumulate) {
  constexpr int MR = 4, NR = 4;
  const int mtiles = (M + MR - 1) / MR;
  const int ntiles = (N + NR - 1) / NR;
#pragma omp parallel for collapse(2) schedule(static)
  for (int mt = 0; mt < mtiles; ++mt) {
    for (int nt = 0; nt < ntiles; ++nt) {
      const int m0 = mt * MR;
      const int n0 = nt * NR;
      const int mr = std::min(MR, M - m0);
      const int nr = std::min(NR, N - n0);
#ifdef OCCDIFF_AVX2
      __m256 acc[MR][NR];
      for (int r = 0; r < mr; ++r)
        for (int c = 0; c < nr; ++c) acc[r][c] = _mm256_setzero_ps();
      const int k8 = K & ~7;
      for (int k = 0; k < k8; k += 8) {
        __m256 av[MR];
        for (int r = 0; r < mr; ++r)
          av[r] = _mm256_loadu_ps(A + static_cast<int64_t>(m0 + r) * lda + k);
        for (int c = 0; c < nr; ++c) {
          const __m256 bv = _mm256_loadu_ps(B + static_cast<int64_t>(n0 + c) * ldb + k);
          for (int r = 0; r < mr; ++r) acc[r][c] = _mm256_fmadd_ps(av[r], bv, acc[r][c]);
        }
      }
      for (int r = 0; r < mr; ++r) {
        for (int c = 0; c < nr; ++c) {
          float s = hsum8(acc[r][c]);
          for (int k = k8; k < K; ++k)
            s += A[static_cast<int64_t>(m0 + r) * lda + k] *
                 B[static_cast<int64_t>(n0 + c) * ldb + k];
          float* cp = C + static_cast<int64_t>(m0 + r) * ldc + (n0 + c);
          *cp = (accumulate ? *cp : 0.0f) + s;
        }
      }
#else
      for (int r = 0; r < mr; ++r) {
        for (int c = 0; c < nr; ++c) {
          float s = 0.0f;
          for (int k = 0; k < K; ++k)
            s += A[static_cast<int64_t>(m0 + r) * lda + k] *
                 B[static_cast<int64_t>(n0 + c) * ldb + k];
          float* cp = C + static_cast<int64_t>(m0 + r) * ldc + (n0 + c);
          *cp = (accumulate ? *cp : 0.0f) + s;
        }
      }
#endif
    }
  }
}

void im2col3d(const float* in, int C, int X, int Y, int Z, int kx, int ky, int kz, float* col) {
  const int px = kx / 2, py = ky / 2, pz = kz / 2;
  const int64_t S = static_cast<int64_t>(X) * Y * Z;
  const int rows = C * kx * ky * kz;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int az = r % kz;
    const int ay = (r / kz) % ky;
    const int ax = (r / (kz * ky)) % kx;
    const int c = r / (kz * ky * kx);
    const int dz = az - pz, dy = ay - py, dx = ax - px;
    float* dst = col + static_cast<int64_t>(r) * S;
    const float* src = in + static_cast<int64_t>(c) * S;
    for (int x = 0; x < X; ++x) {
      const int sx = x + dx;
      if (sx < 0 || sx >= X) {
        std::memset(dst + static_cast<int64_t>(x) * Y * Z, 0, sizeof(float) * Y * Z);
        continue;
      }
      for (int y = 0; y < Y; ++y) {
        float* d = dst + (static_cast<int64_t>(x) * Y + y) * Z;
        const int sy = y + dy;
        if (sy < 0 || sy >= Y) {
          std::memset(d, 0, sizeof(float) * Z);
          continue;
        }
        const float* s = src + (static_cast<int64_t>(sx) * Y + sy) * Z + dz;
        const int z0 = std::max(0, -dz);
        const int z1 = std::min(Z, Z - dz);
        if (z0 > 0) std::memset(d, 0, sizeof(float) * z0);
        if (z1 > z0) std::memcpy(d + z0, s + z0, sizeof(float) * (z1 - z0));
        if (z1 < Z) std::memset(d + z1, 0, sizeof(float) * (Z - z1));
      }
    }
  }
}

void bias_add_rows(float* C, int M, int N, const float* bias) {
#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    float* row = C + static_cast<int64_t>(m) * N;
    const float b = bias[m];
    for (int n = 0; n < N; ++n) row[n] += b;
  }
}

void row_sums_accum(const float* C, int M, int N, float* out) {
#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    double s = 0.0;
    const float* row = C + static_cast<int64_t>(m) * N;
    for (int n = 0; n < N; ++n) s += row[n];
    out[m] += static_cast<float>(s);
  }
}

void avg_pool3d(const float* in, int C, int X, int Y, int Z, int fx, int fy, int fz, float* out) {
  const int OX = X / fx, OY = Y / fy, OZ = Z / fz;
  const float inv = 1.0f / static_cast<float>(fx * fy * fz);
  const int64_t OS = static_cast<int64_t>(OX) * OY * OZ;
#pragma omp parallel for schedule(static)
  for (int64_t o = 0; o < static_cast<int64_t>(C) * OS; ++o) {
    const int c = static_cast<int>(o / OS);
    const int64_t p = o % OS;
    const int oz = static_cast<int>(p % OZ);
    const int oy = static_cast<int>((p / OZ) % OY);
    const int ox = static_cast<int>(p / (static_cast<int64_t>(OZ) * OY));
    float s = 0.0f;
    for (int ax = 0; ax < fx; ++ax)
      for (int ay = 0; ay < fy; ++ay)
        for (int az = 0; az < fz; ++az)
          s += in[((static_cast<int64_t>(c) * X + (ox * fx + ax)) * Y + (oy * fy + ay)) * Z +
                  (oz * fz + az)];
    out[o] = s * inv;
  }
}

void avg_pool3d_back(const float* gout, int C, int X, int Y, int Z, int fx, int fy, int fz,
                     float* gin) {
  const int OX = X / fx, OY = Y / fy, OZ = Z / fz;
  const float inv = 1.0f / static_cast<float>(fx * fy * fz);
  const int64_t S = static_cast<int64_t>(X) * Y * Z;
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < static_cast<int64_t>(C) * S; ++i) {
    const int c = static_cast<int>(i / S);
    const int64_t p = i % S;
    const int z = static_cast<int>(p % Z);
    const int y = static_cast<int>((p / Z) % Y);
    const int x = static_cast<int>(p / (static_cast<int64_t>(Z) * Y));
    gin[i] += gout[((static_cast<int64_t>(c) * OX + x / fx) * OY + y / fy) * OZ + z / fz] * inv;
  }
}

void upsample3d(const float* in, int C, int X, int Y, int Z, int fx, int fy, int fz, float* out) {
  const int OX = X * fx, OY = Y * fy, OZ = Z * fz;
  const int64_t OS = static_cast<int64_t>(OX) * OY * OZ;
#pragma omp parallel for schedule(static)
  for (int64_t o = 0; o < static_cast<int64_t>(C) * OS; ++o) {
    const int c = static_cast<int>(o / OS);
    const int64_t p = o % OS;
    const int oz = static_cast<int>(p % OZ);
    const int oy = static_cast<int>((p / OZ) % OY);
    const int ox = static_cast<int>(p / (static_cast<int64_t>(OZ) * OY));
    out[o] = in[((static_cast<int64_t>(c) * X + ox / fx) * Y + oy / fy) * Z + oz / fz];
  }
}

void upsample3d_back(const float* gout, int C, int X, int Y, int Z, int fx, int fy, int fz,
                     float* gin) {
  const int OY = Y * fy, OZ = Z * fz;
  const int64_t S = static_cast<int64_t>(X) * Y * Z;
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < static_cast<int64_t>(C) * S; ++i) {
    const int c = static_cast<int>(i / S);
    const int64_t p = i % S;
    const int z = static_cast<int>(p % Z);
    const int y = static_cast<int>((p / Z) % Y);
    const int x = static_cast<int>(p / (static_cast<int64_t>(Z) * Y));
    double s = 0.0;
    for (int ax = 0; ax < fx; ++ax)
      for (int ay = 0; ay < fy; ++ay)
        for (int az = 0; az < fz; ++az)
          s += gout[((static_cast<int64_t>(c) * X * fx + (x * fx + ax)) * OY + (y * fy + ay)) * OZ +
                    (z * fz + az)];
    gin[i] += static_cast<float>(s);
  }
}

void group_norm(const float* x, int N, int C, int S, int G, float eps, const float* gamma,
                const float* beta, float* y, float* mean, float* rstd) {
  const int cg = C / G;
  const int64_t gs = static_cast<int64_t>(cg) * S;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < G; ++g) {
      const float* xg = x + (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cg) * S;
      double s1 = 0.0, s2 = 0.0;
      for (int64_t i = 0; i < gs; ++i) {
        const double v = xg[i];
        s1 += v;
        s2 += v * v;
      }
      const double mu = s1 / static_cast<double>(gs);
      const double var = std::max(0.0, s2 / static_cast<double>(gs) - mu * mu);
      const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
      mean[n * G + g] = static_cast<float>(mu);
      rstd[n * G + g] = rs;
      float* yg = y + (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cg) * S;
      for (int cc = 0; cc < cg; ++cc) {
        const float ga = gamma[g * cg + cc];
        const float be = beta[g * cg + cc];
        const float* xr = xg + static_cast<int64_t>(cc) * S;
        float* yr = yg + static_cast<int64_t>(cc) * S;
        for (int i = 0; i < S; ++i)
          yr[i] = (xr[i] - static_cast<float>(mu)) * rs * ga + be;
      }
    }
  }
}

void group_norm_back(const float* x, const float* gy, int N, int C, int S, int G,
                     const float* gamma, const float* mean, const float* rstd, float* gx,
                     float* ggamma, float* gbeta) {
  const int cg = C / G;
  const int64_t gs = static_cast<int64_t>(cg) * S;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < G; ++g) {
      const int64_t base = (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cg) * S;
      const float mu = mean[n * G + g];
      const float rs = rstd[n * G + g];
      double s1 = 0.0, s2 = 0.0;  // sum(dyg), sum(dyg * xhat)
      for (int cc = 0; cc < cg; ++cc) {
        const float ga = gamma[g * cg + cc];
        const float* xr = x + base + static_cast<int64_t>(cc) * S;
        const float* dr = gy + base + static_cast<int64_t>(cc) * S;
        for (int i = 0; i < S; ++i) {
          const double dyg = static_cast<double>(dr[i]) * ga;
          s1 += dyg;
          s2 += dyg * (xr[i] - mu) * rs;
        }
      }
      const double inv = 1.0 / static_cast<double>(gs);
      for (int cc = 0; cc < cg; ++cc) {
        const float ga = gamma[g * cg + cc];
        const float* xr = x + base + static_cast<int64_t>(cc) * S;
        const float* dr = gy + base + static_cast<int64_t>(cc) * S;
        float* gr = gx + base + static_cast<int64_t>(cc) * S;
        for (int i = 0; i < S; ++i) {
          const double xhat = (xr[i] - mu) * rs;
          const double dyg = static_cast<double>(dr[i]) * ga;
          gr[i] += static_cast<float>(rs * (dyg - inv * s1 - xhat * inv * s2));
        }
      }
    }
  }
  // Per-channel parameter grads, channel-parallel, batch-serial.
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    const int g = c / cg;
    double dg = 0.0, db = 0.0;
    for (int n = 0; n < N; ++n) {
      const float mu = mean[n * G + g];
      const float rs = rstd[n * G + g];
      const float* xr = x + (static_cast<int64_t>(n) * C + c) * S;
      const float* dr = gy + (static_cast<int64_t>(n) * C + c) * S;
      for (int i = 0; i < S; ++i) {
        db += dr[i];
        dg += static_cast<double>(dr[i]) * (xr[i] - mu) * rs;
      }
    }
    ggamma[c] += static_cast<float>(dg);
    gbeta[c] += static_cast<float>(db);
  }
}

void silu(const float* x, int64_t n, float* y) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const float s = 1.0f / (1.0f + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
}

void silu_back(const float* x, const float* gy, int64_t n, float* gx) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const float s = 1.0f / (1.0f + std::exp(-x[i]));
    gx[i] += gy[i] * s * (1.0f + x[i] * (1.0f - s));
  }
}

void softmax_rows(const float* x, int R, int C, float* y) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < R; ++r) {
    const float* xr = x + static_cast<int64_t>(r) * C;
    float* yr = y + static_cast<int64_t>(r) * C;
    float mx = xr[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      const float e = std::exp(xr[c] - mx);
      yr[c] = e;
      sum += e;
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int c = 0; c < C; ++c) yr[c] *= inv;
  }
}

void add(const float* a, const float* b, int64_t n, float* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void axpy(float alpha, const float* x, int64_t n, float* y) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(const float* x, float alpha, int64_t n, float* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] * alpha;
}

void hadamard(const float* a, const float* b, int64_t n, float* out) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

double det_sum(const float* x, int64_t n) {
  constexpr int64_t kChunk = 1 << 15;
  const int64_t nchunks = (n + kChunk - 1) / kChunk;
  std::vector<double> partial(static_cast<size_t>(nchunks), 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < nchunks; ++c) {
    double s = 0.0;
    const int64_t end = std::min(n, (c + 1) * kChunk);
    for (int64_t i = c * kChunk; i < end; ++i) s += x[i];
    partial[static_cast<size_t>(c)] = s;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

double det_dot(const float* a, const float* b, int64_t n) {
  constexpr int64_t kChunk = 1 << 15;
  const int64_t nchunks = (n + kChunk - 1) / kChunk;
  std::vector<double> partial(static_cast<size_t>(nchunks), 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < nchunks; ++c) {
    double s = 0.0;
    const int64_t end = std::min(n, (c + 1) * kChunk);
    for (int64_t i = c * kChunk; i < end; ++i) s += static_cast<double>(a[i]) * b[i];
    partial[static_cast<size_t>(c)] = s;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

void nearest_rows(const float* z, int P, const float* cb, int K, int c, int* idx) {
#pragma omp parallel for schedule(static)
  for (int p = 0; p < P; ++p) {
    const float* zp = z + static_cast<int64_t>(p) * c;
    int best = 0;
    double best_d = 0.0;
    for (int k = 0; k < K; ++k) {
      const float* e = cb + static_cast<int64_t>(k) * c;
      double d = 0.0;
      for (int j = 0; j < c; ++j) {
        const double diff = static_cast<double>(zp[j]) - e[j];
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

}  // namespace occdiff::nn::kern
