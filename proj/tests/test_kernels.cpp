// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// OpenMP kernels vs the serial reference implementations.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "occdiff/nn/kernels.hpp"
#include "occdiff/nn/reference.hpp"
#include "occdiff/util/rng.hpp"

using namespace occdiff;
namespace kern = occdiff::nn::kern;
namespace ref = occdiff::nn::ref;

namespace {

std::vector<float> randn(Rng& rng, int64_t n) {
  std::vector<float> v(static_cast<size_t>(n));
  rng.fill_normal(v);
  return v;
}

void check_close(const std::vector<float>& got, const std::vector<float>& want, double atol,
                 double rtol) {
  REQUIRE(got.size() == want.size());
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double diff = std::abs(static_cast<double>(got[i]) - want[i]);
    const double bound = atol + rtol * std::abs(static_cast<double>(want[i]));
    worst = std::max(worst, diff - bound);
  }
  CHECK(worst <= 0.0);
}

}  // namespace

TEST_CASE("gemm variants match the serial reference on odd shapes") {
  Rng rng(101);
  // Shapes chosen to exercise microkernel tails in both dimensions.
  const int shapes[][3] = {{1, 1, 1}, {6, 16, 8}, {7, 17, 33}, {64, 64, 64},
                           {13, 95, 41}, {50, 31, 129}};
  for (const auto& s : shapes) {
    const int M = s[0], N = s[1], K = s[2];
    auto A = randn(rng, static_cast<int64_t>(M) * K);
    auto B = randn(rng, static_cast<int64_t>(K) * N);
    auto At = std::vector<float>(static_cast<size_t>(K) * M);
    auto Bt = std::vector<float>(static_cast<size_t>(N) * K);
    for (int m = 0; m < M; ++m)
      for (int k = 0; k < K; ++k) At[static_cast<size_t>(k) * M + m] = A[static_cast<size_t>(m) * K + k];
    for (int k = 0; k < K; ++k)
      for (int n = 0; n < N; ++n) Bt[static_cast<size_t>(n) * K + k] = B[static_cast<size_t>(k) * N + n];

    std::vector<float> want(static_cast<size_t>(M) * N);
    ref::gemm_nn(M, N, K, A.data(), K, B.data(), N, want.data(), N);

    std::vector<float> got(static_cast<size_t>(M) * N, 7.0f);
    kern::gemm_nn(M, N, K, A.data(), K, B.data(), N, got.data(), N, false);
    check_close(got, want, 1e-4, 1e-4);

    std::fill(got.begin(), got.end(), 7.0f);
    kern::gemm_nt(M, N, K, A.data(), K, Bt.data(), K, got.data(), N, false);
    check_close(got, want, 1e-4, 1e-4);

    std::fill(got.begin(), got.end(), 7.0f);
    kern::gemm_tn(M, N, K, At.data(), M, B.data(), N, got.data(), N, false);
    check_close(got, want, 1e-4, 1e-4);
  }
}

TEST_CASE("gemm accumulate adds onto existing output") {
  Rng rng(7);
  const int M = 9, N = 21, K = 17;
  auto A = randn(rng, M * K);
  auto B = randn(rng, K * N);
  auto C0 = randn(rng, M * N);

  std::vector<float> want = C0;
  std::vector<float> prod(static_cast<size_t>(M) * N);
  ref::gemm_nn(M, N, K, A.data(), K, B.data(), N, prod.data(), N);
  for (size_t i = 0; i < want.size(); ++i) want[i] += prod[i];

  std::vector<float> got = C0;
  kern::gemm_nn(M, N, K, A.data(), K, B.data(), N, got.data(), N, true);
  check_close(got, want, 1e-4, 1e-4);
}

TEST_CASE("im2col3d + gemm reproduces direct convolution") {
  Rng rng(33);
  const int Cin = 3, Cout = 5, X = 7, Y = 6, Z = 4;
  const int kx = 3, ky = 3, kz = 3;
  auto in = randn(rng, static_cast<int64_t>(Cin) * X * Y * Z);
  auto w = randn(rng, static_cast<int64_t>(Cout) * Cin * kx * ky * kz);
  auto bias = randn(rng, Cout);

  std::vector<float> want(static_cast<size_t>(Cout) * X * Y * Z);
  ref::conv3d(in.data(), Cin, X, Y, Z, w.data(), Cout, kx, ky, kz, bias.data(), want.data());

  const int S = X * Y * Z;
  const int rows = Cin * kx * ky * kz;
  std::vector<float> col(static_cast<size_t>(rows) * S);
  kern::im2col3d(in.data(), Cin, X, Y, Z, kx, ky, kz, col.data());
  std::vector<float> got(static_cast<size_t>(Cout) * S);
  kern::gemm_nn(Cout, S, rows, w.data(), rows, col.data(), S, got.data(), S, false);
  kern::bias_add_rows(got.data(), Cout, S, bias.data());
  check_close(got, want, 1e-4, 1e-4);
}

TEST_CASE("im2col3d handles 1x1x1 and asymmetric kernels") {
  Rng rng(34);
  const int Cin = 2, Cout = 3, X = 5, Y = 4, Z = 3;
  for (auto [kx, ky, kz] : {std::tuple{1, 1, 1}, std::tuple{3, 3, 1}, std::tuple{1, 3, 3}}) {
    auto in = randn(rng, static_cast<int64_t>(Cin) * X * Y * Z);
    auto w = randn(rng, static_cast<int64_t>(Cout) * Cin * kx * ky * kz);
    std::vector<float> want(static_cast<size_t>(Cout) * X * Y * Z);
    ref::conv3d(in.data(), Cin, X, Y, Z, w.data(), Cout, kx, ky, kz, nullptr, want.data());

    const int S = X * Y * Z;
    const int rows = Cin * kx * ky * kz;
    std::vector<float> col(static_cast<size_t>(rows) * S);
    kern::im2col3d(in.data(), Cin, X, Y, Z, kx, ky, kz, col.data());
    std::vector<float> got(static_cast<size_t>(Cout) * S);
    kern::gemm_nn(Cout, S, rows, w.data(), rows, col.data(), S, got.data(), S, false);
    check_close(got, want, 1e-4, 1e-4);
  }
}

TEST_CASE("pooling and upsampling match reference and are adjoint-consistent") {
  Rng rng(55);
  const int C = 4, X = 8, Y = 6, Z = 4;
  const int fx = 2, fy = 2, fz = 2;
  auto in = randn(rng, static_cast<int64_t>(C) * X * Y * Z);

  std::vector<float> want(static_cast<size_t>(C) * (X / fx) * (Y / fy) * (Z / fz));
  ref::avg_pool3d(in.data(), C, X, Y, Z, fx, fy, fz, want.data());
  std::vector<float> got(want.size());
  kern::avg_pool3d(in.data(), C, X, Y, Z, fx, fy, fz, got.data());
  check_close(got, want, 1e-6, 1e-6);

  std::vector<float> uwant(static_cast<size_t>(C) * X * fx * Y * fy * Z * fz);
  ref::upsample3d(in.data(), C, X, Y, Z, fx, fy, fz, uwant.data());
  std::vector<float> ugot(uwant.size());
  kern::upsample3d(in.data(), C, X, Y, Z, fx, fy, fz, ugot.data());
  check_close(ugot, uwant, 0.0, 0.0);

  // <pool(x), y> == <x, pool_back(y)> (adjoint identity).
  auto y = randn(rng, static_cast<int64_t>(want.size()));
  std::vector<float> gin(in.size(), 0.0f);
  kern::avg_pool3d_back(y.data(), C, X, Y, Z, fx, fy, fz, gin.data());
  const double lhs = kern::det_dot(got.data(), y.data(), static_cast<int64_t>(y.size()));
  const double rhs = kern::det_dot(in.data(), gin.data(), static_cast<int64_t>(in.size()));
  CHECK(std::abs(lhs - rhs) < 1e-3);

  // Same identity for upsampling.
  auto yu = randn(rng, static_cast<int64_t>(uwant.size()));
  std::vector<float> ginu(in.size(), 0.0f);
  kern::upsample3d_back(yu.data(), C, X, Y, Z, fx, fy, fz, ginu.data());
  const double lhs_u = kern::det_dot(ugot.data(), yu.data(), static_cast<int64_t>(yu.size()));
  const double rhs_u = kern::det_dot(in.data(), ginu.data(), static_cast<int64_t>(in.size()));
  CHECK(std::abs(lhs_u - rhs_u) < 1e-3);
}

TEST_CASE("group_norm matches reference and normalizes each group") {
  Rng rng(77);
  const int N = 2, C = 8, S = 30, G = 4;
  auto x = randn(rng, static_cast<int64_t>(N) * C * S);
  auto gamma = randn(rng, C);
  auto beta = randn(rng, C);

  std::vector<float> want(x.size());
  ref::group_norm(x.data(), N, C, S, G, 1e-5f, gamma.data(), beta.data(), want.data());

  std::vector<float> got(x.size()), mean(N * G), rstd(N * G);
  kern::group_norm(x.data(), N, C, S, G, 1e-5f, gamma.data(), beta.data(), got.data(),
                   mean.data(), rstd.data());
  check_close(got, want, 1e-4, 1e-4);

  // With gamma=1, beta=0 each group has mean ~0 and variance ~1.
  std::vector<float> ones(C, 1.0f), zeros(C, 0.0f);
  kern::group_norm(x.data(), N, C, S, G, 1e-5f, ones.data(), zeros.data(), got.data(),
                   mean.data(), rstd.data());
  const int cg = C / G;
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < G; ++g) {
      double s1 = 0.0, s2 = 0.0;
      for (int cc = 0; cc < cg; ++cc)
        for (int i = 0; i < S; ++i) {
          const double v = got[(static_cast<size_t>(n) * C + g * cg + cc) * S + i];
          s1 += v;
          s2 += v * v;
        }
      const double m = s1 / (cg * S);
      CHECK(std::abs(m) < 1e-4);
      CHECK(std::abs(s2 / (cg * S) - m * m - 1.0) < 1e-3);
    }
  }
}

TEST_CASE("group_norm backward matches finite differences") {
  Rng rng(78);
  const int N = 1, C = 4, S = 6, G = 2;
  auto x = randn(rng, static_cast<int64_t>(N) * C * S);
  auto gamma = randn(rng, C);
  auto beta = randn(rng, C);
  auto gy = randn(rng, static_cast<int64_t>(N) * C * S);

  std::vector<float> y(x.size()), mean(N * G), rstd(N * G);
  kern::group_norm(x.data(), N, C, S, G, 1e-5f, gamma.data(), beta.data(), y.data(), mean.data(),
                   rstd.data());
  std::vector<float> gx(x.size(), 0.0f), ggamma(C, 0.0f), gbeta(C, 0.0f);
  kern::group_norm_back(x.data(), gy.data(), N, C, S, G, gamma.data(), mean.data(), rstd.data(),
                        gx.data(), ggamma.data(), gbeta.data());

  auto loss = [&](const std::vector<float>& xv, const std::vector<float>& gv,
                  const std::vector<float>& bv) {
    std::vector<float> yv(xv.size()), m(N * G), r(N * G);
    kern::group_norm(xv.data(), N, C, S, G, 1e-5f, gv.data(), bv.data(), yv.data(), m.data(),
                     r.data());
    double s = 0.0;
    for (size_t i = 0; i < yv.size(); ++i) s += static_cast<double>(yv[i]) * gy[i];
    return s;
  };

  const float h = 1e-3f;
  for (size_t i = 0; i < x.size(); i += 5) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (loss(xp, gamma, beta) - loss(xm, gamma, beta)) / (2.0 * h);
    CHECK(std::abs(fd - gx[i]) < 2e-2 * std::max(1.0, std::abs(fd)));
  }
  for (int c = 0; c < C; ++c) {
    auto gp = gamma, gm = gamma;
    gp[c] += h;
    gm[c] -= h;
    const double fd = (loss(x, gp, beta) - loss(x, gm, beta)) / (2.0 * h);
    CHECK(std::abs(fd - ggamma[c]) < 2e-2 * std::max(1.0, std::abs(fd)));
    auto bp = beta, bm = beta;
    bp[c] += h;
    bm[c] -= h;
    const double fdb = (loss(x, gamma, bp) - loss(x, gamma, bm)) / (2.0 * h);
    CHECK(std::abs(fdb - gbeta[c]) < 2e-2 * std::max(1.0, std::abs(fdb)));
  }
}

TEST_CASE("silu backward matches finite differences") {
  Rng rng(79);
  const int64_t n = 64;
  auto x = randn(rng, n);
  auto gy = randn(rng, n);
  std::vector<float> gx(static_cast<size_t>(n), 0.0f);
  kern::silu_back(x.data(), gy.data(), n, gx.data());
  const float h = 1e-3f;
  for (int64_t i = 0; i < n; ++i) {
    const auto f = [&](float v) {
      return static_cast<double>(v) / (1.0 + std::exp(-static_cast<double>(v))) * gy[i];
    };
    const double fd = (f(x[i] + h) - f(x[i] - h)) / (2.0 * h);
    CHECK(std::abs(fd - gx[static_cast<size_t>(i)]) < 1e-2 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("softmax_rows matches reference, rows sum to one") {
  Rng rng(88);
  const int R = 13, C = 29;
  auto x = randn(rng, static_cast<int64_t>(R) * C);
  for (auto& v : x) v *= 10.0f;  // stress the max-shift
  std::vector<float> want(x.size()), got(x.size());
  ref::softmax_rows(x.data(), R, C, want.data());
  kern::softmax_rows(x.data(), R, C, got.data());
  check_close(got, want, 1e-6, 1e-5);
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += got[static_cast<size_t>(r) * C + c];
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
}

TEST_CASE("nearest_rows matches exhaustive search and breaks ties low") {
  Rng rng(99);
  const int P = 200, K = 37, c = 9;
  auto z = randn(rng, static_cast<int64_t>(P) * c);
  auto cb = randn(rng, static_cast<int64_t>(K) * c);
  // Duplicate a codebook row so a tie exists for points nearest to it.
  for (int j = 0; j < c; ++j) cb[static_cast<size_t>(20) * c + j] = cb[static_cast<size_t>(5) * c + j];

  std::vector<int> got(P), want(P);
  kern::nearest_rows(z.data(), P, cb.data(), K, c, got.data());
  ref::nearest_rows(z.data(), P, cb.data(), K, c, want.data());
  for (int p = 0; p < P; ++p) CHECK(got[p] == want[p]);
  for (int p = 0; p < P; ++p) CHECK(got[p] != 20);  // duplicate row always loses the tie
}

TEST_CASE("deterministic reductions are exactly reproducible") {
  Rng rng(111);
  auto x = randn(rng, 100003);
  auto y = randn(rng, 100003);
  const double s1 = kern::det_sum(x.data(), static_cast<int64_t>(x.size()));
  const double s2 = kern::det_sum(x.data(), static_cast<int64_t>(x.size()));
  CHECK(s1 == s2);
  const double d1 = kern::det_dot(x.data(), y.data(), static_cast<int64_t>(x.size()));
  const double d2 = kern::det_dot(x.data(), y.data(), static_cast<int64_t>(x.size()));
  CHECK(d1 == d2);
}

TEST_CASE("rng is deterministic, forked streams are independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.u64() == b.u64());
  Rng base(42);
  Rng f1 = base.fork(1), f2 = base.fork(2), f1b = Rng(42).fork(1);
  CHECK(f1.u64() == f1b.u64());
  CHECK(f1.u64() != f2.u64());

  // Box-Muller normals: mean ~0, var ~1 over a large sample.
  Rng g(7);
  double s1 = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = g.normal();
    s1 += v;
    s2 += v * v;
  }
  CHECK(std::abs(s1 / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}
