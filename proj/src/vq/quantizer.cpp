// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/vq/quantizer.hpp"

#include <cmath>

#include "occdiff/nn/kernels.hpp"
#include "occdiff/util/error.hpp"

namespace occdiff::vq {

Codebook Codebook::create(int K, int dim, Rng& rng, float init_scale) {
  require(K >= 2 && dim >= 1, Errc::invalid_argument, "codebook needs K >= 2, dim >= 1");
  Tensor e({K, dim});
  rng.fill_normal({e.data(), static_cast<size_t>(e.numel())});
  for (int64_t i = 0; i < e.numel(); ++i) e[i] *= init_scale;
  Codebook cb;
  cb.K = K;
  cb.dim = dim;
  cb.embeddings = nn::Var::param(std::move(e));
  cb.usage_counts.assign(static_cast<size_t>(K), 0);
  return cb;
}

void Codebook::reset_usage() { usage_counts.assign(usage_counts.size(), 0); }

int64_t Codebook::usage_sum() const {
  int64_t s = 0;
  for (int64_t c : usage_counts) s += c;
  return s;
}

int64_t Codebook::used_entries() const {
  int64_t n = 0;
  for (int64_t c : usage_counts) n += (c > 0);
  return n;
}

void Codebook::validate() const {
  require(K >= 2, Errc::invalid_argument, "codebook K must be >= 2");
  require(embeddings.defined() && embeddings.dim(0) == K && embeddings.dim(1) == dim,
          Errc::shape_mismatch, "codebook embeddings must be [K, dim]");
  const float* p = embeddings.val().data();
  for (int64_t i = 0; i < embeddings.numel(); ++i)
    require(std::isfinite(p[i]), Errc::numeric, "codebook embedding is not finite");
}

QuantizeResult quantize(const nn::Var& z, Codebook& cb) {
  require(z.val().ndim() >= 2 && z.dim(1) == cb.dim, Errc::shape_mismatch,
          "quantize: latent channel count must equal codebook dim");
  nn::Var z_rows = nn::rows_from_channels(z);  // [P, c]
  const int P = z_rows.dim(0);

  std::vector<int> idx(static_cast<size_t>(P));
  nn::kern::nearest_rows(z_rows.val().data(), P, cb.embeddings.val().data(), cb.K, cb.dim,
                         idx.data());
  for (int p = 0; p < P; ++p) ++cb.usage_counts[static_cast<size_t>(idx[static_cast<size_t>(p)])];

  nn::Var q_rows = nn::gather_rows(cb.embeddings, idx);  // [P, c], grads reach the codebook
  QuantizeResult r;
  r.indices = std::move(idx);
  r.z_rows = z_rows.val().clone();
  r.codebook_loss = nn::mse(q_rows, nn::stopgrad(z_rows));
  r.commitment_loss = nn::mse(z_rows, nn::stopgrad(q_rows));
  nn::Var st = nn::straight_through(z_rows, q_rows);
  r.z_q = nn::channels_from_rows(st, z.shape());
  return r;
}

std::vector<int> quantize_indices(const Tensor& z, const Codebook& cb) {
  require(z.ndim() >= 2 && z.dim(1) == cb.dim, Errc::shape_mismatch,
          "quantize_indices: latent channel count must equal codebook dim");
  nn::NoGradGuard ng;
  nn::Var rows = nn::rows_from_channels(nn::Var::constant(z));
  const int P = rows.dim(0);
  std::vector<int> idx(static_cast<size_t>(P));
  nn::kern::nearest_rows(rows.val().data(), P, cb.embeddings.val().data(), cb.K, cb.dim,
                         idx.data());
  return idx;
}

Tensor latent_from_indices(const std::vector<int>& indices, const Codebook& cb,
                           const std::vector<int>& shape) {
  require(shape.size() >= 2 && shape[1] == cb.dim, Errc::shape_mismatch,
          "latent_from_indices: shape[1] must equal codebook dim");
  int64_t S = 1;
  for (size_t i = 2; i < shape.size(); ++i) S *= shape[i];
  const int N = shape[0];
  require(static_cast<int64_t>(indices.size()) == N * S, Errc::shape_mismatch,
          "latent_from_indices: index count does not match shape");
  Tensor out(shape);
  const float* e = cb.embeddings.val().data();
  float* po = out.data();
  for (int n = 0; n < N; ++n)
    for (int64_t s = 0; s < S; ++s) {
      const int k = indices[static_cast<size_t>(n * S + s)];
      require(k >= 0 && k < cb.K, Errc::invalid_argument, "latent index out of range");
      for (int c = 0; c < cb.dim; ++c)
        po[(static_cast<int64_t>(n) * cb.dim + c) * S + s] = e[static_cast<int64_t>(k) * cb.dim + c];
    }
  return out;
}

void ema_codebook_update(Codebook& cb, EmaCodebookState& state, const Tensor& z_rows,
                         const std::vector<int>& indices, double decay, double eps) {
  const int K = cb.K, c = cb.dim;
  const int P = static_cast<int>(indices.size());
  require(z_rows.ndim() == 2 && z_rows.dim(0) == P && z_rows.dim(1) == c, Errc::shape_mismatch,
          "ema_codebook_update: rows must be [P, dim]");
  if (!state.initialized) {
    // Unit prior counts keep unused entries fixed: means and sizes then
    // decay at the same rate, so their ratio (the embedding) is unchanged.
    state.cluster_size.assign(static_cast<size_t>(K), 1.0);
    state.means.assign(static_cast<size_t>(K) * c, 0.0);
    const float* e = cb.embeddings.val().data();
    for (int64_t i = 0; i < static_cast<int64_t>(K) * c; ++i) state.means[static_cast<size_t>(i)] = e[i];
    state.initialized = true;
  }
  std::vector<double> batch_size(static_cast<size_t>(K), 0.0);
  std::vector<double> batch_sum(static_cast<size_t>(K) * c, 0.0);
  const float* zr = z_rows.data();
  for (int p = 0; p < P; ++p) {
    const int k = indices[static_cast<size_t>(p)];
    batch_size[static_cast<size_t>(k)] += 1.0;
    for (int j = 0; j < c; ++j)
      batch_sum[static_cast<size_t>(k) * c + j] += zr[static_cast<int64_t>(p) * c + j];
  }
  double total = 0.0;
  for (int k = 0; k < K; ++k) {
    state.cluster_size[static_cast<size_t>(k)] =
        decay * state.cluster_size[static_cast<size_t>(k)] + (1.0 - decay) * batch_size[static_cast<size_t>(k)];
    total += state.cluster_size[static_cast<size_t>(k)];
    for (int j = 0; j < c; ++j) {
      auto& m = state.means[static_cast<size_t>(k) * c + j];
      m = decay * m + (1.0 - decay) * batch_sum[static_cast<size_t>(k) * c + j];
    }
  }
  // Laplace smoothing keeps rarely used entries from collapsing to zero.
  float* e = cb.embeddings.mutable_val().data();
  for (int k = 0; k < K; ++k) {
    const double n = (state.cluster_size[static_cast<size_t>(k)] + eps) / (total + K * eps) * total;
    for (int j = 0; j < c; ++j)
      e[static_cast<int64_t>(k) * c + j] =
          static_cast<float>(state.means[static_cast<size_t>(k) * c + j] / n);
  }
}

int reseed_dead_codes(Codebook& cb, const Tensor& encoder_rows, Rng& rng) {
  require(encoder_rows.ndim() == 2 && encoder_rows.dim(1) == cb.dim, Errc::shape_mismatch,
          "reseed_dead_codes: pool must be [P, dim]");
  const int P = encoder_rows.dim(0);
  if (P == 0) return 0;
  int n = 0;
  float* e = cb.embeddings.mutable_val().data();
  const float* pool = encoder_rows.data();
  for (int k = 0; k < cb.K; ++k) {
    if (cb.usage_counts[static_cast<size_t>(k)] != 0) continue;
    const int p = rng.uniform_int(P);
    for (int j = 0; j < cb.dim; ++j)
      e[static_cast<int64_t>(k) * cb.dim + j] = pool[static_cast<int64_t>(p) * cb.dim + j];
    ++n;
  }
  return n;
}

}  // namespace occdiff::vq
