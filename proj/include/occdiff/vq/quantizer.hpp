// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Vector quantization of latent grids against a learned codebook.

#pragma once

#include <cstdint>
#include <vector>

#include "occdiff/nn/autograd.hpp"
#include "occdiff/util/rng.hpp"

namespace occdiff::vq {

using nn::Tensor;

// K x dim codebook. Embeddings live in a Var so they can be registered as a
// parameter and learned by gradient; usage_counts track how often each entry
// was selected since the last reset_usage().
struct Codebook {
  int K = 0;
  int dim = 0;
  nn::Var embeddings;                // [K, dim]
  std::vector<int64_t> usage_counts;  // size K

  static Codebook create(int K, int dim, Rng& rng, float init_scale = 1.0f);

  void reset_usage();
  int64_t usage_sum() const;
  int64_t used_entries() const;  // entries with nonzero usage
  void validate() const;
};

struct QuantizeResult {
  nn::Var z_q;             // straight-through output, same shape as z
  nn::Var codebook_loss;   // mean((z_q - sg[z])^2), gradient to codebook only
  nn::Var commitment_loss; // mean((z - sg[z_q])^2), gradient to encoder only
  std::vector<int> indices;  // one per latent position, position-major
  Tensor z_rows;             // pre-quantization latent vectors, [P, dim]
};

// z: [N, c, spatial...] with c == cb.dim. Picks the Euclidean-nearest
// codebook row per position (ties to the lowest index), increments
// usage_counts, and returns the straight-through surrogate whose gradient
// w.r.t. z is the identity.
QuantizeResult quantize(const nn::Var& z, Codebook& cb);

// Non-tape path: nearest indices for a plain latent tensor.
std::vector<int> quantize_indices(const Tensor& z, const Codebook& cb);

// Rebuilds the quantized latent [N, c, spatial...] from indices.
Tensor latent_from_indices(const std::vector<int>& indices, const Codebook& cb,
                           const std::vector<int>& shape);

// Exponential-moving-average codebook update (used instead of the gradient
// path when enabled): cluster sizes and means are blended with the batch
// assignments and embeddings set to the smoothed means.
struct EmaCodebookState {
  std::vector<double> cluster_size;  // K
  std::vector<double> means;         // K x dim
  bool initialized = false;
};
void ema_codebook_update(Codebook& cb, EmaCodebookState& state, const Tensor& z_rows,
                         const std::vector<int>& indices, double decay, double eps = 1e-5);

// Resets entries whose usage count is zero to random rows drawn from the
// given pool of encoder outputs ([P, dim]); returns how many were reseeded.
int reseed_dead_codes(Codebook& cb, const Tensor& encoder_rows, Rng& rng);

}  // namespace occdiff::vq
