// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Diffusion over latent grids: noise schedule, forward process, training
// objective with classifier-free condition dropout, ancestral and
// deterministic samplers, guidance, and inpainting-style masked sampling.
//
// Sampling is a pure function of (seed, inputs). A sampler derives three
// independent streams from its seed: stream 0 draws the initial latent,
// stream 1 the per-step sampler noise, stream 2 the noising of known
// content during masked sampling. Masked sampling with an all-ones mask
// therefore reproduces unmasked sampling bit for bit.

#pragma once

#include <cstdint>
#include <vector>

#include "occdiff/diffusion/denoiser.hpp"
#include "occdiff/util/rng.hpp"

namespace occdiff::diffusion {

struct NoiseSchedule {
  int T = 0;
  std::vector<float> beta;      // index t-1 holds beta_t, t in [1, T]
  std::vector<float> alpha;     // 1 - beta_t
  std::vector<float> alphabar;  // prod_{s<=t} alpha_s

  static NoiseSchedule linear(int T = 1000, float beta_start = 1e-4f, float beta_end = 2e-2f);

  // t in [0, T]; alphabar_at(0) == 1.
  float alphabar_at(int t) const;
  void validate() const;
};

struct GuidanceConfig {
  enum class Form { kInterpolated, kAmplified };
  float w = 5.0f;
  Form form = Form::kInterpolated;
  void validate() const;
};

struct SamplerSpec {
  enum class Kind { kDdpm, kDdim };
  Kind kind = Kind::kDdim;
  int steps = 100;
  float eta = 0.0f;  // ddim stochasticity; 0 = deterministic
  uint64_t seed = 0;
  void validate(int T) const;
};

// z_t = sqrt(alphabar_t) z0 + sqrt(1 - alphabar_t) noise, t in [1, T].
Tensor forward_noise(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& ns);

// One optimization sample per batch row. Consumption order from rng: per
// sample its timestep then its condition-dropout flag, then one normal draw
// per element of the noise tensor.
struct TrainingBatch {
  Tensor z_t;
  Tensor noise;
  std::vector<int> t;
  std::vector<char> dropped;
};
TrainingBatch make_training_batch(const Tensor& z0, const NoiseSchedule& ns, float cond_dropout,
                                  Rng& rng);

struct LossOptions {
  float cond_dropout = 0.1f;
  bool freeze_bev_encoder = false;  // block gradients into the layout encoder
};

// Mean squared error between predicted and drawn noise. conds supplies one
// layout per sample for conditional models (dropped samples use the null
// token) and must be empty for unconditional ones. Raises a numeric error
// when the loss is not finite.
Var training_loss(Denoiser& model, const Tensor& z0,
                  const std::vector<const voxel::BEVLayout*>& conds, const NoiseSchedule& ns,
                  const LossOptions& opts, Rng& rng, TrainingBatch* batch_out = nullptr,
                  const MaskCondition* mask_cond = nullptr);

// Classifier-free guidance; exactly two model evaluations.
// interpolated: eps(null) + w (eps(cond) - eps(null));
// amplified:    (1+w) eps(cond) - w eps(null).
Tensor guided_noise(Denoiser& model, const Tensor& z_t, int t, const BEVEmbedding& cond,
                    const GuidanceConfig& g, const MaskCondition* mask_cond = nullptr);

// Ancestral posterior step; adds no noise at t == 1.
Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& ns,
                 Rng& rng);

// Deterministic-by-default step from t to t_prev < t; eta > 0 interpolates
// toward the ancestral sampler (eta = 1 with t_prev = t-1 matches it).
Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& ns, float eta, Rng& rng);

// Full reverse chain for one latent of the given [c,h,w,d] shape. cond may
// be null on a conditional model to sample its unconditional branch;
// guidance requires cond. The ddpm kind requires steps == T; ddim walks a
// uniformly strided timestep subsequence ending at 0.
Tensor sample_latent(Denoiser& model, const BEVEmbedding* cond,
                     const std::vector<int>& latent_shape, const SamplerSpec& spec,
                     const NoiseSchedule& ns, const GuidanceConfig* guidance);

// Inpainting sampler: every step keeps the known region (mask == 0) at the
// forward-noised known content and takes the unknown region from the model
// step; the final step substitutes the clean known content exactly.
// mask: [h,w,d] in {0,1} with 1 = generate; z0_known: [c,h,w,d] or
// [1,c,h,w,d], ignored where mask == 1. Mask-conditioned models receive the
// pair as their mask-condition input; plain models run unmodified (naive
// inpainting).
Tensor masked_sample(Denoiser& model, const BEVEmbedding* cond, const Tensor& mask,
                     const Tensor& z0_known, const SamplerSpec& spec, const NoiseSchedule& ns,
                     const GuidanceConfig* guidance);

// Global standard deviation over every element of the given latents.
float latent_std(const std::vector<Tensor>& latents);

}  // namespace occdiff::diffusion
