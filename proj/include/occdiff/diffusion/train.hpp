// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Denoiser training over frozen-autoencoder latents: frames are encoded and
// quantized once up front, standardized to unit variance by a single global
// scale, then fitted with Adam + EMA shadow weights. The latent scale is
// stored in every checkpoint so samplers can undo it before decoding.

#pragma once

#include <filesystem>

#include "occdiff/diffusion/denoiser.hpp"
#include "occdiff/diffusion/engine.hpp"
#include "occdiff/vq/vqvae.hpp"

namespace occdiff::diffusion {

struct DiffusionTrainSchedule {
  int epochs = 100;
  int batch_size = 16;
  double lr = 2e-4;
  uint64_t seed = 1;
  float cond_dropout = 0.1f;   // probability a sample trains against the null token
  double grad_clip = 5.0;
  double ema_decay = 0.999;
  bool freeze_bev_encoder = false;
  int max_train_frames = 0;  // 0 = every frame in the split
  int max_val_frames = 64;
  std::filesystem::path out_dir;

  void validate() const;
};

struct DiffusionTrainResult {
  int epochs_run = 0;
  double final_loss = 0.0;
  double final_val_loss = 0.0;
  float latent_std = 1.0f;  // training-set latent standard deviation
  std::vector<double> epoch_losses;
  std::filesystem::path last_checkpoint;
};

// Trains a denoiser on the "train" split under dataset_dir, encoding frames
// through the (frozen) autoencoder. The validation loss is computed each
// epoch with a fixed noise/timestep draw so the series is comparable across
// epochs. Divergence (non-finite loss) raises a numeric error naming the
// last good checkpoint. The returned model carries the EMA weights.
Denoiser train_denoiser(const std::filesystem::path& dataset_dir, vq::VqVae& autoencoder,
                        const DenoiserConfig& config, const DiffusionTrainSchedule& schedule,
                        const NoiseSchedule& ns, DiffusionTrainResult* result = nullptr);

}  // namespace occdiff::diffusion
