// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Masked-completion finetuning: specializes a pretrained denoiser by adding
// mask-condition input channels and training on consecutive-frame pairs,
// where the earlier frame projected into the later pose provides the known
// region and the later frame is the target.

#pragma once

#include <filesystem>

#include "occdiff/diffusion/train.hpp"
#include "occdiff/extend/extender.hpp"

namespace occdiff::extend {

// latent_std is the pretrained model's training-set latent scale; it is
// reused unchanged and stored with every checkpoint. mask_dropout is the
// per-sample probability of replacing a pair's mask condition with the
// all-unknown mask and zero known content, which keeps the model usable
// for from-scratch generation.
diffusion::Denoiser finetune_extension(const std::filesystem::path& dataset_dir,
                                       const diffusion::Denoiser& pretrained,
                                       vq::VqVae& autoencoder, float latent_std,
                                       const diffusion::DiffusionTrainSchedule& schedule,
                                       const diffusion::NoiseSchedule& ns,
                                       diffusion::DiffusionTrainResult* result = nullptr,
                                       float mask_dropout = 0.2f);

}  // namespace occdiff::extend
