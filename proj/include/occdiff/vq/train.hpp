// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Autoencoder training: Adam on the combined loss, EMA shadow weights for
// evaluation, per-epoch validation IoU/mIoU with early stopping, dead-code
// reseeding, JSONL logs, and last/best checkpoints under out_dir.

#pragma once

#include <filesystem>

#include "occdiff/vq/vqvae.hpp"

namespace occdiff::vq {

struct TrainSchedule {
  int epochs = 40;
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 1;
  double target_iou = 0.95;  // early stop once both validation targets hold
  double target_miou = 0.85;
  double grad_clip = 5.0;
  int max_train_frames = 0;  // 0 = every frame in the split
  int max_val_frames = 0;
  std::filesystem::path out_dir;

  void validate() const;
};

struct TrainResult {
  int epochs_run = 0;
  double final_loss = 0.0;
  double val_iou = 0.0;
  double val_miou = 0.0;
  bool reached_targets = false;
  std::vector<double> epoch_losses;  // mean training loss per epoch
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
};

// Trains on the "train" split of the dataset under dataset_dir and returns
// the model with EMA weights applied (the evaluation weights). Divergence
// (non-finite loss) raises a numeric error naming the last good checkpoint.
VqVae train_vqvae(const std::filesystem::path& dataset_dir, const AutoencoderConfig& config,
                  const TrainSchedule& schedule, TrainResult* result = nullptr);

}  // namespace occdiff::vq
