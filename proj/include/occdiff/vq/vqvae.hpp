// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// 3D vector-quantized autoencoder over one-hot occupancy grids. The encoder
// halves x/y at every level and z at the first log2(z_downsample_factor)
// levels; the decoder mirrors it. Diffusion later runs in the quantized
// latent space.

#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "occdiff/nn/blocks.hpp"
#include "occdiff/nn/params.hpp"
#include "occdiff/synth/palette.hpp"
#include "occdiff/voxel/voxel.hpp"
#include "occdiff/vq/quantizer.hpp"

namespace occdiff::vq {

struct AutoencoderConfig {
  int num_classes = 9;
  int downsample_factor = 4;    // per horizontal axis; one of {2,4,8}
  int z_downsample_factor = 2;  // power of two <= downsample_factor
  int base_channels = 16;
  int residual_blocks_per_level = 1;
  int codebook_size = 1024;  // K
  int latent_channels = 8;   // c
  float commitment_beta = 0.25f;
  std::vector<float> class_weights;  // size num_classes; empty = uniform
  float ema_decay = 0.999f;          // EMA over model weights, used at eval
  bool ema_codebook = false;         // codebook by EMA instead of gradient

  int levels() const;  // log2(downsample_factor)
  void validate() const;
  nlohmann::json to_json() const;
  static AutoencoderConfig from_json(const nlohmann::json& j);
};

// Inverse-frequency class weights from voxel counts, clipped to
// [clip_lo, clip_hi]; a uniform distribution maps to all-ones.
std::vector<float> inverse_frequency_weights(const std::vector<int64_t>& class_counts,
                                             float clip_lo = 0.1f, float clip_hi = 25.0f);

class VqVae {
 public:
  VqVae(const AutoencoderConfig& cfg, uint64_t seed);

  // x: one-hot [N, num_classes, X, Y, Z] -> pre-quantization latent
  // [N, latent_channels, X/f, Y/f, Z/f_z]. Dims must divide evenly.
  nn::Var encode(const nn::Var& x) const;
  QuantizeResult quantize(const nn::Var& z) { return vq::quantize(z, codebook_); }
  // z_q: latent -> class logits [N, num_classes, X, Y, Z].
  nn::Var decode(const nn::Var& z_q) const;

  // Inference helpers (no tape).
  Tensor encode_quantized(const voxel::SemanticOccupancyMap& map);  // [1,c,x',y',z']
  voxel::SemanticOccupancyMap decode_to_map(const Tensor& z_q, float voxel_size_xy,
                                            float voxel_size_z,
                                            const std::array<float, 3>& origin) const;
  voxel::SemanticOccupancyMap reconstruct(const voxel::SemanticOccupancyMap& map);

  std::vector<int> latent_shape(int N, int X, int Y, int Z) const;

  const AutoencoderConfig& config() const { return cfg_; }
  AutoencoderConfig& mutable_config() { return cfg_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

  void save(const std::filesystem::path& path, const synth::ClassPalette& palette, uint64_t seed,
            const nlohmann::json& extra_meta = nlohmann::json::object(),
            const nn::Ema* ema = nullptr) const;
  // prefer_ema loads the evaluation (EMA) weights when the file has them.
  static VqVae load(const std::filesystem::path& path, bool prefer_ema = true,
                    synth::ClassPalette* palette_out = nullptr);

 private:
  struct EncLevel {
    nn::Conv3dLayer widen;
    std::vector<nn::ResBlock3d> res;
    int pz = 1;
  };
  struct DecLevel {
    std::vector<nn::ResBlock3d> res;
    nn::Conv3dLayer narrow;
    int pz = 1;
  };

  AutoencoderConfig cfg_;
  nn::ParamStore store_;
  Codebook codebook_;

  nn::Conv3dLayer enc_stem_;
  std::vector<EncLevel> enc_levels_;
  nn::GroupNormLayer enc_head_norm_;
  nn::Conv3dLayer enc_head_;

  nn::Conv3dLayer dec_stem_;
  std::vector<DecLevel> dec_levels_;
  nn::GroupNormLayer dec_head_norm_;
  nn::Conv3dLayer dec_head_;
};

// Total loss: weighted cross-entropy reconstruction + codebook term +
// commitment_beta * commitment term. Raises a numeric error when the result
// is not finite. include_codebook_term is false under EMA-codebook training.
nn::Var vqvae_loss(const nn::Var& logits, const std::vector<uint8_t>& labels,
                   const QuantizeResult& q, const std::vector<float>& class_weights,
                   float commitment_beta, bool include_codebook_term = true);

// One-hot batch assembly: maps must share dims; out [N, C, X, Y, Z] plus the
// concatenated label vector.
std::pair<Tensor, std::vector<uint8_t>> batch_one_hot(
    const std::vector<const voxel::SemanticOccupancyMap*>& maps);

}  // namespace occdiff::vq
