// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// 3D U-Net noise predictor over latent grids. A small convolutional encoder
// turns a top-down layout into a feature map at the latent horizontal
// resolution; that feature enters the U-Net by one of three pluggable routes
// (input concatenation, cross-attention, or normalization modulation). An
// optional mask-condition input supports inpainting-style sampling.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "occdiff/nn/blocks.hpp"
#include "occdiff/nn/params.hpp"
#include "occdiff/util/rng.hpp"
#include "occdiff/voxel/voxel.hpp"

namespace occdiff::diffusion {

using nn::Tensor;
using nn::Var;

enum class ConditioningMode { kConcat, kCrossAttention, kModulation, kNone };
std::string to_string(ConditioningMode m);
ConditioningMode conditioning_mode_from_string(const std::string& s);

struct DenoiserConfig {
  int latent_channels = 8;
  int bev_classes = 5;
  int bev_height = 48;  // full-resolution layout dims the model is built for
  int bev_width = 48;
  int bev_downsample_factor = 4;  // layout-to-latent horizontal factor
  int bev_embed_channels = 32;
  int base_channels = 32;
  std::vector<int> channel_multipliers = {1, 2, 4};
  int res_blocks_per_level = 1;
  // Level indices with attention; level i runs at resolution scale 2^i.
  std::vector<int> attention_levels = {1, 2};
  int time_embed_width = 128;
  ConditioningMode conditioning_mode = ConditioningMode::kConcat;
  bool learned_null_token = true;  // false: the no-condition token is zeros
  bool mask_conditioning = false;

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int channels_at(int level) const { return base_channels * channel_multipliers[level]; }
  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

// Encoded layout at the latent horizontal resolution: [N, c_emb, h, w].
struct BEVEmbedding {
  Var values;
};

// Inpainting conditioning at latent resolution. mask: [N,1,h,w,d] in {0,1}
// with 1 marking unknown cells; z_known: [N,c,h,w,d], zero where unknown.
struct MaskCondition {
  Tensor mask;
  Tensor z_known;

  // mask3d: [h,w,d]; z_known: [c,h,w,d] or [1,c,h,w,d].
  static MaskCondition from_single(const Tensor& mask3d, const Tensor& z_known);
  void validate(int latent_channels) const;
};

// [N, width] sinusoidal features of integer timesteps, halves sin/cos.
Tensor sinusoidal_time_embedding(const std::vector<int>& t, int width);

class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, uint64_t seed);

  // One layout -> [1, c_emb, H/f, W/f]. Raises for an unconditional model
  // or dims differing from the configured ones.
  BEVEmbedding embed_bev(const voxel::BEVLayout& b);

  // The "no condition" token, identical across calls, broadcast to the
  // embedding shape. Learned unless the config pins it to zeros.
  BEVEmbedding null_condition();

  // z_t: [N,c,h,w,d]; t: one non-negative timestep per sample. Conditional
  // models require cond (pass null_condition() for the unconditional
  // branch); mode none forbids it. mask_cond must match mask_conditioning.
  // Returns the predicted noise, same shape as z_t.
  Var predict_noise(const Var& z_t, const std::vector<int>& t, const BEVEmbedding* cond,
                    const MaskCondition* mask_cond = nullptr);

  // Single-sample convenience without taping.
  Tensor predict_noise_eval(const Tensor& z_t, int t, const BEVEmbedding* cond,
                            const MaskCondition* mask_cond = nullptr);

  // Copy with mask-condition channels appended to the input convolution,
  // zero-initialized so predictions are unchanged while the new inputs are
  // zero. This model must not already be mask-conditioned.
  Denoiser with_mask_channels() const;

  const DenoiserConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }

  void save(const std::filesystem::path& path, uint64_t seed,
            const nlohmann::json& extra_meta = nlohmann::json::object(),
            const nn::Ema* ema = nullptr) const;
  // prefer_ema loads the evaluation (EMA) weights when the file has them.
  static Denoiser load(const std::filesystem::path& path, bool prefer_ema = true,
                       nlohmann::json* meta_out = nullptr);

 private:
  // Residual block with a per-block time projection added after the first
  // convolution and optional feature-wise modulation after the second norm.
  struct TimeResBlock {
    nn::GroupNormLayer gn1, gn2;
    nn::Conv3dLayer c1, c2;  // c2 zero-init: the block starts as identity
    nn::LinearLayer temb;
    nn::LinearLayer mod_s, mod_t;  // zero-init; present in modulation mode
    bool modulated = false;

    static TimeResBlock create(nn::ParamStore& store, const std::string& name, int channels,
                               int temb_width, int mod_width, Rng& rng);
    Var forward(const Var& x, const Var& temb_act, const Var& mod) const;
  };

  // Pre-norm single-head attention with a residual output projection.
  // Self-attention over latent tokens, or cross-attention from latent
  // queries to layout tokens.
  struct AttentionBlock {
    nn::GroupNormLayer gn;
    nn::LinearLayer q, k, v, out;  // out zero-init: starts as identity
    bool cross = false;

    static AttentionBlock create(nn::ParamStore& store, const std::string& name, int channels,
                                 int source_channels, bool cross, Rng& rng);
    // src_rows: [N*Sk, c_src] flat source tokens (cross mode only).
    Var forward(const Var& x, const Var& src_rows, int src_tokens) const;
  };

  struct DownLevel {
    std::vector<TimeResBlock> res;
    std::vector<AttentionBlock> attn;  // parallel to res, or empty
    nn::Conv3dLayer down;              // to next level's channels; absent at the bottom
  };
  struct UpLevel {
    nn::Conv3dLayer merge;  // halves channels after the skip concat
    std::vector<TimeResBlock> res;
    std::vector<AttentionBlock> attn;
    nn::Conv3dLayer up;  // to previous level's channels; absent at level 0
  };

  int input_channels() const;
  Var run_unet(const Var& x, const Var& silu_temb, const Var& bev_rows, int bev_tokens,
               const Var& mod);

  DenoiserConfig cfg_;
  nn::ParamStore store_;

  nn::LinearLayer temb_l1_, temb_l2_;
  nn::Conv3dLayer in_conv_;
  std::vector<DownLevel> down_;
  std::vector<UpLevel> up_;
  nn::GroupNormLayer head_norm_;
  nn::Conv3dLayer head_out_;

  // Layout encoder (absent in mode none).
  nn::Conv3dLayer bev_stem_;
  std::vector<nn::Conv3dLayer> bev_widen_;
  nn::Conv3dLayer bev_head_;
  Var null_token_;                     // [c_emb]
  nn::LinearLayer mod_l1_, mod_l2_;  // pooled-embedding MLP, modulation mode
};

}  // namespace occdiff::diffusion
