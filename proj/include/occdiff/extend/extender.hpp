// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Unbounded scene extension: project already-generated content into the next
// ego pose, generate the unknown remainder with masked sampling, and merge
// the result into a sparse world-frame store.
//
// Poses are planar (x, y, yaw) with a fixed z axis. Label resampling is
// nearest-neighbor; a latent cell counts as unknown when any voxel of its
// receptive block is unknown.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "occdiff/diffusion/denoiser.hpp"
#include "occdiff/diffusion/engine.hpp"
#include "occdiff/util/image.hpp"
#include "occdiff/voxel/voxel.hpp"
#include "occdiff/vq/vqvae.hpp"

namespace occdiff::extend {

using nn::Tensor;

// Frame grid shared by every registered frame of a scene.
struct FrameGrid {
  int H = 48, W = 48, Z = 8;
  float voxel_size_xy = 0.8f;
  float voxel_size_z = 0.8f;

  void validate() const;
  bool operator==(const FrameGrid& o) const = default;
};

// Projection of a source frame into a target pose: per-voxel known mask,
// the resampled known content, and the latent-resolution unknown mask.
struct OverlapMask {
  Tensor voxel_mask;                     // [H,W,Z], 1 = unknown
  voxel::SemanticOccupancyMap x_masked;  // known labels; empty where unknown
  Tensor latent_mask;                    // [H/f, W/f, Z/f_z], any-pooled

  double unknown_fraction() const;
};

// Latent-resolution any-pooling: a cell is unknown iff any voxel of its
// f x f x f_z block is unknown.
Tensor pool_unknown_any(const Tensor& voxel_mask, int f, int f_z);

// Resamples x_t (ego frame of p_t) into the ego frame of p_next. Voxels
// whose source falls outside the previous grid are unknown.
OverlapMask project(const voxel::SemanticOccupancyMap& x_t, const voxel::EgoPose& p_t,
                    const voxel::EgoPose& p_next, int f, int f_z);

// Sparse world-frame voxel store with per-voxel provenance and a record of
// which ground columns any registered frame has observed.
class GlobalScene {
 public:
  struct Cell {
    uint8_t label = 0;
    int32_t frame = -1;  // index into poses() of the last writer
  };

  GlobalScene(const FrameGrid& grid, int num_classes);

  const FrameGrid& grid() const { return grid_; }
  int num_classes() const { return num_classes_; }
  const std::vector<voxel::EgoPose>& poses() const { return poses_; }
  const std::unordered_map<uint64_t, Cell>& cells() const { return cells_; }
  bool empty() const { return poses_.empty(); }

  static uint64_t key(int32_t ix, int32_t iy, int32_t iz);
  static void unkey(uint64_t k, int32_t& ix, int32_t& iy, int32_t& iz);

  // Registers x_next at p_next: columns it covers become observed; non-empty
  // labels overwrite existing content (or yield to it when first_writer_wins);
  // its empty voxels never erase existing world content.
  void merge(const voxel::SemanticOccupancyMap& x_next, const voxel::EgoPose& p_next,
             bool first_writer_wins = false);

  // Renders the known world content into the ego frame at p_next. Unobserved
  // columns are unknown; observed columns contribute their stored labels
  // (empty where no cell is present).
  OverlapMask render_known(const voxel::EgoPose& p_next, int f, int f_z) const;

  // Top-down overview colored by the topmost non-empty class of each column;
  // empty/unobserved columns take palette color 0.
  img::Image overview(const std::vector<std::array<uint8_t, 3>>& palette) const;

  // Tile export: the world partitioned into tile_voxels x tile_voxels x Z
  // .socc files plus a manifest and a metadata file carrying poses, observed
  // columns, and provenance. load reconstructs the store exactly.
  void save(const std::filesystem::path& dir, int tile_voxels = 64) const;
  static GlobalScene load(const std::filesystem::path& dir);

 private:
  FrameGrid grid_;
  int num_classes_ = 0;
  std::unordered_map<uint64_t, Cell> cells_;
  std::unordered_set<uint64_t> observed_;  // packed (ix, iy) ground columns
  std::vector<voxel::EgoPose> poses_;
};

// One masked generation step: render the known overlap at p_next, encode it,
// sample the unknown remainder (mask-conditioned when the model was finetuned
// with mask channels, plain masked replacement otherwise), and decode.
struct ExtendParams {
  diffusion::SamplerSpec sampler;
  diffusion::GuidanceConfig guidance;
  bool use_guidance = true;
  float latent_std = 1.0f;       // training-set latent scale of the denoiser
  bool last_frame_only = false;  // condition on the newest frame instead of all of G
};

voxel::SemanticOccupancyMap extend_frame(diffusion::Denoiser& model, vq::VqVae& autoencoder,
                                         const GlobalScene& g, const voxel::EgoPose& p_next,
                                         const voxel::BEVLayout& bev_next,
                                         const diffusion::NoiseSchedule& ns,
                                         const ExtendParams& params);

// Ground-plane (z=0) label disagreement between a projection of prev into
// next's pose and next itself, over known overlap columns. 0 when they agree
// everywhere; counts only columns where either side is non-empty at z=0.
double seam_disagreement(const voxel::SemanticOccupancyMap& prev, const voxel::EgoPose& p_prev,
                         const voxel::SemanticOccupancyMap& next, const voxel::EgoPose& p_next);

}  // namespace occdiff::extend
