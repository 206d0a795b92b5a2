// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Core scene types: semantic occupancy grids, BEV label maps, ego poses,
// labeled point clouds, and their on-disk formats.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "occdiff/nn/tensor.hpp"

namespace occdiff::voxel {

// Wraps into [-pi, pi).
double normalize_yaw(double yaw);

// Dense voxel grid of class labels. Class 0 is always "empty".
// Linear index: ((x*W) + y)*Z + z, z fastest, so vertical columns
// are contiguous (ground-level extraction walks one column).
struct SemanticOccupancyMap {
  int H = 0, W = 0, Z = 0;
  int num_classes = 0;
  float voxel_size_xy = 0.0f;  // meters per voxel in x and y
  float voxel_size_z = 0.0f;   // meters per voxel in z
  std::array<float, 3> origin = {0.0f, 0.0f, 0.0f};  // world position of voxel (0,0,0) corner
  std::vector<uint8_t> labels;

  static SemanticOccupancyMap empty(int H, int W, int Z, int num_classes, float vs_xy, float vs_z,
                                    std::array<float, 3> origin = {0, 0, 0});

  int64_t index(int x, int y, int z) const {
    return (static_cast<int64_t>(x) * W + y) * Z + z;
  }
  uint8_t at(int x, int y, int z) const { return labels[static_cast<size_t>(index(x, y, z))]; }
  void set(int x, int y, int z, uint8_t v) { labels[static_cast<size_t>(index(x, y, z))] = v; }

  std::array<float, 3> voxel_center(int x, int y, int z) const {
    return {origin[0] + (static_cast<float>(x) + 0.5f) * voxel_size_xy,
            origin[1] + (static_cast<float>(y) + 0.5f) * voxel_size_xy,
            origin[2] + (static_cast<float>(z) + 0.5f) * voxel_size_z};
  }

  // Raises on any violated invariant (dims, sizes, label range).
  void validate() const;
  bool operator==(const SemanticOccupancyMap& o) const = default;
};

// Top-down label map paired with an occupancy grid: pixel (x,y) covers
// column (x,y). Linear index: x*W + y.
struct BEVLayout {
  int H = 0, W = 0;
  int num_classes = 0;
  float meters_per_pixel = 0.0f;
  std::vector<uint8_t> labels;

  static BEVLayout background(int H, int W, int num_classes, float meters_per_pixel);

  int64_t index(int x, int y) const { return static_cast<int64_t>(x) * W + y; }
  uint8_t at(int x, int y) const { return labels[static_cast<size_t>(index(x, y))]; }
  void set(int x, int y, uint8_t v) { labels[static_cast<size_t>(index(x, y))] = v; }

  void validate() const;
  bool operator==(const BEVLayout& o) const = default;
};

struct EgoPose {
  int64_t frame_index = 0;
  double x = 0.0, y = 0.0;  // meters, world frame
  double yaw = 0.0;         // radians, normalized to [-pi, pi)
  std::optional<double> timestamp;  // seconds

  bool operator==(const EgoPose& o) const = default;
};

struct PointCloudSem {
  std::vector<std::array<float, 3>> points;  // world-frame meters
  std::vector<uint8_t> labels;               // never the empty class
};

// ---- transforms ------------------------------------------------------------

// Centered sub-grid; origin shifts so retained voxels keep their world
// coordinates. target dims must not exceed the source dims.
SemanticOccupancyMap crop_center(const SemanticOccupancyMap& map, int H, int W, int Z);

// One-hot expansion, channel-first [C,H,W,Z] (the layout the models consume).
nn::Tensor to_onehot(const SemanticOccupancyMap& map);

// Argmax along the class axis of a [C,H,W,Z] tensor, back into a map with
// the given geometry.
SemanticOccupancyMap from_onehot(const nn::Tensor& onehot, const SemanticOccupancyMap& like);

// One point per non-empty voxel, at the voxel center in world coordinates.
PointCloudSem to_pointcloud(const SemanticOccupancyMap& map);

// ---- file formats ------------------------------------------------------------
// .socc: "SOCC", version u32 (=1), H,W,Z u32, num_classes u32,
//        voxel_size_xy f32, voxel_size_z f32, origin x/y/z f32, labels.
// .sbev: "SBEV", version u32 (=1), H,W u32, num_classes u32,
//        meters_per_pixel f32, labels.
// pose log: UTF-8 lines "frame_index x y yaw [timestamp]", '#' comments.

void save_socc(const std::filesystem::path& path, const SemanticOccupancyMap& map);
SemanticOccupancyMap load_socc(const std::filesystem::path& path);

void save_sbev(const std::filesystem::path& path, const BEVLayout& bev);
BEVLayout load_sbev(const std::filesystem::path& path);

void save_poselog(const std::filesystem::path& path, const std::vector<EgoPose>& poses);
std::vector<EgoPose> load_poselog(const std::filesystem::path& path);

}  // namespace occdiff::voxel
