// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural driving worlds: a connected road network with sidewalks,
// crossings, and placed objects, rendered into ego-frame scene samples.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "occdiff/synth/palette.hpp"
#include "occdiff/voxel/voxel.hpp"

namespace occdiff::synth {

struct WorldSpec {
  uint64_t seed = 0;
  double extent_m = 200.0;

  int road_segments = 5;
  double lane_width_m = 3.5;      // road half-width (one lane per direction)
  double max_curvature = 0.02;    // |d heading / d s|, rad per meter
  double sidewalk_width_m = 2.5;
  int crossings_per_road = 2;

  // Objects per square kilometer. Rare classes are kept dense enough that a
  // typical ego frame contains several instances of each.
  double building_density = 700.0;
  double vehicle_density = 1000.0;
  double pole_density = 2200.0;
  double vegetation_density = 700.0;
  double terrain_density = 500.0;
  double other_density = 800.0;

  ClassPalette palette = ClassPalette::synth_default();

  void validate() const;
};

// A road centerline with precomputed cumulative arclengths.
struct RoadPolyline {
  std::vector<std::array<double, 2>> pts;
  std::vector<double> cum_s;  // cum_s[i] = arclength at pts[i]
  double length() const { return cum_s.empty() ? 0.0 : cum_s.back(); }
  std::array<double, 2> point_at(double s) const;
  double heading_at(double s) const;
};

struct OrientedBox {  // center, half extents, yaw; used for buildings/vehicles
  double cx, cy, hx, hy, yaw, height_m;
  bool contains(double px, double py) const;
  double circumradius() const;
};

struct Pole {
  double x, y, height_m;
};
struct VegPatch {
  double x, y, radius_m, height_m;
};
struct RectPatch {  // axis-aligned ground patch (terrain) or small box (other)
  double cx, cy, hx, hy, height_m;
};
struct Crossing {
  double s;       // arclength along its road
  int road;       // road index
};

struct World {
  WorldSpec spec;
  std::vector<RoadPolyline> roads;
  std::vector<Crossing> crossings;
  std::vector<OrientedBox> buildings;
  std::vector<OrientedBox> vehicles;
  std::vector<Pole> poles;
  std::vector<VegPatch> vegetation;
  std::vector<RectPatch> terrain;
  std::vector<RectPatch> others;

  // Distance from a world point to the nearest road centerline.
  double road_distance(double px, double py) const;
};

struct SceneSample {
  voxel::BEVLayout bev;
  voxel::SemanticOccupancyMap occ;
  voxel::EgoPose pose;
  std::string scene_id;
  int64_t frame_index = 0;
};

// Deterministic in spec.seed. Raises Errc::generation naming the class
// whose density cannot be satisfied after bounded retries.
World generate_world(const WorldSpec& spec);

struct FrameGeometry {
  int H = 48, W = 48, Z = 8;
  float voxel_size_xy = 0.8f;
  float voxel_size_z = 0.8f;
};

// Pure function of (world, pose, geometry): ego at the grid center looking
// along +x. Content outside the world extent renders as empty/background.
SceneSample render_frame(const World& world, const voxel::EgoPose& pose,
                         const FrameGeometry& geom);

}  // namespace occdiff::synth
