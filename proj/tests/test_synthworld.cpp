// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <set>

#include "occdiff/synth/dataset.hpp"
#include "occdiff/synth/world.hpp"
#include "occdiff/util/error.hpp"
#include "occdiff/util/io.hpp"

using namespace occdiff;
using namespace occdiff::synth;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("occdiff_synth_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

WorldSpec small_spec(uint64_t seed) {
  WorldSpec s;
  s.seed = seed;
  s.extent_m = 160.0;
  s.road_segments = 3;
  s.building_density = 500.0;
  s.vehicle_density = 300.0;
  s.pole_density = 400.0;
  s.vegetation_density = 300.0;
  s.terrain_density = 200.0;
  s.other_density = 100.0;
  return s;
}

// Hand-built world: one straight road along +x at y = y0.
World straight_road_world(double y0, double extent = 200.0) {
  WorldSpec spec;
  spec.seed = 1;
  spec.extent_m = extent;
  spec.road_segments = 0;
  spec.building_density = spec.vehicle_density = spec.pole_density = 0;
  spec.vegetation_density = spec.terrain_density = spec.other_density = 0;
  World w = generate_world(spec);
  RoadPolyline r;
  for (double x = 10.0; x <= extent - 10.0; x += 2.0) r.pts.push_back({x, y0});
  r.cum_s.resize(r.pts.size());
  for (size_t i = 1; i < r.pts.size(); ++i) r.cum_s[i] = r.cum_s[i - 1] + 2.0;
  w.roads.push_back(r);
  return w;
}

uint8_t ground_label(const voxel::SemanticOccupancyMap& occ, int x, int y) {
  for (int z = 0; z < occ.Z; ++z)
    if (occ.at(x, y, z) != 0) return occ.at(x, y, z);
  return 0;
}

}  // namespace

TEST_CASE("generate_world is bit-identical for the same seed") {
  auto a = generate_world(small_spec(7));
  auto b = generate_world(small_spec(7));
  REQUIRE(a.roads.size() == b.roads.size());
  for (size_t r = 0; r < a.roads.size(); ++r) {
    REQUIRE(a.roads[r].pts.size() == b.roads[r].pts.size());
    for (size_t i = 0; i < a.roads[r].pts.size(); ++i) {
      CHECK(a.roads[r].pts[i][0] == b.roads[r].pts[i][0]);
      CHECK(a.roads[r].pts[i][1] == b.roads[r].pts[i][1]);
    }
  }
  REQUIRE(a.buildings.size() == b.buildings.size());
  for (size_t i = 0; i < a.buildings.size(); ++i) {
    CHECK(a.buildings[i].cx == b.buildings[i].cx);
    CHECK(a.buildings[i].yaw == b.buildings[i].yaw);
  }
  REQUIRE(a.vehicles.size() == b.vehicles.size());
  REQUIRE(a.poles.size() == b.poles.size());

  auto c = generate_world(small_spec(8));
  bool differs = c.roads.size() != a.roads.size() || c.buildings.size() != a.buildings.size() ||
                 (a.roads.size() > 0 && c.roads[0].pts[0] != a.roads[0].pts[0]);
  CHECK(differs);
}

TEST_CASE("zero building density places no buildings") {
  auto spec = small_spec(3);
  spec.building_density = 0.0;
  auto w = generate_world(spec);
  CHECK(w.buildings.empty());
}

TEST_CASE("vehicles sit on the road surface, poles on sidewalks, buildings off both") {
  auto spec = small_spec(11);
  spec.extent_m = 200.0;
  spec.road_segments = 2;
  auto w = generate_world(spec);
  REQUIRE(!w.vehicles.empty());
  for (const auto& v : w.vehicles) CHECK(w.road_distance(v.cx, v.cy) < spec.lane_width_m);
  REQUIRE(!w.poles.empty());
  for (const auto& p : w.poles) {
    const double d = w.road_distance(p.x, p.y);
    CHECK(d > spec.lane_width_m);
    CHECK(d < spec.lane_width_m + spec.sidewalk_width_m);
  }
  REQUIRE(!w.buildings.empty());
  for (const auto& b : w.buildings)
    CHECK(w.road_distance(b.cx, b.cy) >
          spec.lane_width_m + spec.sidewalk_width_m + b.circumradius());
}

TEST_CASE("roads form a connected network: each branch starts on an earlier road") {
  auto spec = small_spec(13);
  spec.road_segments = 5;
  auto w = generate_world(spec);
  REQUIRE(w.roads.size() >= 2);
  for (size_t r = 1; r < w.roads.size(); ++r) {
    double best = 1e18;
    const auto& start = w.roads[r].pts[0];
    for (size_t q = 0; q < r; ++q)
      for (size_t i = 0; i + 1 < w.roads[q].pts.size(); ++i) {
        const auto& a = w.roads[q].pts[i];
        const auto& b = w.roads[q].pts[i + 1];
        const double vx = b[0] - a[0], vy = b[1] - a[1];
        const double wx = start[0] - a[0], wy = start[1] - a[1];
        const double vv = vx * vx + vy * vy;
        double t = vv > 0 ? std::clamp((wx * vx + wy * vy) / vv, 0.0, 1.0) : 0.0;
        best = std::min(best, std::hypot(wx - t * vx, wy - t * vy));
      }
    CHECK(best < 1e-9);
  }
}

TEST_CASE("infeasible placement raises a generation error naming the class") {
  auto spec = small_spec(2);
  spec.road_segments = 0;  // vehicles need a road
  spec.vehicle_density = 300.0;
  spec.building_density = spec.pole_density = 0.0;
  spec.vegetation_density = spec.terrain_density = spec.other_density = 0.0;
  CHECK_THROWS_WITH_AS(generate_world(spec), doctest::Contains("vehicle"), Error);
}

TEST_CASE("render: empty world gives all-empty occ and all-background bev") {
  WorldSpec spec;
  spec.seed = 1;
  spec.road_segments = 0;
  spec.building_density = spec.vehicle_density = spec.pole_density = 0;
  spec.vegetation_density = spec.terrain_density = spec.other_density = 0;
  auto w = generate_world(spec);
  voxel::EgoPose pose;
  pose.x = pose.y = 100.0;
  auto s = render_frame(w, pose, FrameGeometry{});
  for (auto l : s.occ.labels) CHECK(l == 0);
  for (auto l : s.bev.labels) CHECK(l == 0);
}

TEST_CASE("render: straight road heading east forms a horizontal band through center") {
  const double y0 = 100.0;
  World w = straight_road_world(y0);
  voxel::EgoPose pose;
  pose.x = 100.0;
  pose.y = y0;  // on the centerline
  pose.yaw = 0.0;  // heading east = +x
  FrameGeometry geom;
  auto s = render_frame(w, pose, geom);
  const uint8_t road = static_cast<uint8_t>(w.spec.palette.occ_index("road"));
  const uint8_t bev_road = static_cast<uint8_t>(w.spec.palette.bev_index("road"));
  // Lateral offset of column gy from ego: (gy + 0.5 - W/2) * vs.
  for (int gx = 0; gx < geom.H; ++gx) {
    for (int gy = 0; gy < geom.W; ++gy) {
      const double lat = std::abs((gy + 0.5 - geom.W / 2.0) * geom.voxel_size_xy);
      if (lat <= w.spec.lane_width_m - 0.5) {
        CHECK(s.occ.at(gx, gy, 0) == road);
        CHECK(s.bev.at(gx, gy) == bev_road);
      } else if (lat > w.spec.lane_width_m + w.spec.sidewalk_width_m + 0.5) {
        CHECK(s.occ.at(gx, gy, 0) == 0);
      }
    }
  }
}

TEST_CASE("render is a pure function of world and pose") {
  auto w = generate_world(small_spec(21));
  voxel::EgoPose pose;
  pose.x = 80;
  pose.y = 80;
  pose.yaw = 0.7;
  auto a = render_frame(w, pose, FrameGeometry{});
  auto b = render_frame(w, pose, FrameGeometry{});
  CHECK(a.occ == b.occ);
  CHECK(a.bev == b.bev);
}

TEST_CASE("render shift-equivariance: n-voxel translation shifts the interior") {
  auto w = generate_world(small_spec(31));
  FrameGeometry geom;
  voxel::EgoPose p1;
  p1.x = 70;
  p1.y = 85;
  p1.yaw = 0.0;
  const int n = 5;
  voxel::EgoPose p2 = p1;
  p2.x = p1.x + n * geom.voxel_size_xy;
  auto a = render_frame(w, p1, geom);
  auto b = render_frame(w, p2, geom);
  for (int gx = 0; gx + n < geom.H; ++gx)
    for (int gy = 0; gy < geom.W; ++gy)
      for (int z = 0; z < geom.Z; ++z) CHECK(b.occ.at(gx, gy, z) == a.occ.at(gx + n, gy, z));
}

TEST_CASE("bev and occupancy ground extraction agree on road pixels") {
  auto w = generate_world(small_spec(41));
  const uint8_t o_road = static_cast<uint8_t>(w.spec.palette.occ_index("road"));
  const uint8_t o_veh = static_cast<uint8_t>(w.spec.palette.occ_index("vehicle"));
  const uint8_t b_road = static_cast<uint8_t>(w.spec.palette.bev_index("road"));
  const uint8_t b_cross = static_cast<uint8_t>(w.spec.palette.bev_index("crossing"));
  const uint8_t b_veh = static_cast<uint8_t>(w.spec.palette.bev_index("vehicle"));
  int64_t road_px = 0, agree = 0;
  for (int trial = 0; trial < 4; ++trial) {
    voxel::EgoPose pose;
    const auto& road = w.roads[0];
    const auto pt = road.point_at(road.length() * (0.2 + 0.2 * trial));
    pose.x = pt[0];
    pose.y = pt[1];
    pose.yaw = road.heading_at(road.length() * (0.2 + 0.2 * trial));
    auto s = render_frame(w, pose, FrameGeometry{});
    for (int x = 0; x < s.bev.H; ++x)
      for (int y = 0; y < s.bev.W; ++y) {
        const uint8_t bl = s.bev.at(x, y);
        if (bl != b_road && bl != b_cross && bl != b_veh) continue;
        ++road_px;
        const uint8_t g = ground_label(s.occ, x, y);
        agree += (g == o_road || g == o_veh);
      }
  }
  REQUIRE(road_px > 200);
  CHECK(static_cast<double>(agree) >= 0.99 * static_cast<double>(road_px));
}

TEST_CASE("generate_dataset writes a loadable dataset with the requested split") {
  const auto dir = tmpdir("ds");
  DatasetParams params;
  params.spec = small_spec(77);
  params.spec.extent_m = 160;
  params.n_scenes = 10;
  params.frames_per_scene = 9;
  params.min_drive_m = 15.0;
  params.frame_step_m = 2.0;
  params.train_fraction = 0.8;
  params.geom = FrameGeometry{.H = 24, .W = 24, .Z = 4, .voxel_size_xy = 0.8f, .voxel_size_z = 0.8f};
  Manifest m = generate_dataset(params, dir);

  CHECK(m.frames.size() == 90);
  // Exactly 8 train scenes and 2 val scenes.
  std::set<std::string> train_scenes, val_scenes;
  for (const auto& f : m.frames)
    (f.split == "train" ? train_scenes : val_scenes).insert(f.scene_id);
  CHECK(train_scenes.size() == 8);
  CHECK(val_scenes.size() == 2);

  Manifest loaded = Manifest::load(dir / "manifest.jsonl");
  REQUIRE(loaded.frames.size() == m.frames.size());
  CHECK(loaded.frames[0] == m.frames[0]);

  // Every referenced file exists and loads; pose logs satisfy the minimum
  // drive and kinematic plausibility.
  const double max_speed = 15.0;
  for (const auto& scene : train_scenes) {
    auto poses = voxel::load_poselog(dir / ("scenes/" + scene + "/poselog.txt"));
    REQUIRE(poses.size() == 9);
    double dist = 0.0;
    for (size_t i = 1; i < poses.size(); ++i) {
      const double d = std::hypot(poses[i].x - poses[i - 1].x, poses[i].y - poses[i - 1].y);
      const double dt = *poses[i].timestamp - *poses[i - 1].timestamp;
      CHECK(d <= max_speed * dt);
      dist += d;
    }
    CHECK(dist >= 15.0 * 0.85);  // straight-line hops on a curving road
  }
  auto first = voxel::load_socc(dir / m.frames[0].socc);
  CHECK(first.H == 24);
  CHECK(first.num_classes == 9);
  auto bev = voxel::load_sbev(dir / m.frames[0].sbev);
  CHECK(bev.num_classes == 5);

  DatasetInfo info = DatasetInfo::load(dir);
  CHECK(info.palette == params.spec.palette);
  CHECK(info.geom.H == 24);
}

TEST_CASE("generate_dataset with one frame per scene skips the drive check") {
  const auto dir = tmpdir("ds1");
  DatasetParams params;
  params.spec = small_spec(78);
  params.spec.extent_m = 160;
  params.n_scenes = 2;
  params.frames_per_scene = 1;
  params.geom = FrameGeometry{.H = 16, .W = 16, .Z = 4, .voxel_size_xy = 0.8f, .voxel_size_z = 0.8f};
  Manifest m = generate_dataset(params, dir);
  CHECK(m.frames.size() == 2);
  auto poses = voxel::load_poselog(dir / m.frames[0].poselog);
  CHECK(poses.size() == 1);
}

TEST_CASE("ingest: identity adapter round-trips files byte-exactly") {
  const auto src = tmpdir("ingest_src");
  DatasetParams params;
  params.spec = small_spec(79);
  params.spec.extent_m = 160;
  params.n_scenes = 2;
  params.frames_per_scene = 2;
  params.min_drive_m = 2.0;
  params.geom = FrameGeometry{.H = 16, .W = 16, .Z = 4, .voxel_size_xy = 0.8f, .voxel_size_z = 0.8f};
  Manifest m = generate_dataset(params, src);

  const auto dst = tmpdir("ingest_dst");
  auto adapter = IngestAdapter::identity(params.spec.palette);
  auto report = ingest_external(src, adapter, dst);
  CHECK(report.frames == 4);
  CHECK(report.unknown_occ_labels == 0);
  for (const auto& rec : m.frames) {
    CHECK(read_binary_file(src / rec.socc) == read_binary_file(dst / rec.socc));
    CHECK(read_binary_file(src / rec.sbev) == read_binary_file(dst / rec.sbev));
  }
  CHECK(read_text_file(src / "manifest.jsonl") == read_text_file(dst / "manifest.jsonl"));
}

TEST_CASE("ingest: unknown labels map to fallback and are counted") {
  const auto src = tmpdir("ingest_unk_src");
  // Source with external vocabulary of 4 occ labels: 0..2 known, 3 unknown.
  auto occ = voxel::SemanticOccupancyMap::empty(4, 4, 2, 4, 0.8f, 0.8f);
  occ.set(0, 0, 0, 3);
  occ.set(1, 1, 0, 2);
  occ.set(2, 2, 1, 3);
  fs::create_directories(src / "scenes/s0");
  voxel::save_socc(src / "scenes/s0/frame_0000.socc", occ);
  auto bev = voxel::BEVLayout::background(4, 4, 3, 0.8f);
  bev.set(3, 3, 2);
  voxel::save_sbev(src / "scenes/s0/frame_0000.sbev", bev);
  voxel::save_poselog(src / "scenes/s0/poselog.txt", {voxel::EgoPose{}});
  Manifest m;
  FrameRecord rec;
  rec.scene_id = "s0";
  rec.frame_index = 0;
  rec.split = "train";
  rec.socc = "scenes/s0/frame_0000.socc";
  rec.sbev = "scenes/s0/frame_0000.sbev";
  rec.poselog = "scenes/s0/poselog.txt";
  m.frames.push_back(rec);
  m.save(src / "manifest.jsonl");

  IngestAdapter a;
  a.palette = ClassPalette::synth_default();
  a.occ_classes = 9;
  a.bev_classes = 5;
  a.occ_map = {0, 1, 5};  // external 3 missing -> fallback
  a.bev_map = {0, 1, 3};
  a.occ_fallback = 8;
  a.bev_fallback = 0;
  const auto dst = tmpdir("ingest_unk_dst");
  auto report = ingest_external(src, a, dst);
  CHECK(report.frames == 1);
  CHECK(report.unknown_occ_labels == 2);
  auto got = voxel::load_socc(dst / rec.socc);
  CHECK(got.num_classes == 9);
  CHECK(got.at(0, 0, 0) == 8);
  CHECK(got.at(1, 1, 0) == 5);
  auto gotb = voxel::load_sbev(dst / rec.sbev);
  CHECK(gotb.at(3, 3) == 3);
}

TEST_CASE("ingest: empty source ingests zero frames and succeeds") {
  const auto src = tmpdir("ingest_empty_src");
  const auto dst = tmpdir("ingest_empty_dst");
  auto report = ingest_external(src, IngestAdapter::identity(ClassPalette::synth_default()), dst);
  CHECK(report.frames == 0);
  CHECK(Manifest::load(dst / "manifest.jsonl").frames.empty());
}

TEST_CASE("ingest: missing frame file raises an ingest error naming the path") {
  const auto src = tmpdir("ingest_missing");
  Manifest m;
  FrameRecord rec;
  rec.scene_id = "s0";
  rec.socc = "scenes/s0/nope.socc";
  rec.sbev = "scenes/s0/nope.sbev";
  rec.poselog = "scenes/s0/poselog.txt";
  rec.split = "train";
  m.frames.push_back(rec);
  m.save(src / "manifest.jsonl");
  const auto dst = tmpdir("ingest_missing_dst");
  CHECK_THROWS_WITH_AS(
      ingest_external(src, IngestAdapter::identity(ClassPalette::synth_default()), dst),
      doctest::Contains("nope.socc"), Error);
}

TEST_CASE("adapter json round trip") {
  auto a = IngestAdapter::identity(ClassPalette::synth_default());
  a.occ_fallback = 8;
  auto j = a.to_json();
  auto b = IngestAdapter::from_json(j);
  CHECK(b.occ_map == a.occ_map);
  CHECK(b.occ_fallback == 8);
  CHECK(b.palette == a.palette);

  j["occ_map"] = {0, 99};  // out of range
  CHECK_THROWS_AS(IngestAdapter::from_json(j), Error);
}
