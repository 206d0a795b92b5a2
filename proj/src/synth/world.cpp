// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/synth/world.hpp"

#include <algorithm>
#include <cmath>

#include "occdiff/util/error.hpp"
#include "occdiff/util/rng.hpp"

namespace occdiff::synth {

namespace {

constexpr double kStep = 2.0;            // road polyline vertex spacing, meters
constexpr double kCrossHalfLen = 1.5;    // crossing stripe half-length along road
constexpr double kBoundaryMargin = 8.0;  // roads steer away from this margin

double ang_diff(double a, double b) { return voxel::normalize_yaw(a - b); }

double point_segment_dist2(double px, double py, const std::array<double, 2>& a,
                           const std::array<double, 2>& b, double* t_out) {
  const double vx = b[0] - a[0], vy = b[1] - a[1];
  const double wx = px - a[0], wy = py - a[1];
  const double vv = vx * vx + vy * vy;
  double t = vv > 0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = wx - t * vx, dy = wy - t * vy;
  if (t_out) *t_out = t;
  return dx * dx + dy * dy;
}

struct RoadHit {
  double dist = 1e18;
  int road = -1;
  double s = 0.0;  // arclength of the closest centerline point
};

RoadHit nearest_road(const World& w, double px, double py) {
  RoadHit hit;
  for (size_t r = 0; r < w.roads.size(); ++r) {
    const auto& pts = w.roads[r].pts;
    for (size_t i = 0; i + 1 < pts.size(); ++i) {
      double t;
      const double d2 = point_segment_dist2(px, py, pts[i], pts[i + 1], &t);
      const double d = std::sqrt(d2);
      if (d < hit.dist) {
        hit.dist = d;
        hit.road = static_cast<int>(r);
        hit.s = w.roads[r].cum_s[i] + t * (w.roads[r].cum_s[i + 1] - w.roads[r].cum_s[i]);
      }
    }
  }
  return hit;
}

// Random-walk centerline with curvature-bounded heading, steered to stay
// inside the extent. Stops early if it cannot stay inside.
RoadPolyline walk_road(Rng& rng, const WorldSpec& spec, std::array<double, 2> start,
                       double heading, double target_len) {
  RoadPolyline road;
  road.pts.push_back(start);
  double x = start[0], y = start[1], h = heading;
  const double lo = kBoundaryMargin, hi = spec.extent_m - kBoundaryMargin;
  for (double s = 0.0; s < target_len; s += kStep) {
    const double max_turn = spec.max_curvature * kStep;
    h += rng.uniform(-max_turn, max_turn);
    // Steer toward the center when near the boundary.
    const double cx = spec.extent_m / 2, cy = spec.extent_m / 2;
    if (x < lo * 2 || x > hi - lo || y < lo * 2 || y > hi - lo) {
      const double to_center = std::atan2(cy - y, cx - x);
      h += std::clamp(ang_diff(to_center, h), -max_turn * 2.0, max_turn * 2.0);
    }
    const double nx = x + kStep * std::cos(h);
    const double ny = y + kStep * std::sin(h);
    if (nx < lo || nx > hi || ny < lo || ny > hi) break;
    x = nx;
    y = ny;
    road.pts.push_back({x, y});
  }
  road.cum_s.resize(road.pts.size());
  for (size_t i = 1; i < road.pts.size(); ++i) {
    const double dx = road.pts[i][0] - road.pts[i - 1][0];
    const double dy = road.pts[i][1] - road.pts[i - 1][1];
    road.cum_s[i] = road.cum_s[i - 1] + std::hypot(dx, dy);
  }
  return road;
}

int density_count(double per_km2, double extent_m) {
  const double area_km2 = (extent_m / 1000.0) * (extent_m / 1000.0);
  return static_cast<int>(std::llround(per_km2 * area_km2));
}

}  // namespace

void WorldSpec::validate() const {
  require(extent_m >= 4 * kBoundaryMargin, Errc::invalid_argument, "extent too small");
  require(road_segments >= 0, Errc::invalid_argument, "negative road segment count");
  require(lane_width_m > 0, Errc::invalid_argument, "lane width must be positive");
  require(max_curvature >= 0, Errc::invalid_argument, "negative curvature bound");
  require(sidewalk_width_m >= 0, Errc::invalid_argument, "negative sidewalk width");
  require(building_density >= 0 && vehicle_density >= 0 && pole_density >= 0 &&
              vegetation_density >= 0 && terrain_density >= 0 && other_density >= 0,
          Errc::invalid_argument, "object densities must be >= 0");
  palette.validate();
}

std::array<double, 2> RoadPolyline::point_at(double s) const {
  require(!pts.empty(), Errc::invalid_argument, "empty polyline");
  s = std::clamp(s, 0.0, length());
  const auto it = std::upper_bound(cum_s.begin(), cum_s.end(), s);
  const size_t i = std::min(pts.size() - 1, static_cast<size_t>(it - cum_s.begin()));
  if (i == 0) return pts[0];
  const double seg = cum_s[i] - cum_s[i - 1];
  const double t = seg > 0 ? (s - cum_s[i - 1]) / seg : 0.0;
  return {pts[i - 1][0] + t * (pts[i][0] - pts[i - 1][0]),
          pts[i - 1][1] + t * (pts[i][1] - pts[i - 1][1])};
}

double RoadPolyline::heading_at(double s) const {
  require(pts.size() >= 2, Errc::invalid_argument, "polyline too short for heading");
  s = std::clamp(s, 0.0, length());
  auto it = std::upper_bound(cum_s.begin(), cum_s.end(), s);
  size_t i = std::min(pts.size() - 1, static_cast<size_t>(it - cum_s.begin()));
  if (i == 0) i = 1;
  return std::atan2(pts[i][1] - pts[i - 1][1], pts[i][0] - pts[i - 1][0]);
}

bool OrientedBox::contains(double px, double py) const {
  const double c = std::cos(-yaw), s = std::sin(-yaw);
  const double lx = c * (px - cx) - s * (py - cy);
  const double ly = s * (px - cx) + c * (py - cy);
  return std::abs(lx) <= hx && std::abs(ly) <= hy;
}

double OrientedBox::circumradius() const { return std::hypot(hx, hy); }

double World::road_distance(double px, double py) const {
  return nearest_road(*this, px, py).dist;
}

World generate_world(const WorldSpec& spec) {
  spec.validate();
  World w;
  w.spec = spec;
  Rng rng(spec.seed);
  Rng road_rng = rng.fork(1);
  Rng obj_rng = rng.fork(2);

  // Roads: the first wanders from the middle; later ones branch off an
  // existing road, which keeps the network connected.
  for (int r = 0; r < spec.road_segments; ++r) {
    std::array<double, 2> start;
    double heading;
    double target = spec.extent_m * road_rng.uniform(0.9, 1.5);
    if (w.roads.empty()) {
      start = {spec.extent_m * road_rng.uniform(0.35, 0.65),
               spec.extent_m * road_rng.uniform(0.35, 0.65)};
      heading = road_rng.uniform(-M_PI, M_PI);
    } else {
      const auto& parent = w.roads[road_rng.uniform_int(w.roads.size())];
      const double s = parent.length() * road_rng.uniform(0.15, 0.85);
      start = parent.point_at(s);
      const double side = road_rng.bernoulli(0.5) ? 1.0 : -1.0;
      heading = parent.heading_at(s) + side * M_PI / 2 + road_rng.uniform(-0.3, 0.3);
      target = spec.extent_m * road_rng.uniform(0.4, 0.9);
    }
    RoadPolyline road = walk_road(road_rng, spec, start, heading, target);
    if (road.pts.size() >= 4) w.roads.push_back(std::move(road));
  }

  const double road_hw = spec.lane_width_m;
  const double walk_w = spec.sidewalk_width_m;

  for (const auto& road : w.roads) {
    for (int c = 0; c < spec.crossings_per_road; ++c) {
      if (road.length() < 6 * kCrossHalfLen) break;
      Crossing cr;
      cr.road = static_cast<int>(&road - w.roads.data());
      cr.s = road.length() * obj_rng.uniform(0.1, 0.9);
      w.crossings.push_back(cr);
    }
  }

  // Object placement with bounded rejection sampling.
  auto place = [&](const char* cls, int count, auto try_place) {
    int placed = 0;
    const int max_attempts = std::max(800, count * 160);
    for (int a = 0; a < max_attempts && placed < count; ++a) {
      if (try_place()) ++placed;
    }
    require(placed >= count, Errc::generation,
            std::string("cannot place requested density of class '") + cls + "' (placed " +
                std::to_string(placed) + " of " + std::to_string(count) + ")");
  };

  const double ext = spec.extent_m;
  auto off_road_ok = [&](double cx, double cy, double radius) {
    if (cx < radius || cy < radius || cx > ext - radius || cy > ext - radius) return false;
    if (w.roads.empty()) return true;
    return w.road_distance(cx, cy) > road_hw + walk_w + radius + 0.3;
  };

  place("building", density_count(spec.building_density, ext), [&]() {
    OrientedBox b;
    b.hx = obj_rng.uniform(4.0, 12.0);
    b.hy = obj_rng.uniform(4.0, 12.0);
    b.cx = obj_rng.uniform(0.0, ext);
    b.cy = obj_rng.uniform(0.0, ext);
    b.yaw = obj_rng.uniform(-M_PI, M_PI);
    b.height_m = obj_rng.uniform(6.0, 20.0);
    if (!off_road_ok(b.cx, b.cy, b.circumradius())) return false;
    w.buildings.push_back(b);
    return true;
  });

  place("vehicle", density_count(spec.vehicle_density, ext), [&]() {
    if (w.roads.empty()) return false;
    const auto& road = w.roads[obj_rng.uniform_int(w.roads.size())];
    if (road.length() < 20) return false;
    const double s = obj_rng.uniform(5.0, road.length() - 5.0);
    const double heading = road.heading_at(s);
    const double side = obj_rng.bernoulli(0.5) ? 1.0 : -1.0;
    const double lateral = side * obj_rng.uniform(0.4, std::max(0.5, road_hw - 1.2));
    const auto c = road.point_at(s);
    OrientedBox v;
    v.cx = c[0] - lateral * std::sin(heading);
    v.cy = c[1] + lateral * std::cos(heading);
    v.hx = 2.25;
    v.hy = 1.0;
    v.yaw = side > 0 ? heading : voxel::normalize_yaw(heading + M_PI);
    v.height_m = obj_rng.uniform(1.4, 1.9);
    if (v.cx < 2 || v.cy < 2 || v.cx > ext - 2 || v.cy > ext - 2) return false;
    for (const auto& o : w.vehicles)
      if (std::hypot(o.cx - v.cx, o.cy - v.cy) < 5.5) return false;
    w.vehicles.push_back(v);
    return true;
  });

  place("pole", density_count(spec.pole_density, ext), [&]() {
    if (w.roads.empty() || walk_w < 1.0) return false;
    const auto& road = w.roads[obj_rng.uniform_int(w.roads.size())];
    if (road.length() < 10) return false;
    const double s = obj_rng.uniform(2.0, road.length() - 2.0);
    const double heading = road.heading_at(s);
    const double side = obj_rng.bernoulli(0.5) ? 1.0 : -1.0;
    const double lateral = side * (road_hw + walk_w / 2);
    const auto c = road.point_at(s);
    Pole p;
    p.x = c[0] - lateral * std::sin(heading);
    p.y = c[1] + lateral * std::cos(heading);
    p.height_m = obj_rng.uniform(3.5, 6.5);
    if (p.x < 1 || p.y < 1 || p.x > ext - 1 || p.y > ext - 1) return false;
    // Another road may pass closer: require the point to sit inside some
    // sidewalk band and outside every road surface.
    const double d = w.road_distance(p.x, p.y);
    if (d < road_hw + 0.3 || d > road_hw + walk_w - 0.3) return false;
    for (const auto& o : w.poles)
      if (std::hypot(o.x - p.x, o.y - p.y) < 2.0) return false;
    w.poles.push_back(p);
    return true;
  });

  place("vegetation", density_count(spec.vegetation_density, ext), [&]() {
    VegPatch v;
    v.radius_m = obj_rng.uniform(1.0, 3.0);
    v.x = obj_rng.uniform(0.0, ext);
    v.y = obj_rng.uniform(0.0, ext);
    v.height_m = obj_rng.uniform(2.5, 8.0);
    if (!off_road_ok(v.x, v.y, v.radius_m)) return false;
    w.vegetation.push_back(v);
    return true;
  });

  place("terrain", density_count(spec.terrain_density, ext), [&]() {
    RectPatch t;
    t.hx = obj_rng.uniform(4.0, 14.0);
    t.hy = obj_rng.uniform(4.0, 14.0);
    t.cx = obj_rng.uniform(0.0, ext);
    t.cy = obj_rng.uniform(0.0, ext);
    t.height_m = 0.0;  // ground layer only
    if (!off_road_ok(t.cx, t.cy, std::hypot(t.hx, t.hy))) return false;
    w.terrain.push_back(t);
    return true;
  });

  place("other", density_count(spec.other_density, ext), [&]() {
    RectPatch o;
    o.hx = obj_rng.uniform(0.8, 2.0);
    o.hy = obj_rng.uniform(0.8, 2.0);
    o.cx = obj_rng.uniform(0.0, ext);
    o.cy = obj_rng.uniform(0.0, ext);
    o.height_m = obj_rng.uniform(0.8, 3.2);
    if (!off_road_ok(o.cx, o.cy, std::hypot(o.hx, o.hy))) return false;
    w.others.push_back(o);
    return true;
  });

  return w;
}

SceneSample render_frame(const World& world, const voxel::EgoPose& pose,
                         const FrameGeometry& geom) {
  const auto& spec = world.spec;
  const int C_occ = spec.palette.occ_classes();
  const int C_bev = spec.palette.bev_classes();
  const uint8_t L_road = static_cast<uint8_t>(spec.palette.occ_index("road"));
  const uint8_t L_walk = static_cast<uint8_t>(spec.palette.occ_index("sidewalk"));
  const uint8_t L_terr = static_cast<uint8_t>(spec.palette.occ_index("terrain"));
  const uint8_t L_bldg = static_cast<uint8_t>(spec.palette.occ_index("building"));
  const uint8_t L_veh = static_cast<uint8_t>(spec.palette.occ_index("vehicle"));
  const uint8_t L_pole = static_cast<uint8_t>(spec.palette.occ_index("pole"));
  const uint8_t L_veg = static_cast<uint8_t>(spec.palette.occ_index("vegetation"));
  const uint8_t L_oth = static_cast<uint8_t>(spec.palette.occ_index("other"));
  const uint8_t B_road = static_cast<uint8_t>(spec.palette.bev_index("road"));
  const uint8_t B_walk = static_cast<uint8_t>(spec.palette.bev_index("sidewalk"));
  const uint8_t B_veh = static_cast<uint8_t>(spec.palette.bev_index("vehicle"));
  const uint8_t B_cross = static_cast<uint8_t>(spec.palette.bev_index("crossing"));

  SceneSample out;
  out.pose = pose;
  // Ego at the grid center looking along +x; origin is the ego-frame
  // position of the voxel (0,0,0) corner.
  const float ox = -static_cast<float>(geom.H) / 2 * geom.voxel_size_xy;
  const float oy = -static_cast<float>(geom.W) / 2 * geom.voxel_size_xy;
  out.occ = voxel::SemanticOccupancyMap::empty(geom.H, geom.W, geom.Z, C_occ, geom.voxel_size_xy,
                                               geom.voxel_size_z, {ox, oy, 0.0f});
  out.bev = voxel::BEVLayout::background(geom.H, geom.W, C_bev, geom.voxel_size_xy);

  const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);
  const double road_hw = spec.lane_width_m;
  const double walk_w = spec.sidewalk_width_m;

  auto fill_col = [&](int gx, int gy, int z0, int z1, uint8_t label) {
    for (int z = std::max(0, z0); z <= std::min(geom.Z - 1, z1); ++z)
      out.occ.set(gx, gy, z, label);
  };
  auto height_vox = [&](double h_m) {
    return std::max(1, static_cast<int>(std::lround(h_m / geom.voxel_size_z)));
  };

  for (int gx = 0; gx < geom.H; ++gx) {
    for (int gy = 0; gy < geom.W; ++gy) {
      const double lx = (gx + 0.5 - geom.H / 2.0) * geom.voxel_size_xy;
      const double ly = (gy + 0.5 - geom.W / 2.0) * geom.voxel_size_xy;
      const double px = pose.x + cy * lx - sy * ly;
      const double py = pose.y + sy * lx + cy * ly;
      if (px < 0 || py < 0 || px > spec.extent_m || py > spec.extent_m) continue;

      const RoadHit hit =
          world.roads.empty() ? RoadHit{} : nearest_road(world, px, py);
      uint8_t bev = 0;

      if (hit.road >= 0 && hit.dist <= road_hw) {
        out.occ.set(gx, gy, 0, L_road);
        bev = B_road;
        for (const auto& cr : world.crossings)
          if (cr.road == hit.road && std::abs(hit.s - cr.s) <= kCrossHalfLen) {
            bev = B_cross;
            break;
          }
      } else if (hit.road >= 0 && hit.dist <= road_hw + walk_w) {
        fill_col(gx, gy, 0, 1, L_walk);
        bev = B_walk;
      } else {
        for (const auto& t : world.terrain)
          if (std::abs(px - t.cx) <= t.hx && std::abs(py - t.cy) <= t.hy) {
            out.occ.set(gx, gy, 0, L_terr);
            break;
          }
      }

      for (const auto& v : world.vegetation)
        if (std::hypot(px - v.x, py - v.y) <= v.radius_m) {
          fill_col(gx, gy, 0, height_vox(v.height_m) - 1, L_veg);
          break;
        }
      for (const auto& o : world.others)
        if (std::abs(px - o.cx) <= o.hx && std::abs(py - o.cy) <= o.hy) {
          fill_col(gx, gy, 0, height_vox(o.height_m) - 1, L_oth);
          break;
        }
      for (const auto& b : world.buildings)
        if (b.contains(px, py)) {
          fill_col(gx, gy, 0, height_vox(b.height_m) - 1, L_bldg);
          break;
        }
      for (const auto& v : world.vehicles)
        if (v.contains(px, py)) {
          fill_col(gx, gy, 0, height_vox(v.height_m) - 1, L_veh);
          bev = B_veh;
          break;
        }
      out.bev.set(gx, gy, bev);
    }
  }

  // Poles rasterize to a single column above the sidewalk layers.
  for (const auto& p : world.poles) {
    const double dx = p.x - pose.x, dy = p.y - pose.y;
    const double lx = cy * dx + sy * dy;
    const double ly = -sy * dx + cy * dy;
    const int gx = static_cast<int>(std::llround(lx / geom.voxel_size_xy + geom.H / 2.0 - 0.5));
    const int gy = static_cast<int>(std::llround(ly / geom.voxel_size_xy + geom.W / 2.0 - 0.5));
    if (gx < 0 || gy < 0 || gx >= geom.H || gy >= geom.W) continue;
    const int top = 2 + height_vox(p.height_m) - 1;
    for (int z = 2; z <= std::min(geom.Z - 1, top); ++z)
      if (out.occ.at(gx, gy, z) == 0) out.occ.set(gx, gy, z, L_pole);
  }

  return out;
}

}  // namespace occdiff::synth
