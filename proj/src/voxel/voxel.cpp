// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/voxel/voxel.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "occdiff/util/error.hpp"
#include "occdiff/util/io.hpp"

namespace occdiff::voxel {

double normalize_yaw(double yaw) {
  const double two_pi = 2.0 * M_PI;
  double y = std::fmod(yaw + M_PI, two_pi);
  if (y < 0) y += two_pi;
  return y - M_PI;
}

SemanticOccupancyMap SemanticOccupancyMap::empty(int H, int W, int Z, int num_classes, float vs_xy,
                                                 float vs_z, std::array<float, 3> origin) {
  SemanticOccupancyMap m;
  m.H = H;
  m.W = W;
  m.Z = Z;
  m.num_classes = num_classes;
  m.voxel_size_xy = vs_xy;
  m.voxel_size_z = vs_z;
  m.origin = origin;
  m.labels.assign(static_cast<size_t>(H) * W * Z, 0);
  m.validate();
  return m;
}

void SemanticOccupancyMap::validate() const {
  require(H >= 1 && W >= 1 && Z >= 1, Errc::shape_mismatch, "occupancy dims must be >= 1");
  require(num_classes >= 1 && num_classes <= 256, Errc::invalid_argument,
          "num_classes out of range");
  require(voxel_size_xy > 0.0f && voxel_size_z > 0.0f, Errc::invalid_argument,
          "voxel sizes must be positive");
  require(static_cast<int64_t>(labels.size()) == static_cast<int64_t>(H) * W * Z,
          Errc::shape_mismatch, "label count does not match dims");
  for (uint8_t l : labels)
    require(l < num_classes, Errc::invalid_label, "occupancy label >= num_classes");
}

BEVLayout BEVLayout::background(int H, int W, int num_classes, float meters_per_pixel) {
  BEVLayout b;
  b.H = H;
  b.W = W;
  b.num_classes = num_classes;
  b.meters_per_pixel = meters_per_pixel;
  b.labels.assign(static_cast<size_t>(H) * W, 0);
  b.validate();
  return b;
}

void BEVLayout::validate() const {
  require(H >= 1 && W >= 1, Errc::shape_mismatch, "bev dims must be >= 1");
  require(num_classes >= 1 && num_classes <= 256, Errc::invalid_argument,
          "num_classes out of range");
  require(meters_per_pixel > 0.0f, Errc::invalid_argument, "meters_per_pixel must be positive");
  require(static_cast<int64_t>(labels.size()) == static_cast<int64_t>(H) * W,
          Errc::shape_mismatch, "label count does not match dims");
  for (uint8_t l : labels) require(l < num_classes, Errc::invalid_label, "bev label >= num_classes");
}

SemanticOccupancyMap crop_center(const SemanticOccupancyMap& map, int H, int W, int Z) {
  require(H >= 1 && W >= 1 && Z >= 1 && H <= map.H && W <= map.W && Z <= map.Z,
          Errc::invalid_argument, "crop_center: target dims exceed source dims");
  const int ox = (map.H - H) / 2;
  const int oy = (map.W - W) / 2;
  const int oz = (map.Z - Z) / 2;
  SemanticOccupancyMap out = SemanticOccupancyMap::empty(
      H, W, Z, map.num_classes, map.voxel_size_xy, map.voxel_size_z,
      {map.origin[0] + static_cast<float>(ox) * map.voxel_size_xy,
       map.origin[1] + static_cast<float>(oy) * map.voxel_size_xy,
       map.origin[2] + static_cast<float>(oz) * map.voxel_size_z});
  for (int x = 0; x < H; ++x)
    for (int y = 0; y < W; ++y)
      for (int z = 0; z < Z; ++z) out.set(x, y, z, map.at(x + ox, y + oy, z + oz));
  return out;
}

nn::Tensor to_onehot(const SemanticOccupancyMap& map) {
  nn::Tensor t({map.num_classes, map.H, map.W, map.Z});
  const int64_t S = static_cast<int64_t>(map.H) * map.W * map.Z;
  float* d = t.data();
  for (int64_t i = 0; i < S; ++i) d[static_cast<int64_t>(map.labels[static_cast<size_t>(i)]) * S + i] = 1.0f;
  return t;
}

SemanticOccupancyMap from_onehot(const nn::Tensor& onehot, const SemanticOccupancyMap& like) {
  require(onehot.ndim() == 4 && onehot.dim(0) == like.num_classes && onehot.dim(1) == like.H &&
              onehot.dim(2) == like.W && onehot.dim(3) == like.Z,
          Errc::shape_mismatch, "from_onehot: tensor shape does not match map geometry");
  SemanticOccupancyMap out = like;
  const int64_t S = static_cast<int64_t>(like.H) * like.W * like.Z;
  const float* d = onehot.data();
  for (int64_t i = 0; i < S; ++i) {
    int best = 0;
    float bv = d[i];
    for (int c = 1; c < like.num_classes; ++c) {
      const float v = d[static_cast<int64_t>(c) * S + i];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    out.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
  }
  return out;
}

PointCloudSem to_pointcloud(const SemanticOccupancyMap& map) {
  PointCloudSem pc;
  for (int x = 0; x < map.H; ++x)
    for (int y = 0; y < map.W; ++y)
      for (int z = 0; z < map.Z; ++z) {
        const uint8_t l = map.at(x, y, z);
        if (l == 0) continue;
        pc.points.push_back(map.voxel_center(x, y, z));
        pc.labels.push_back(l);
      }
  return pc;
}

// ---- file formats -----------------------------------------------------------

namespace {
constexpr uint32_t kFormatVersion = 1;

void check_magic(ByteReader& r, const char* magic, const std::string& path) {
  char got[4];
  r.bytes(got, 4);
  require(std::memcmp(got, magic, 4) == 0, Errc::bad_magic,
          path + ": bad magic, expected " + magic);
  const uint32_t version = r.u32();
  require(version == kFormatVersion, Errc::version_mismatch,
          path + ": unsupported format version " + std::to_string(version));
}
}  // namespace

void save_socc(const std::filesystem::path& path, const SemanticOccupancyMap& map) {
  map.validate();
  ByteWriter w;
  w.str("SOCC");
  w.u32(kFormatVersion);
  w.u32(static_cast<uint32_t>(map.H));
  w.u32(static_cast<uint32_t>(map.W));
  w.u32(static_cast<uint32_t>(map.Z));
  w.u32(static_cast<uint32_t>(map.num_classes));
  w.f32(map.voxel_size_xy);
  w.f32(map.voxel_size_z);
  w.f32(map.origin[0]);
  w.f32(map.origin[1]);
  w.f32(map.origin[2]);
  w.bytes(map.labels.data(), map.labels.size());
  write_binary_file(path, w.buffer().data(), w.buffer().size());
}

SemanticOccupancyMap load_socc(const std::filesystem::path& path) {
  const auto buf = read_binary_file(path);
  ByteReader r(buf);
  check_magic(r, "SOCC", path.string());
  SemanticOccupancyMap m;
  m.H = static_cast<int>(r.u32());
  m.W = static_cast<int>(r.u32());
  m.Z = static_cast<int>(r.u32());
  m.num_classes = static_cast<int>(r.u32());
  m.voxel_size_xy = r.f32();
  m.voxel_size_z = r.f32();
  m.origin[0] = r.f32();
  m.origin[1] = r.f32();
  m.origin[2] = r.f32();
  const int64_t n = static_cast<int64_t>(m.H) * m.W * m.Z;
  require(r.remaining() == static_cast<size_t>(n), Errc::truncated,
          path.string() + ": payload size mismatch");
  m.labels.resize(static_cast<size_t>(n));
  r.bytes(m.labels.data(), m.labels.size());
  m.validate();
  return m;
}

void save_sbev(const std::filesystem::path& path, const BEVLayout& bev) {
  bev.validate();
  ByteWriter w;
  w.str("SBEV");
  w.u32(kFormatVersion);
  w.u32(static_cast<uint32_t>(bev.H));
  w.u32(static_cast<uint32_t>(bev.W));
  w.u32(static_cast<uint32_t>(bev.num_classes));
  w.f32(bev.meters_per_pixel);
  w.bytes(bev.labels.data(), bev.labels.size());
  write_binary_file(path, w.buffer().data(), w.buffer().size());
}

BEVLayout load_sbev(const std::filesystem::path& path) {
  const auto buf = read_binary_file(path);
  ByteReader r(buf);
  check_magic(r, "SBEV", path.string());
  BEVLayout b;
  b.H = static_cast<int>(r.u32());
  b.W = static_cast<int>(r.u32());
  b.num_classes = static_cast<int>(r.u32());
  b.meters_per_pixel = r.f32();
  const int64_t n = static_cast<int64_t>(b.H) * b.W;
  require(r.remaining() == static_cast<size_t>(n), Errc::truncated,
          path.string() + ": payload size mismatch");
  b.labels.resize(static_cast<size_t>(n));
  r.bytes(b.labels.data(), b.labels.size());
  b.validate();
  return b;
}

void save_poselog(const std::filesystem::path& path, const std::vector<EgoPose>& poses) {
  std::string out = "# frame_index x y yaw [timestamp]\n";
  char line[256];
  for (const EgoPose& p : poses) {
    if (p.timestamp.has_value()) {
      std::snprintf(line, sizeof(line), "%lld %.17g %.17g %.17g %.17g\n",
                    static_cast<long long>(p.frame_index), p.x, p.y, p.yaw, *p.timestamp);
    } else {
      std::snprintf(line, sizeof(line), "%lld %.17g %.17g %.17g\n",
                    static_cast<long long>(p.frame_index), p.x, p.y, p.yaw);
    }
    out += line;
  }
  write_text_file(path, out);
}

std::vector<EgoPose> load_poselog(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::vector<EgoPose> poses;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    EgoPose p;
    if (!(ls >> p.frame_index)) continue;  // blank or comment-only line
    double ts;
    require(static_cast<bool>(ls >> p.x >> p.y >> p.yaw), Errc::truncated,
            path.string() + ":" + std::to_string(lineno) + ": malformed pose line");
    if (ls >> ts) p.timestamp = ts;
    p.yaw = normalize_yaw(p.yaw);
    poses.push_back(p);
  }
  return poses;
}

}  // namespace occdiff::voxel
