// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/synth/dataset.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "occdiff/util/error.hpp"
#include "occdiff/util/io.hpp"
#include "occdiff/util/rng.hpp"

namespace occdiff::synth {

namespace fs = std::filesystem;

nlohmann::json FrameRecord::to_json() const {
  return nlohmann::json{{"scene_id", scene_id}, {"frame_index", frame_index}, {"split", split},
                        {"socc", socc},         {"sbev", sbev},               {"poselog", poselog}};
}

FrameRecord FrameRecord::from_json(const nlohmann::json& j) {
  FrameRecord r;
  r.scene_id = j.at("scene_id").get<std::string>();
  r.frame_index = j.at("frame_index").get<int64_t>();
  r.split = j.at("split").get<std::string>();
  r.socc = j.at("socc").get<std::string>();
  r.sbev = j.at("sbev").get<std::string>();
  r.poselog = j.at("poselog").get<std::string>();
  return r;
}

std::vector<FrameRecord> Manifest::split(const std::string& which) const {
  std::vector<FrameRecord> out;
  for (const auto& f : frames)
    if (f.split == which) out.push_back(f);
  return out;
}

void Manifest::save(const fs::path& path) const {
  std::string out;
  for (const auto& f : frames) out += f.to_json().dump() + "\n";
  write_text_file(path, out);
}

Manifest Manifest::load(const fs::path& path) {
  Manifest m;
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    m.frames.push_back(FrameRecord::from_json(nlohmann::json::parse(line)));
  }
  return m;
}

void DatasetParams::validate() const {
  spec.validate();
  require(n_scenes >= 1, Errc::invalid_argument, "n_scenes must be >= 1");
  require(frames_per_scene >= 1, Errc::invalid_argument, "frames_per_scene must be >= 1");
  require(frame_step_m > 0 && frame_dt_s > 0, Errc::invalid_argument,
          "frame step and dt must be positive");
  require(train_fraction >= 0.0 && train_fraction <= 1.0, Errc::invalid_argument,
          "train_fraction must be in [0,1]");
  if (frames_per_scene > 1)
    require((frames_per_scene - 1) * frame_step_m >= min_drive_m, Errc::config,
            "frames_per_scene * frame_step_m cannot satisfy min_drive_m");
}

void DatasetInfo::save(const fs::path& dir) const {
  nlohmann::json j;
  j["palette"] = palette.to_json();
  j["geom"] = {{"H", geom.H},
               {"W", geom.W},
               {"Z", geom.Z},
               {"voxel_size_xy", geom.voxel_size_xy},
               {"voxel_size_z", geom.voxel_size_z}};
  j["seed"] = seed;
  write_text_file(dir / "dataset.json", j.dump(2) + "\n");
}

DatasetInfo DatasetInfo::load(const fs::path& dir) {
  const auto j = nlohmann::json::parse(read_text_file(dir / "dataset.json"));
  DatasetInfo info;
  info.palette = ClassPalette::from_json(j.at("palette"));
  info.geom.H = j.at("geom").at("H").get<int>();
  info.geom.W = j.at("geom").at("W").get<int>();
  info.geom.Z = j.at("geom").at("Z").get<int>();
  info.geom.voxel_size_xy = j.at("geom").at("voxel_size_xy").get<float>();
  info.geom.voxel_size_z = j.at("geom").at("voxel_size_z").get<float>();
  info.seed = j.at("seed").get<uint64_t>();
  return info;
}

Manifest generate_dataset(const DatasetParams& params, const fs::path& out_dir) {
  params.validate();
  fs::create_directories(out_dir);

  // Deterministic split: shuffle scene indices with a forked stream, the
  // first round(n * fraction) are train.
  std::vector<int> order(static_cast<size_t>(params.n_scenes));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = Rng(params.spec.seed).fork(0xDA7A);
  for (int i = params.n_scenes - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(split_rng.uniform_int(i + 1))]);
  const int n_train = static_cast<int>(std::lround(params.n_scenes * params.train_fraction));
  std::vector<std::string> split_of(static_cast<size_t>(params.n_scenes));
  for (int i = 0; i < params.n_scenes; ++i)
    split_of[static_cast<size_t>(order[static_cast<size_t>(i)])] = i < n_train ? "train" : "val";

  Manifest manifest;
  const double needed =
      params.frames_per_scene > 1 ? (params.frames_per_scene - 1) * params.frame_step_m : 0.0;

  for (int s = 0; s < params.n_scenes; ++s) {
    char sid[32];
    std::snprintf(sid, sizeof(sid), "scene_%04d", s);

    // A scene may need a few world attempts before one has a road long
    // enough for the requested drive and room for every object density;
    // seeds stay a pure function of (seed, s).
    World world;
    int drive_road = -1;
    for (int attempt = 0; attempt < 12 && drive_road < 0; ++attempt) {
      WorldSpec ws = params.spec;
      ws.seed = splitmix64(params.spec.seed ^ splitmix64(0x5CE9E000ull + 977ull * s + attempt));
      try {
        world = generate_world(ws);
      } catch (const Error& e) {
        if (e.code() != Errc::generation || attempt == 11) throw;
        continue;
      }
      for (size_t r = 0; r < world.roads.size(); ++r) {
        if (world.roads[r].length() >= needed + 10.0 &&
            (drive_road < 0 ||
             world.roads[r].length() > world.roads[static_cast<size_t>(drive_road)].length()))
          drive_road = static_cast<int>(r);
      }
    }
    require(drive_road >= 0, Errc::generation,
            std::string(sid) + ": no usable world after bounded attempts");

    const auto& road = world.roads[static_cast<size_t>(drive_road)];
    const double s0 = (road.length() - needed) / 2.0;

    std::vector<voxel::EgoPose> poses;
    const fs::path scene_dir = fs::path("scenes") / sid;
    fs::create_directories(out_dir / scene_dir);
    for (int k = 0; k < params.frames_per_scene; ++k) {
      voxel::EgoPose pose;
      pose.frame_index = k;
      const double sk = s0 + k * params.frame_step_m;
      const auto pt = road.point_at(sk);
      pose.x = pt[0];
      pose.y = pt[1];
      pose.yaw = voxel::normalize_yaw(road.heading_at(sk));
      pose.timestamp = k * params.frame_dt_s;
      poses.push_back(pose);
    }
    save_poselog(out_dir / scene_dir / "poselog.txt", poses);

    for (int k = 0; k < params.frames_per_scene; ++k) {
      SceneSample sample = render_frame(world, poses[static_cast<size_t>(k)], params.geom);
      sample.scene_id = sid;
      sample.frame_index = k;
      char fname[64];
      std::snprintf(fname, sizeof(fname), "frame_%04d", k);
      FrameRecord rec;
      rec.scene_id = sid;
      rec.frame_index = k;
      rec.split = split_of[static_cast<size_t>(s)];
      rec.socc = (scene_dir / (std::string(fname) + ".socc")).string();
      rec.sbev = (scene_dir / (std::string(fname) + ".sbev")).string();
      rec.poselog = (scene_dir / "poselog.txt").string();
      save_socc(out_dir / rec.socc, sample.occ);
      save_sbev(out_dir / rec.sbev, sample.bev);
      manifest.frames.push_back(rec);
    }
  }

  manifest.save(out_dir / "manifest.jsonl");
  DatasetInfo info;
  info.palette = params.spec.palette;
  info.geom = params.geom;
  info.seed = params.spec.seed;
  info.save(out_dir);
  return manifest;
}

IngestAdapter IngestAdapter::identity(const ClassPalette& palette) {
  IngestAdapter a;
  a.palette = palette;
  a.occ_classes = palette.occ_classes();
  a.bev_classes = palette.bev_classes();
  a.occ_map.resize(static_cast<size_t>(a.occ_classes));
  a.bev_map.resize(static_cast<size_t>(a.bev_classes));
  std::iota(a.occ_map.begin(), a.occ_map.end(), 0);
  std::iota(a.bev_map.begin(), a.bev_map.end(), 0);
  return a;
}

nlohmann::json IngestAdapter::to_json() const {
  return nlohmann::json{{"occ_map", occ_map},           {"bev_map", bev_map},
                        {"occ_fallback", occ_fallback}, {"bev_fallback", bev_fallback},
                        {"occ_classes", occ_classes},   {"bev_classes", bev_classes},
                        {"palette", palette.to_json()}};
}

IngestAdapter IngestAdapter::from_json(const nlohmann::json& j) {
  IngestAdapter a;
  a.occ_map = j.at("occ_map").get<std::vector<int>>();
  a.bev_map = j.at("bev_map").get<std::vector<int>>();
  a.occ_fallback = j.at("occ_fallback").get<int>();
  a.bev_fallback = j.at("bev_fallback").get<int>();
  a.occ_classes = j.at("occ_classes").get<int>();
  a.bev_classes = j.at("bev_classes").get<int>();
  a.palette = ClassPalette::from_json(j.at("palette"));
  require(a.occ_classes >= 1 && a.bev_classes >= 1, Errc::ingest, "adapter class counts invalid");
  for (int m : a.occ_map)
    require(m < a.occ_classes, Errc::ingest, "adapter occ_map entry out of range");
  for (int m : a.bev_map)
    require(m < a.bev_classes, Errc::ingest, "adapter bev_map entry out of range");
  return a;
}

IngestReport ingest_external(const fs::path& src_root, const IngestAdapter& adapter,
                             const fs::path& out_dir) {
  IngestReport report;
  fs::create_directories(out_dir);
  const fs::path src_manifest = src_root / "manifest.jsonl";
  if (!fs::exists(src_manifest)) {
    std::fprintf(stderr, "[ingest] warning: no manifest at %s, ingesting zero frames\n",
                 src_manifest.string().c_str());
    Manifest empty;
    empty.save(out_dir / "manifest.jsonl");
    return report;
  }

  auto remap = [](std::vector<uint8_t>& labels, const std::vector<int>& map, int fallback,
                  int64_t* unknown) {
    for (auto& l : labels) {
      if (l < map.size() && map[l] >= 0) {
        l = static_cast<uint8_t>(map[l]);
      } else {
        l = static_cast<uint8_t>(fallback);
        ++*unknown;
      }
    }
  };

  Manifest src = Manifest::load(src_manifest);
  Manifest dst;
  for (const auto& rec : src.frames) {
    require(fs::exists(src_root / rec.socc), Errc::ingest,
            "missing occupancy file: " + (src_root / rec.socc).string());
    require(fs::exists(src_root / rec.sbev), Errc::ingest,
            "missing bev file: " + (src_root / rec.sbev).string());
    require(fs::exists(src_root / rec.poselog), Errc::ingest,
            "missing poselog: " + (src_root / rec.poselog).string());

    auto occ = voxel::load_socc(src_root / rec.socc);
    remap(occ.labels, adapter.occ_map, adapter.occ_fallback, &report.unknown_occ_labels);
    occ.num_classes = adapter.occ_classes;
    occ.validate();

    auto bev = voxel::load_sbev(src_root / rec.sbev);
    remap(bev.labels, adapter.bev_map, adapter.bev_fallback, &report.unknown_bev_labels);
    bev.num_classes = adapter.bev_classes;
    bev.validate();

    fs::create_directories((out_dir / rec.socc).parent_path());
    voxel::save_socc(out_dir / rec.socc, occ);
    voxel::save_sbev(out_dir / rec.sbev, bev);
    if (!fs::exists(out_dir / rec.poselog))
      fs::copy_file(src_root / rec.poselog, out_dir / rec.poselog);
    dst.frames.push_back(rec);
    ++report.frames;
  }
  dst.save(out_dir / "manifest.jsonl");

  DatasetInfo info;
  info.palette = adapter.palette;
  if (fs::exists(src_root / "dataset.json")) {
    info.geom = DatasetInfo::load(src_root).geom;
    info.seed = DatasetInfo::load(src_root).seed;
  }
  info.save(out_dir);

  if (report.unknown_occ_labels + report.unknown_bev_labels > 0)
    std::fprintf(stderr,
                 "[ingest] warning: %" PRId64 " occ and %" PRId64
                 " bev labels were unknown and mapped to fallback\n",
                 report.unknown_occ_labels, report.unknown_bev_labels);
  return report;
}

}  // namespace occdiff::synth
