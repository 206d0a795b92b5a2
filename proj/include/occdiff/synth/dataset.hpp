// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset generation and ingestion. A dataset directory holds:
//   dataset.json            geometry, palette, generation parameters
//   manifest.jsonl          one record per frame: scene_id, frame_index,
//                           split, relative socc/sbev/poselog paths
//   scenes/<scene_id>/...   per-frame .socc/.sbev files and poselog.txt

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "occdiff/synth/world.hpp"

namespace occdiff::synth {

struct FrameRecord {
  std::string scene_id;
  int64_t frame_index = 0;
  std::string split;  // "train" or "val"
  std::string socc;   // paths relative to the dataset root
  std::string sbev;
  std::string poselog;

  nlohmann::json to_json() const;
  static FrameRecord from_json(const nlohmann::json& j);
  bool operator==(const FrameRecord& o) const = default;
};

struct Manifest {
  std::vector<FrameRecord> frames;

  std::vector<FrameRecord> split(const std::string& which) const;
  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);
};

struct DatasetParams {
  WorldSpec spec;              // seed is the master seed; per-scene seeds fork from it
  int n_scenes = 10;
  int frames_per_scene = 20;
  double min_drive_m = 15.0;   // scenes with less total driving are rejected
  double frame_step_m = 2.0;   // ego displacement between consecutive frames
  double frame_dt_s = 0.5;     // timestamp spacing
  double train_fraction = 0.8;
  FrameGeometry geom;

  void validate() const;
};

// Writes the dataset under out_dir and returns its manifest. Deterministic
// in params (scene seeds are forked from spec.seed by scene index).
Manifest generate_dataset(const DatasetParams& params, const std::filesystem::path& out_dir);

// Label remapping used by ingest_external. Unknown labels fall back with
// a counted warning.
struct IngestAdapter {
  std::vector<int> occ_map;    // external occ label -> internal (or -1 = unknown)
  std::vector<int> bev_map;    // external bev label -> internal (or -1 = unknown)
  int occ_fallback = 0;
  int bev_fallback = 0;
  int occ_classes = 0;         // output num_classes
  int bev_classes = 0;
  ClassPalette palette;

  static IngestAdapter identity(const ClassPalette& palette);
  static IngestAdapter from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct IngestReport {
  int frames = 0;
  int64_t unknown_occ_labels = 0;
  int64_t unknown_bev_labels = 0;
};

// Reads a source dataset (manifest.jsonl under src_root), applies the
// adapter's label maps, and writes a native dataset under out_dir.
// A missing manifest ingests zero frames (with a warning on stderr).
IngestReport ingest_external(const std::filesystem::path& src_root, const IngestAdapter& adapter,
                             const std::filesystem::path& out_dir);

// Dataset-level metadata (palette + geometry) saved as dataset.json.
struct DatasetInfo {
  ClassPalette palette;
  FrameGeometry geom;
  uint64_t seed = 0;

  void save(const std::filesystem::path& dir) const;
  static DatasetInfo load(const std::filesystem::path& dir);
};

}  // namespace occdiff::synth
