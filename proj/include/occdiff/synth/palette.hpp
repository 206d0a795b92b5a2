// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace occdiff::synth {

// Class-name vocabularies for the occupancy grid and the BEV map.
// Index in the vector is the class index; index 0 is "empty"/"background".
struct ClassPalette {
  std::vector<std::string> occ_names;
  std::vector<std::string> bev_names;

  int occ_index(const std::string& name) const;
  int bev_index(const std::string& name) const;
  int occ_classes() const { return static_cast<int>(occ_names.size()); }
  int bev_classes() const { return static_cast<int>(bev_names.size()); }

  // Raises on duplicates or empty vocabularies.
  void validate() const;

  nlohmann::json to_json() const;
  static ClassPalette from_json(const nlohmann::json& j);

  // The built-in synthetic vocabulary:
  // occ: empty, road, sidewalk, terrain, building, vehicle, pole,
  //      vegetation, other
  // bev: background, road, sidewalk, vehicle, crossing
  static ClassPalette synth_default();

  bool operator==(const ClassPalette& o) const = default;
};

}  // namespace occdiff::synth
