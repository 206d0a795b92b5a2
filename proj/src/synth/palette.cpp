// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/synth/palette.hpp"

#include <set>

#include "occdiff/util/error.hpp"

namespace occdiff::synth {

int ClassPalette::occ_index(const std::string& name) const {
  for (size_t i = 0; i < occ_names.size(); ++i)
    if (occ_names[i] == name) return static_cast<int>(i);
  raise(Errc::invalid_argument, "palette has no occupancy class '" + name + "'");
}

int ClassPalette::bev_index(const std::string& name) const {
  for (size_t i = 0; i < bev_names.size(); ++i)
    if (bev_names[i] == name) return static_cast<int>(i);
  raise(Errc::invalid_argument, "palette has no bev class '" + name + "'");
}

void ClassPalette::validate() const {
  require(!occ_names.empty() && !bev_names.empty(), Errc::invalid_argument,
          "palette vocabularies must be non-empty");
  std::set<std::string> o(occ_names.begin(), occ_names.end());
  std::set<std::string> b(bev_names.begin(), bev_names.end());
  require(o.size() == occ_names.size() && b.size() == bev_names.size(), Errc::invalid_argument,
          "palette class names must be unique");
}

nlohmann::json ClassPalette::to_json() const {
  return nlohmann::json{{"occ", occ_names}, {"bev", bev_names}};
}

ClassPalette ClassPalette::from_json(const nlohmann::json& j) {
  ClassPalette p;
  p.occ_names = j.at("occ").get<std::vector<std::string>>();
  p.bev_names = j.at("bev").get<std::vector<std::string>>();
  p.validate();
  return p;
}

ClassPalette ClassPalette::synth_default() {
  ClassPalette p;
  p.occ_names = {"empty",   "road", "sidewalk",   "terrain", "building",
                 "vehicle", "pole", "vegetation", "other"};
  p.bev_names = {"background", "road", "sidewalk", "vehicle", "crossing"};
  return p;
}

}  // namespace occdiff::synth
