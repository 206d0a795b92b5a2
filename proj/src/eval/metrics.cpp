// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/eval/metrics.hpp"

#include <cmath>
#include <limits>

#include "occdiff/util/error.hpp"

namespace occdiff::eval {

SegmentationStats::SegmentationStats(int num_classes_) : num_classes(num_classes_) {
  require(num_classes >= 2, Errc::invalid_argument, "metrics need at least 2 classes");
  intersection.assign(static_cast<size_t>(num_classes), 0);
  pred_count.assign(static_cast<size_t>(num_classes), 0);
  gt_count.assign(static_cast<size_t>(num_classes), 0);
}

void SegmentationStats::add_labels(const uint8_t* gt, const uint8_t* pred, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    const uint8_t g = gt[i], p = pred[i];
    require(g < num_classes && p < num_classes, Errc::invalid_label,
            "label out of range in metrics");
    ++gt_count[g];
    ++pred_count[p];
    if (g == p) ++intersection[g];
    const bool go = g != 0, po = p != 0;
    occ_inter += (go && po);
    occ_union += (go || po);
  }
}

void SegmentationStats::add(const voxel::SemanticOccupancyMap& gt,
                            const voxel::SemanticOccupancyMap& pred) {
  require(gt.labels.size() == pred.labels.size(), Errc::shape_mismatch,
          "metrics: gt/pred size mismatch");
  add_labels(gt.labels.data(), pred.labels.data(), static_cast<int64_t>(gt.labels.size()));
}

double SegmentationStats::occupancy_iou() const {
  if (occ_union == 0) return 1.0;
  return static_cast<double>(occ_inter) / static_cast<double>(occ_union);
}

std::vector<double> SegmentationStats::per_class_iou() const {
  std::vector<double> out(static_cast<size_t>(num_classes),
                          std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < num_classes; ++c) {
    const int64_t uni = gt_count[c] + pred_count[c] - intersection[c];
    if (uni > 0) out[c] = static_cast<double>(intersection[c]) / static_cast<double>(uni);
  }
  return out;
}

double SegmentationStats::miou() const {
  const auto iou = per_class_iou();
  double sum = 0.0;
  int n = 0;
  for (int c = 1; c < num_classes; ++c) {
    if (std::isnan(iou[c])) continue;
    sum += iou[c];
    ++n;
  }
  return n == 0 ? 1.0 : sum / n;
}

}  // namespace occdiff::eval
