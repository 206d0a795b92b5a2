// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Voxel segmentation metrics accumulated across frames.
//   occupancy IoU: binary foreground (any non-empty class) vs empty.
//   per-class IoU: classwise intersection over union; NaN when the class is
//                  absent from both prediction and ground truth.
//   mIoU: mean per-class IoU over non-empty classes present in gt or pred.

#pragma once

#include <cstdint>
#include <vector>

#include "occdiff/voxel/voxel.hpp"

namespace occdiff::eval {

struct SegmentationStats {
  int num_classes = 0;
  std::vector<int64_t> intersection, pred_count, gt_count;  // per class
  int64_t occ_inter = 0, occ_union = 0;

  explicit SegmentationStats(int num_classes);

  void add_labels(const uint8_t* gt, const uint8_t* pred, int64_t n);
  void add(const voxel::SemanticOccupancyMap& gt, const voxel::SemanticOccupancyMap& pred);

  double occupancy_iou() const;                // 1.0 when both sides are empty
  std::vector<double> per_class_iou() const;   // NaN marks absent classes
  double miou() const;
};

}  // namespace occdiff::eval
