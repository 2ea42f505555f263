// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "brt/error.hpp"
#include "brt/geometry.hpp"

namespace brt {

struct Detection {
  Box3D box;  // class in box.class_id
  double score = 0.0;
  std::string scene_id;
};

struct GroundTruthBox {
  Box3D box;
  std::string scene_id;
};

inline double iou_3d(const Box3D& a, const Box3D& b) {
  const double va = a.size.x * a.size.y * a.size.z;
  const double vb = b.size.x * b.size.y * b.size.z;
  if (va <= 0 || vb <= 0) throw NumericError("iou_3d: zero-volume box");
  double inter = 1.0;
  for (int axis = 0; axis < 3; ++axis) {
    const double lo = std::max(a.center[axis] - a.size[axis] / 2, b.center[axis] - b.size[axis] / 2);
    const double hi = std::min(a.center[axis] + a.size[axis] / 2, b.center[axis] + b.size[axis] / 2);
    inter *= std::max(0.0, hi - lo);
  }
  return inter / (va + vb - inter);
}

/// Greedy matching in descending score order: a detection is a true positive
/// iff its best unconsumed same-class gt in the same scene reaches the IoU
/// threshold. AP integrates the all-point interpolated PR curve.
inline double average_precision(std::vector<Detection> dets,
                                const std::vector<GroundTruthBox>& gts, int class_id,
                                double iou_thresh) {
  std::vector<const GroundTruthBox*> class_gts;
  for (const GroundTruthBox& g : gts)
    if (g.box.class_id == class_id) class_gts.push_back(&g);
  if (class_gts.empty()) return 0.0;

  std::erase_if(dets, [&](const Detection& d) { return d.box.class_id != class_id; });
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });

  std::vector<char> consumed(class_gts.size(), 0);
  std::vector<double> precision, recall;
  int64_t tp = 0, fp = 0;
  for (const Detection& d : dets) {
    double best_iou = -1;
    int64_t best = -1;
    for (size_t g = 0; g < class_gts.size(); ++g) {
      if (consumed[g] || class_gts[g]->scene_id != d.scene_id) continue;
      const double iou = iou_3d(d.box, class_gts[g]->box);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int64_t>(g);
      }
    }
    if (best >= 0 && best_iou >= iou_thresh) {
      consumed[static_cast<size_t>(best)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(class_gts.size()));
  }
  if (precision.empty()) return 0.0;

  // Precision envelope from the right, integrated over recall steps.
  for (size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct EvalSummary {
  double map = 0.0;
  std::map<int, double> per_class;  // only classes with at least one gt
};

inline EvalSummary evaluate_detections(const std::vector<Detection>& dets,
                                       const std::vector<GroundTruthBox>& gts,
                                       int64_t num_classes, double iou_thresh) {
  EvalSummary summary;
  int64_t counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    const bool has_gt = std::any_of(gts.begin(), gts.end(),
                                    [c](const GroundTruthBox& g) { return g.box.class_id == c; });
    if (!has_gt) continue;
    const double ap = average_precision(dets, gts, c, iou_thresh);
    summary.per_class[c] = ap;
    summary.map += ap;
    ++counted;
  }
  if (counted > 0) summary.map /= static_cast<double>(counted);
  return summary;
}

inline nlohmann::json metrics_json(const EvalSummary& at025, const EvalSummary& at05,
                                   const std::vector<std::string>& class_names,
                                   int64_t num_scenes) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [cls, ap] : at025.per_class) {
    const std::string name = cls < static_cast<int>(class_names.size())
                                 ? class_names[static_cast<size_t>(cls)]
                                 : "class_" + std::to_string(cls);
    const auto it = at05.per_class.find(cls);
    per_class[name] = {{"ap_025", ap}, {"ap_05", it == at05.per_class.end() ? 0.0 : it->second}};
  }
  return {{"map_025", at025.map},
          {"map_05", at05.map},
          {"per_class", per_class},
          {"num_scenes", num_scenes}};
}

}  // namespace brt
