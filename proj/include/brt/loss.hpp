// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "brt/error.hpp"
#include "brt/geometry.hpp"
#include "brt/scene.hpp"
#include "brt/tensor.hpp"

namespace brt {

struct LossWeights {
  double alpha1 = 0.2;  // 3D classification block
  double alpha2 = 0.5;  // 2D box block
  double alpha3 = 0.1;  // 2D classification
  double w_center3d = 1.0;
  double w_size3d = 0.1;
  double w_objcls3d = 1.0;
  double w_sizecls3d = 1.0;
  double w_center2d = 1.0;
  double w_giou2d = 2.0;

  void validate() const {
    for (double v : {alpha1, alpha2, alpha3, w_center3d, w_size3d, w_objcls3d, w_sizecls3d,
                     w_center2d, w_giou2d})
      if (v < 0) throw ConfigError("LossWeights: weights must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Hungarian assignment
// ---------------------------------------------------------------------------

struct MatchResult {
  std::vector<std::pair<int64_t, int64_t>> pairs;  // (query/row index, gt/column index)
  std::vector<int64_t> unmatched_queries;
  double total_cost = 0.0;
};

/// Minimum-cost injective assignment of all m columns of an n x m matrix
/// (n >= m) using the potentials form of the Hungarian algorithm.
inline MatchResult hungarian(const std::vector<std::vector<double>>& cost) {
  const int64_t n = static_cast<int64_t>(cost.size());
  const int64_t m = n == 0 ? 0 : static_cast<int64_t>(cost[0].size());
  if (m > n) throw ConfigError("hungarian: more columns than rows");
  for (const auto& row : cost)
    for (double c : row)
      if (!std::isfinite(c)) throw NumericError("hungarian: non-finite cost");

  MatchResult result;
  if (m == 0) {
    for (int64_t q = 0; q < n; ++q) result.unmatched_queries.push_back(q);
    return result;
  }

  // Solve with columns (gt) as the scanned side so every column is matched.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(m) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int64_t> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int64_t i = 1; i <= m; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int64_t i0 = p[static_cast<size_t>(j0)];
      double delta = kInf;
      int64_t j1 = -1;
      for (int64_t j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur =
            cost[static_cast<size_t>(j - 1)][static_cast<size_t>(i0 - 1)] - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int64_t j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int64_t> gt_of_query(static_cast<size_t>(n), -1);
  for (int64_t j = 1; j <= n; ++j)
    if (p[static_cast<size_t>(j)] != 0) gt_of_query[static_cast<size_t>(j - 1)] = p[static_cast<size_t>(j)] - 1;
  for (int64_t q = 0; q < n; ++q) {
    if (gt_of_query[static_cast<size_t>(q)] >= 0) {
      result.pairs.emplace_back(q, gt_of_query[static_cast<size_t>(q)]);
      result.total_cost += cost[static_cast<size_t>(q)][static_cast<size_t>(gt_of_query[static_cast<size_t>(q)])];
    } else {
      result.unmatched_queries.push_back(q);
    }
  }
  std::sort(result.pairs.begin(), result.pairs.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  return result;
}

// ---------------------------------------------------------------------------
// Box overlap
// ---------------------------------------------------------------------------

inline double iou_2d(const Box2D& a, const Box2D& b) {
  if (a.area() <= 0 || b.area() <= 0) throw NumericError("iou_2d: zero-area box");
  const double iw = std::max(0.0, std::min(a.max.u, b.max.u) - std::max(a.min.u, b.min.u));
  const double ih = std::max(0.0, std::min(a.max.v, b.max.v) - std::max(a.min.v, b.min.v));
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// IoU minus the normalised empty area of the smallest enclosing box.
inline double giou_2d(const Box2D& a, const Box2D& b) {
  if (a.area() <= 0 || b.area() <= 0) throw NumericError("giou_2d: zero-area box");
  const double iw = std::max(0.0, std::min(a.max.u, b.max.u) - std::max(a.min.u, b.min.u));
  const double ih = std::max(0.0, std::min(a.max.v, b.max.v) - std::max(a.min.v, b.min.v));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.max.u, b.max.u) - std::min(a.min.u, b.min.u)) *
                      (std::max(a.max.v, b.max.v) - std::min(a.min.v, b.min.v));
  return inter / uni - (hull - uni) / hull;
}

// ---------------------------------------------------------------------------
// Matching cost
// ---------------------------------------------------------------------------

/// One decoded 3D prediction row: centre, size, class logits over C+1.
struct Pred3D {
  Vec3 center;
  Vec3 size;
  std::vector<double> logits;
};

inline Pred3D pred3d_row(const Tensor& pred3d, int64_t row, int64_t num_classes) {
  Pred3D p;
  p.center = {pred3d.at(row, 0), pred3d.at(row, 1), pred3d.at(row, 2)};
  p.size = {pred3d.at(row, 3), pred3d.at(row, 4), pred3d.at(row, 5)};
  for (int64_t c = 0; c < num_classes + 1; ++c) p.logits.push_back(pred3d.at(row, 6 + c));
  return p;
}

inline double log_class_prob(const std::vector<double>& logits, int cls) {
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double sum = 0;
  for (double l : logits) sum += std::exp(l - mx);
  return logits[static_cast<size_t>(cls)] - mx - std::log(sum);
}

/// Mirrors the loss structure so the assignment optimises the same objective:
/// L1(centre) + 0.1 L1(size) - log p(class).
inline double match_cost(const Pred3D& pred, const Box3D& gt) {
  const double l1c = std::abs(pred.center.x - gt.center.x) + std::abs(pred.center.y - gt.center.y) +
                     std::abs(pred.center.z - gt.center.z);
  const double l1s = std::abs(pred.size.x - gt.size.x) + std::abs(pred.size.y - gt.size.y) +
                     std::abs(pred.size.z - gt.size.z);
  return l1c + 0.1 * l1s - log_class_prob(pred.logits, gt.class_id);
}

inline MatchResult match_predictions(const Tensor& pred3d, const std::vector<Box3D>& gts,
                                     int64_t num_classes) {
  std::vector<std::vector<double>> cost(static_cast<size_t>(pred3d.rows()));
  for (int64_t q = 0; q < pred3d.rows(); ++q) {
    const Pred3D p = pred3d_row(pred3d, q, num_classes);
    for (const Box3D& gt : gts) cost[static_cast<size_t>(q)].push_back(match_cost(p, gt));
  }
  return hungarian(cost);
}

// ---------------------------------------------------------------------------
// 2D ground truth derivation
// ---------------------------------------------------------------------------

/// Normalised stitched-image 2D target; invalid when the box is not fully in
/// front of any camera (such boxes are dropped from the 2D regression and
/// their queries are trained toward no-object on the 2D side).
struct GtBox2D {
  bool valid = false;
  double cx = 0, cy = 0, w = 0, h = 0;
};

inline std::vector<GtBox2D> derive_gt_boxes_2d(const Scene& scene, const StitchedLayout& layout) {
  std::vector<GtBox2D> out;
  for (const Box3D& box : scene.gt_boxes) {
    GtBox2D target;
    int best_view = -1;
    double best_depth = 0;
    for (size_t v = 0; v < scene.views.size(); ++v) {
      bool in_front = true;
      for (const Vec3& c : box.corners())
        in_front = in_front && try_project_point(scene.views[v], c).has_value();
      if (!in_front) continue;
      const double depth = scene.views[v].extrinsics.apply(box.center).z;
      if (best_view == -1 || depth < best_depth) {
        best_view = static_cast<int>(v);
        best_depth = depth;
      }
    }
    if (best_view >= 0) {
      const Box2D b2 = project_box3d(scene.views[static_cast<size_t>(best_view)], box, /*clamp=*/true);
      if (b2.area() > 0) {
        const double u0 = layout.to_global_u(best_view, b2.min.u);
        const double u1 = layout.to_global_u(best_view, b2.max.u);
        target.valid = true;
        target.cx = 0.5 * (u0 + u1) / layout.total_width();
        target.cy = 0.5 * (b2.min.v + b2.max.v) / layout.height;
        target.w = (u1 - u0) / layout.total_width();
        target.h = (b2.max.v - b2.min.v) / layout.height;
      }
    }
    out.push_back(target);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composite loss
// ---------------------------------------------------------------------------

struct LossTerms {
  double obj3d_center = 0;
  double obj3d_size = 0;
  double cls3d_obj = 0;
  double cls3d_size = 0;
  double obj2d_center = 0;
  double obj2d_giou = 0;
  double cls2d = 0;
  double total = 0;
};

inline double combine_loss_terms(const LossTerms& t, const LossWeights& w) {
  return (w.w_center3d * t.obj3d_center + w.w_size3d * t.obj3d_size) +
         w.alpha1 * (w.w_objcls3d * t.cls3d_obj + w.w_sizecls3d * t.cls3d_size) +
         w.alpha2 * (w.w_center2d * t.obj2d_center + w.w_giou2d * t.obj2d_giou) +
         w.alpha3 * t.cls2d;
}

struct LossResult {
  Tensor total;  // scalar, differentiable
  LossTerms terms;
  MatchResult match;
};

/// Per-class mean ground-truth sizes over a training split; classes with no
/// instances fall back to the global mean.
inline std::vector<Vec3> size_templates(const std::vector<Scene>& scenes, int64_t num_classes) {
  std::vector<Vec3> sums(static_cast<size_t>(num_classes), Vec3{});
  std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
  Vec3 global{};
  int64_t total = 0;
  for (const Scene& s : scenes)
    for (const Box3D& b : s.gt_boxes) {
      if (b.class_id < 0 || b.class_id >= num_classes)
        throw ConfigError("size_templates: class_id out of range");
      sums[static_cast<size_t>(b.class_id)] = sums[static_cast<size_t>(b.class_id)] + b.size;
      counts[static_cast<size_t>(b.class_id)]++;
      global = global + b.size;
      ++total;
    }
  std::vector<Vec3> templates(static_cast<size_t>(num_classes), Vec3{1, 1, 1});
  const Vec3 fallback = total > 0 ? global * (1.0 / static_cast<double>(total)) : Vec3{1, 1, 1};
  for (int64_t c = 0; c < num_classes; ++c)
    templates[static_cast<size_t>(c)] =
        counts[static_cast<size_t>(c)] > 0
            ? sums[static_cast<size_t>(c)] * (1.0 / static_cast<double>(counts[static_cast<size_t>(c)]))
            : fallback;
  return templates;
}

inline int nearest_template(const std::vector<Vec3>& templates, const Vec3& size) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t t = 0; t < templates.size(); ++t) {
    const double d = std::abs(templates[t].x - size.x) + std::abs(templates[t].y - size.y) +
                     std::abs(templates[t].z - size.z);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(t);
    }
  }
  return best;
}

namespace detail {

inline Tensor const_col(const std::vector<double>& v) {
  return Tensor::from_data({static_cast<int64_t>(v.size()), 1}, v);
}

/// Differentiable GIoU of matched normalised cx/cy/w/h boxes, one per row.
inline Tensor giou_tensor(const Tensor& pred_boxes, const Tensor& gt_boxes) {
  const auto corners = [](const Tensor& b) {
    const Tensor cx = slice_cols(b, 0, 1), cy = slice_cols(b, 1, 2);
    const Tensor w = slice_cols(b, 2, 3), h = slice_cols(b, 3, 4);
    return std::array<Tensor, 4>{sub(cx, scale(w, 0.5)), sub(cy, scale(h, 0.5)),
                                 add(cx, scale(w, 0.5)), add(cy, scale(h, 0.5))};
  };
  const auto [ax1, ay1, ax2, ay2] = corners(pred_boxes);
  const auto [bx1, by1, bx2, by2] = corners(gt_boxes);
  const Tensor iw = relu(sub(minimum(ax2, bx2), maximum(ax1, bx1)));
  const Tensor ih = relu(sub(minimum(ay2, by2), maximum(ay1, by1)));
  const Tensor inter = mul(iw, ih);
  const Tensor area_a = mul(sub(ax2, ax1), sub(ay2, ay1));
  const Tensor area_b = mul(sub(bx2, bx1), sub(by2, by1));
  const Tensor uni = sub(add(area_a, area_b), inter);
  const Tensor hull = mul(sub(maximum(ax2, bx2), minimum(ax1, bx1)),
                          sub(maximum(ay2, by2), minimum(ay1, by1)));
  return sub(div(inter, uni), div(sub(hull, uni), hull));
}

}  // namespace detail

/// The composite objective. Matching runs on the 3D side (or is injected by
/// the caller); the 2D stream reuses the same query<->gt pairing since the
/// two query streams are aligned by construction.
inline LossResult total_loss(const Tensor& pred3d, const Tensor& pred2d,
                             const std::vector<Box3D>& gts, const std::vector<GtBox2D>& gts2d,
                             int64_t num_classes, const LossWeights& weights,
                             const std::vector<Vec3>& templates,
                             const MatchResult* injected_match = nullptr) {
  weights.validate();
  const int64_t k = pred3d.rows();
  const int64_t m = static_cast<int64_t>(gts.size());
  if (m > k) throw ConfigError("total_loss: more ground-truth boxes than queries");
  if (gts2d.size() != gts.size()) throw ConfigError("total_loss: gts2d size mismatch");

  LossResult res;
  res.match = injected_match ? *injected_match : match_predictions(pred3d, gts, num_classes);

  const int no_object = static_cast<int>(num_classes);
  std::vector<int> targets3d(static_cast<size_t>(k), no_object);
  std::vector<int> targets2d(static_cast<size_t>(k), no_object);
  std::vector<int64_t> matched_q, matched_g;
  for (const auto& [q, g] : res.match.pairs) {
    targets3d[static_cast<size_t>(q)] = gts[static_cast<size_t>(g)].class_id;
    if (gts2d[static_cast<size_t>(g)].valid)
      targets2d[static_cast<size_t>(q)] = gts[static_cast<size_t>(g)].class_id;
    matched_q.push_back(q);
    matched_g.push_back(g);
  }

  const Tensor zero = Tensor::scalar(0.0);
  Tensor obj3d_center = zero, obj3d_size = zero, cls3d_size = zero;
  Tensor obj2d_center = zero, obj2d_giou = zero;

  if (!matched_q.empty()) {
    const int64_t mm = static_cast<int64_t>(matched_q.size());
    std::vector<double> gt_centers, gt_sizes;
    std::vector<int> size_targets;
    for (int64_t g : matched_g) {
      const Box3D& box = gts[static_cast<size_t>(g)];
      gt_centers.insert(gt_centers.end(), {box.center.x, box.center.y, box.center.z});
      gt_sizes.insert(gt_sizes.end(), {box.size.x, box.size.y, box.size.z});
      size_targets.push_back(nearest_template(templates, box.size));
    }
    const Tensor pc = gather_rows(slice_cols(pred3d, 0, 3), matched_q);
    const Tensor ps = gather_rows(slice_cols(pred3d, 3, 6), matched_q);
    obj3d_center = scale(sum_all(abs(sub(pc, Tensor::from_data({mm, 3}, gt_centers)))), 1.0 / mm);
    obj3d_size = scale(sum_all(abs(sub(ps, Tensor::from_data({mm, 3}, gt_sizes)))), 1.0 / mm);
    const Tensor size_logits = gather_rows(slice_cols(pred3d, 6, 6 + num_classes), matched_q);
    cls3d_size = mean_all(ce_rows(size_logits, size_targets));

    // 2D terms over matched pairs whose gt has a usable projection.
    std::vector<int64_t> q2d;
    std::vector<double> gt_boxes2d;
    for (size_t i = 0; i < matched_q.size(); ++i) {
      const GtBox2D& t = gts2d[static_cast<size_t>(matched_g[i])];
      if (!t.valid) continue;
      q2d.push_back(matched_q[i]);
      gt_boxes2d.insert(gt_boxes2d.end(), {t.cx, t.cy, t.w, t.h});
    }
    if (!q2d.empty()) {
      const int64_t mv = static_cast<int64_t>(q2d.size());
      const Tensor pb = gather_rows(slice_cols(pred2d, 0, 4), q2d);
      const Tensor gb = Tensor::from_data({mv, 4}, gt_boxes2d);
      obj2d_center =
          scale(sum_all(abs(sub(slice_cols(pb, 0, 2), slice_cols(gb, 0, 2)))), 1.0 / mv);
      obj2d_giou = mean_all(add_scalar(neg(detail::giou_tensor(pb, gb)), 1.0));
    }
  }

  const Tensor cls3d_obj =
      mean_all(ce_rows(slice_cols(pred3d, 6, 6 + num_classes + 1), targets3d));
  const Tensor cls2d = mean_all(ce_rows(slice_cols(pred2d, 4, 4 + num_classes + 1), targets2d));

  res.total = add(
      add(add(scale(obj3d_center, weights.w_center3d), scale(obj3d_size, weights.w_size3d)),
          scale(add(scale(cls3d_obj, weights.w_objcls3d), scale(cls3d_size, weights.w_sizecls3d)),
                weights.alpha1)),
      add(scale(add(scale(obj2d_center, weights.w_center2d), scale(obj2d_giou, weights.w_giou2d)),
                weights.alpha2),
          scale(cls2d, weights.alpha3)));

  res.terms.obj3d_center = obj3d_center.item();
  res.terms.obj3d_size = obj3d_size.item();
  res.terms.cls3d_obj = cls3d_obj.item();
  res.terms.cls3d_size = cls3d_size.item();
  res.terms.obj2d_center = obj2d_center.item();
  res.terms.obj2d_giou = obj2d_giou.item();
  res.terms.cls2d = cls2d.item();
  res.terms.total = res.total.item();
  return res;
}

}  // namespace brt
