// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "brt/error.hpp"
#include "brt/geometry.hpp"
#include "brt/rng.hpp"

namespace brt {

/// Depth value written where no surface is hit.
constexpr double kFarDepth = 1e30;

/// Fraction of points sampled as floor clutter rather than on box surfaces.
constexpr double kClutterFraction = 0.15;

struct ClassSpec {
  std::string name;
  Vec3 canonical_size;
  std::array<double, 3> color{};
};

struct SynthConfig {
  std::vector<ClassSpec> classes;
  int boxes_min = 2;
  int boxes_max = 5;
  int points_per_scene = 2048;
  int views_per_scene = 3;  // per-scene count is drawn uniformly from [1, this]
  int image_height = 64;
  int image_width = 64;
  double noise_std = 0.01;
  double room_extent = 8.0;  // square room [-E/2, E/2]^2, floor at z = 0

  void validate() const {
    if (classes.empty()) throw ConfigError("SynthConfig: classes must be non-empty");
    if (points_per_scene < 64) throw ConfigError("SynthConfig: points_per_scene must be >= 64");
    if (boxes_min < 1 || boxes_max < boxes_min) throw ConfigError("SynthConfig: bad box range");
    if (views_per_scene < 1) throw ConfigError("SynthConfig: views_per_scene must be >= 1");
    if (image_height < 8 || image_width < 8) throw ConfigError("SynthConfig: image too small");
    if (!(room_extent > 1.0)) throw ConfigError("SynthConfig: room_extent too small");
    if (!(noise_std >= 0.0)) throw ConfigError("SynthConfig: noise_std must be >= 0");
  }

  static SynthConfig default_config();
};

struct Scene {
  std::vector<Vec3> points;
  std::vector<std::array<double, 3>> point_colors;
  std::vector<CameraView> views;
  std::vector<Box3D> gt_boxes;
  std::string scene_id;
  uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Ray casting (the rasteriser behind images and depth maps)
// ---------------------------------------------------------------------------

struct RenderBuffers {
  std::vector<double> color;     // H*W*3
  std::vector<double> depth;     // H*W
  std::vector<int> box_index;    // H*W, -1 = background/floor
};

namespace detail {

/// Slab-method intersection of a ray with an axis-aligned box; returns the
/// nearest strictly positive hit distance or nullopt.
inline std::optional<double> ray_box(const Vec3& origin, const Vec3& dir, const Box3D& box) {
  double tmin = 0.0, tmax = std::numeric_limits<double>::infinity();
  for (int axis = 0; axis < 3; ++axis) {
    const double o = origin[axis], d = dir[axis];
    const double lo = box.center[axis] - box.size[axis] / 2;
    const double hi = box.center[axis] + box.size[axis] / 2;
    if (std::abs(d) < 1e-12) {
      if (o < lo || o > hi) return std::nullopt;
      continue;
    }
    double t0 = (lo - o) / d, t1 = (hi - o) / d;
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return std::nullopt;
  }
  if (tmin <= 1e-9) return std::nullopt;
  return tmin;
}

}  // namespace detail

/// Per-pixel nearest-hit rendering of boxes plus the floor plane. The depth
/// buffer stores camera-frame z of the hit (kFarDepth when nothing is hit),
/// which keeps depth maps exactly consistent with the painted image.
inline RenderBuffers render_view(const CameraView& view, const std::vector<Box3D>& boxes,
                                 const std::vector<ClassSpec>& classes, double room_extent) {
  const int w = view.width_px, h = view.height_px;
  RenderBuffers out;
  out.color.assign(static_cast<size_t>(w) * h * 3, 0.05);  // dark background
  out.depth.assign(static_cast<size_t>(w) * h, kFarDepth);
  out.box_index.assign(static_cast<size_t>(w) * h, -1);

  // Invert the world->camera transform to shoot rays in world space.
  const auto& e = view.extrinsics.m;
  const Vec3 r0{e[0][0], e[0][1], e[0][2]};
  const Vec3 r1{e[1][0], e[1][1], e[1][2]};
  const Vec3 r2{e[2][0], e[2][1], e[2][2]};
  const Vec3 t{e[0][3], e[1][3], e[2][3]};
  // camera position c solves R c + t = 0 (R orthonormal)
  const Vec3 cam_pos{-(r0.x * t.x + r1.x * t.y + r2.x * t.z),
                     -(r0.y * t.x + r1.y * t.y + r2.y * t.z),
                     -(r0.z * t.x + r1.z * t.y + r2.z * t.z)};

  const Mat3 ks = Mat3::diag(view.intrinsic_scale, view.intrinsic_scale, 1.0) * view.intrinsics;
  const double fx = ks.m[0][0], fy = ks.m[1][1], cx = ks.m[0][2], cy = ks.m[1][2];

  const double half = room_extent / 2;
  for (int py = 0; py < h; ++py) {
    for (int px = 0; px < w; ++px) {
      // Camera-frame ray through the pixel centre.
      const Vec3 dir_cam{(px + 0.5 - cx) / fx, (py + 0.5 - cy) / fy, 1.0};
      // Rotate to world frame: dir_world = R^T dir_cam.
      const Vec3 dir{r0.x * dir_cam.x + r1.x * dir_cam.y + r2.x * dir_cam.z,
                     r0.y * dir_cam.x + r1.y * dir_cam.y + r2.y * dir_cam.z,
                     r0.z * dir_cam.x + r1.z * dir_cam.y + r2.z * dir_cam.z};
      double best_t = std::numeric_limits<double>::infinity();
      int best_box = -1;
      for (size_t b = 0; b < boxes.size(); ++b) {
        const auto hit = detail::ray_box(cam_pos, dir, boxes[b]);
        if (hit && *hit < best_t) {
          best_t = *hit;
          best_box = static_cast<int>(b);
        }
      }
      // Floor plane z = 0 within the room footprint.
      if (dir.z < -1e-12) {
        const double tf = -cam_pos.z / dir.z;
        if (tf > 1e-9 && tf < best_t) {
          const Vec3 hit = cam_pos + dir * tf;
          if (std::abs(hit.x) <= half && std::abs(hit.y) <= half) {
            best_t = tf;
            best_box = -2;  // floor marker
          }
        }
      }
      const size_t pix = static_cast<size_t>(py) * w + px;
      if (!std::isfinite(best_t)) continue;
      // dir_cam.z == 1, so the ray parameter is exactly the camera-frame z.
      out.depth[pix] = best_t;
      if (best_box >= 0) {
        const auto& col = classes[static_cast<size_t>(boxes[static_cast<size_t>(best_box)].class_id)].color;
        for (int c = 0; c < 3; ++c) out.color[pix * 3 + c] = col[static_cast<size_t>(c)];
        out.box_index[pix] = best_box;
      } else {
        for (int c = 0; c < 3; ++c) out.color[pix * 3 + c] = 0.45;  // floor gray
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

namespace detail {

inline bool boxes_overlap(const Box3D& a, const Box3D& b, double gap) {
  return std::abs(a.center.x - b.center.x) < (a.size.x + b.size.x) / 2 + gap &&
         std::abs(a.center.y - b.center.y) < (a.size.y + b.size.y) / 2 + gap &&
         std::abs(a.center.z - b.center.z) < (a.size.z + b.size.z) / 2 + gap;
}

inline Vec3 sample_box_surface(const Box3D& box, Rng& rng) {
  // Pick a face proportional to its area, then a uniform point on it.
  const double ax = box.size.y * box.size.z;
  const double ay = box.size.x * box.size.z;
  const double az = box.size.x * box.size.y;
  const double total = 2 * (ax + ay + az);
  double r = rng.uniform(0.0, total);
  int axis;
  double sign;
  if (r < 2 * ax) {
    axis = 0;
    sign = r < ax ? -1 : 1;
  } else if (r < 2 * ax + 2 * ay) {
    axis = 1;
    sign = (r - 2 * ax) < ay ? -1 : 1;
  } else {
    axis = 2;
    sign = (r - 2 * ax - 2 * ay) < az ? -1 : 1;
  }
  Vec3 p{rng.uniform(-box.size.x / 2, box.size.x / 2),
         rng.uniform(-box.size.y / 2, box.size.y / 2),
         rng.uniform(-box.size.z / 2, box.size.z / 2)};
  if (axis == 0) p.x = sign * box.size.x / 2;
  if (axis == 1) p.y = sign * box.size.y / 2;
  if (axis == 2) p.z = sign * box.size.z / 2;
  return box.center + p;
}

/// Camera on the room boundary looking at `target`, +z forward, +x right,
/// +y down (so v grows downward in the image).
inline Mat34 look_at_extrinsics(const Vec3& eye, const Vec3& target) {
  const Vec3 fwd = (target - eye).normalized();
  const Vec3 world_up{0, 0, 1};
  Vec3 right = fwd.cross(world_up).normalized();
  if (right.norm() < 1e-9) right = Vec3{1, 0, 0};
  const Vec3 down = fwd.cross(right).normalized();  // y = z cross x
  // rows of R are the camera axes expressed in world coordinates
  Mat34 rt;
  const Vec3 rows[3] = {right, down, fwd};
  for (int i = 0; i < 3; ++i) {
    rt.m[i][0] = rows[i].x;
    rt.m[i][1] = rows[i].y;
    rt.m[i][2] = rows[i].z;
    rt.m[i][3] = -(rows[i].dot(eye));
  }
  return rt;
}

inline bool box_fully_visible(const CameraView& view, const Box3D& box) {
  for (const Vec3& c : box.corners()) {
    const auto proj = try_project_point(view, c);
    if (!proj) return false;
    if (proj->u < 0 || proj->u >= view.width_px || proj->v < 0 || proj->v >= view.height_px)
      return false;
  }
  return true;
}

}  // namespace detail

/// Deterministic synthetic scene: non-overlapping boxes on the floor of a
/// square room, surface-sampled points plus floor clutter, and inward-facing
/// boundary cameras rendered by render_view. Retries with a derived seed when
/// placement fails or no box is fully visible in any view, so the 2D stream
/// always has at least one usable label.
inline Scene generate_scene(const SynthConfig& cfg, uint64_t seed) {
  cfg.validate();
  const int max_attempts = 16;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Rng rng(mix_seed(seed, 0x5ce9e5 + static_cast<uint64_t>(attempt)));
    Scene scene;
    scene.seed = seed;
    scene.scene_id = "scene-" + std::to_string(seed);

    // --- boxes ---
    const int n_boxes = rng.uniform_int(cfg.boxes_min, cfg.boxes_max);
    const double half = cfg.room_extent / 2;
    bool placement_failed = false;
    for (int b = 0; b < n_boxes; ++b) {
      bool placed = false;
      for (int trial = 0; trial < 64 && !placed; ++trial) {
        const int cls = static_cast<int>(rng.uniform_int(cfg.classes.size()));
        const double jitter = rng.uniform(0.85, 1.2);
        Box3D box;
        box.class_id = cls;
        box.size = cfg.classes[static_cast<size_t>(cls)].canonical_size * jitter;
        const double margin = std::max({box.size.x, box.size.y}) / 2 + 0.4;
        box.center = {rng.uniform(-half + margin, half - margin),
                      rng.uniform(-half + margin, half - margin), box.size.z / 2};
        bool overlap = false;
        for (const Box3D& other : scene.gt_boxes)
          overlap = overlap || detail::boxes_overlap(box, other, 0.15);
        if (!overlap) {
          scene.gt_boxes.push_back(box);
          placed = true;
        }
      }
      if (!placed) {
        placement_failed = true;
        break;
      }
    }
    if (placement_failed) {
      if (attempt + 1 == max_attempts)
        throw GenerationError("generate_scene: could not place boxes without overlap");
      continue;
    }

    // --- points: box surfaces (area-weighted across boxes) then clutter ---
    const int n_clutter = static_cast<int>(std::lround(kClutterFraction * cfg.points_per_scene));
    const int n_surface = cfg.points_per_scene - n_clutter;
    std::vector<double> box_area(scene.gt_boxes.size());
    double total_area = 0;
    for (size_t b = 0; b < scene.gt_boxes.size(); ++b) {
      const Vec3& s = scene.gt_boxes[b].size;
      box_area[b] = 2 * (s.x * s.y + s.y * s.z + s.x * s.z);
      total_area += box_area[b];
    }
    for (int i = 0; i < n_surface; ++i) {
      double r = rng.uniform(0.0, total_area);
      size_t b = 0;
      while (b + 1 < box_area.size() && r >= box_area[b]) {
        r -= box_area[b];
        ++b;
      }
      scene.points.push_back(detail::sample_box_surface(scene.gt_boxes[b], rng));
      scene.point_colors.push_back(cfg.classes[static_cast<size_t>(scene.gt_boxes[b].class_id)].color);
    }
    for (int i = 0; i < n_clutter; ++i) {
      scene.points.push_back({rng.uniform(-half, half), rng.uniform(-half, half), 0.0});
      scene.point_colors.push_back({0.45, 0.45, 0.45});
    }
    if (cfg.noise_std > 0)
      for (Vec3& p : scene.points)
        p = p + Vec3{rng.normal(0, cfg.noise_std), rng.normal(0, cfg.noise_std),
                     rng.normal(0, cfg.noise_std)};

    // --- cameras on the boundary, evenly spread with a random phase ---
    const int n_views = rng.uniform_int(1, cfg.views_per_scene);
    const double phase = rng.uniform(0, 2 * std::numbers::pi);
    for (int v = 0; v < n_views; ++v) {
      const double ang = phase + v * 2 * std::numbers::pi / std::max(1, n_views);
      const Vec3 eye{half * 1.05 * std::cos(ang), half * 1.05 * std::sin(ang),
                     rng.uniform(2.0, 3.0)};
      CameraView view;
      view.width_px = cfg.image_width;
      view.height_px = cfg.image_height;
      const double f = 0.75 * cfg.image_width;  // ~ 67 degree horizontal FOV
      view.intrinsics = Mat3::identity();
      view.intrinsics.m[0][0] = f;
      view.intrinsics.m[1][1] = f;
      view.intrinsics.m[0][2] = cfg.image_width / 2.0;
      view.intrinsics.m[1][2] = cfg.image_height / 2.0;
      view.extrinsics = detail::look_at_extrinsics(eye, Vec3{0, 0, 0.6});
      RenderBuffers rb = render_view(view, scene.gt_boxes, cfg.classes, cfg.room_extent);
      view.image = std::move(rb.color);
      view.depth = std::move(rb.depth);
      view.validate();
      scene.views.push_back(std::move(view));
    }

    // --- regeneration guard: at least one box fully visible somewhere ---
    bool any_visible = false;
    for (const Box3D& box : scene.gt_boxes)
      for (const CameraView& view : scene.views)
        any_visible = any_visible || detail::box_fully_visible(view, box);
    if (!any_visible) {
      if (attempt + 1 == max_attempts)
        throw GenerationError("generate_scene: no box fully visible in any view");
      continue;
    }
    return scene;
  }
  throw GenerationError("generate_scene: exhausted attempts");
}

/// Applies A to points and box labels and A^T R_t to every view; images and
/// depth maps are untouched since the extrinsic update keeps projections
/// aligned with the augmented geometry.
inline Scene augment_scene(const Scene& scene, const AugmentParams& params) {
  const Mat3 a = augmentation_matrix(params);
  Scene out = scene;
  for (Vec3& p : out.points) p = a * p;
  for (Box3D& b : out.gt_boxes) b = transform_box(b, a);
  for (CameraView& v : out.views) v.extrinsics = augment_extrinsics(v.extrinsics, a);
  return out;
}

inline SynthConfig SynthConfig::default_config() {
  SynthConfig cfg;
  cfg.classes = {
      {"crate", {0.9, 0.9, 0.9}, {0.90, 0.10, 0.10}},
      {"locker", {0.7, 0.5, 1.8}, {0.10, 0.70, 0.15}},
      {"table", {1.6, 0.9, 0.75}, {0.15, 0.25, 0.95}},
      {"stool", {0.45, 0.45, 0.5}, {0.95, 0.80, 0.10}},
      {"sofa", {2.0, 0.9, 0.8}, {0.60, 0.15, 0.70}},
      {"fridge", {0.8, 0.75, 1.7}, {0.10, 0.85, 0.85}},
      {"bin", {0.5, 0.5, 0.7}, {0.95, 0.50, 0.10}},
      {"shelf", {1.2, 0.4, 1.5}, {0.55, 0.35, 0.15}},
      {"bed", {2.0, 1.5, 0.6}, {0.90, 0.45, 0.60}},
      {"desk", {1.3, 0.7, 0.72}, {0.35, 0.90, 0.40}},
  };
  return cfg;
}

}  // namespace brt
