// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "brt/error.hpp"

namespace brt {

struct Vec2 {
  double u = 0, v = 0;
};

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{};
  }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double operator[](int i) const { return i == 0 ? x : i == 1 ? y : z; }
};

struct Mat3 {
  // row-major
  std::array<std::array<double, 3>, 3> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m[0][0] = r.m[1][1] = r.m[2][2] = 1.0;
    return r;
  }
  static Mat3 diag(double a, double b, double c) {
    Mat3 r;
    r.m[0][0] = a;
    r.m[1][1] = b;
    r.m[2][2] = c;
    return r;
  }
  Vec3 operator*(const Vec3& p) const {
    return {m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z,
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z,
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) r.m[i][j] += m[i][k] * o.m[k][j];
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
    return r;
  }
};

/// World-to-camera transform [R|t], row-major 3x4.
struct Mat34 {
  std::array<std::array<double, 4>, 3> m{};

  static Mat34 identity() {
    Mat34 r;
    r.m[0][0] = r.m[1][1] = r.m[2][2] = 1.0;
    return r;
  }
  Vec3 apply(const Vec3& p) const {
    return {m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z + m[0][3],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z + m[1][3],
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z + m[2][3]};
  }
};

inline Mat34 mat3_times_mat34(const Mat3& a, const Mat34& b) {
  Mat34 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += a.m[i][k] * b.m[k][j];
      r.m[i][j] = acc;
    }
  return r;
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct CameraView {
  Mat3 intrinsics;            // maps camera-frame rays to pixels
  Mat34 extrinsics;           // world -> camera
  double intrinsic_scale = 1.0;  // the configurable diag(s, s, 1) factor
  int width_px = 0;
  int height_px = 0;
  std::vector<double> image;  // H*W*3 row-major RGB in [0,1]
  std::vector<double> depth;  // H*W metres, empty when absent

  bool has_depth() const { return !depth.empty(); }

  void validate() const {
    if (intrinsics.m[2][2] != 1.0) throw ConfigError("CameraView: intrinsics[2][2] must be 1");
    if (!(intrinsic_scale > 0)) throw ConfigError("CameraView: intrinsic_scale must be positive");
    if (width_px <= 0 || height_px <= 0) throw ConfigError("CameraView: bad image dimensions");
    if (static_cast<int64_t>(image.size()) != int64_t{3} * width_px * height_px)
      throw ConfigError("CameraView: image buffer does not match width/height");
    if (!depth.empty() &&
        static_cast<int64_t>(depth.size()) != int64_t{1} * width_px * height_px)
      throw ConfigError("CameraView: depth buffer does not match width/height");
  }
};

struct AugmentParams {
  double theta = 0.0;           // rotation about Z, radians
  double flip_indicator = 1.0;  // +1 = no flip, -1 = flipped across the YZ plane
  double scale = 1.0;

  void validate() const {
    if (flip_indicator != 1.0 && flip_indicator != -1.0)
      throw ConfigError("AugmentParams: flip_indicator must be +1 or -1");
    if (!(scale >= 0.5 && scale <= 2.0))
      throw ConfigError("AugmentParams: scale outside [0.5, 2.0]");
  }
};

struct Box3D {
  Vec3 center;
  Vec3 size;  // full extents, strictly positive
  int class_id = 0;

  void validate() const {
    if (!(size.x > 0 && size.y > 0 && size.z > 0))
      throw ConfigError("Box3D: sizes must be strictly positive");
  }
  std::array<Vec3, 8> corners() const {
    std::array<Vec3, 8> c;
    int i = 0;
    for (int sx : {-1, 1})
      for (int sy : {-1, 1})
        for (int sz : {-1, 1})
          c[i++] = {center.x + sx * size.x / 2, center.y + sy * size.y / 2,
                    center.z + sz * size.z / 2};
    return c;
  }
  bool contains(const Vec3& p, double slack = 0.0) const {
    return std::abs(p.x - center.x) <= size.x / 2 + slack &&
           std::abs(p.y - center.y) <= size.y / 2 + slack &&
           std::abs(p.z - center.z) <= size.z / 2 + slack;
  }
};

struct Box2D {
  Vec2 min;
  Vec2 max;
  int class_id = 0;

  double width() const { return max.u - min.u; }
  double height() const { return max.v - min.v; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
};

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

struct ProjectedPoint {
  double u = 0, v = 0;
  double depth = 0;  // camera-frame z
};

/// Perspective projection: scaled intrinsics applied to the camera-frame
/// point, then the homogeneous divide. Returns nullopt when the point lies
/// behind (or on) the camera plane.
inline std::optional<ProjectedPoint> try_project_point(const CameraView& view, const Vec3& p) {
  const Vec3 cam = view.extrinsics.apply(p);
  if (!(cam.z > 0)) return std::nullopt;
  const Mat3 ks = Mat3::diag(view.intrinsic_scale, view.intrinsic_scale, 1.0) * view.intrinsics;
  const Vec3 h = ks * cam;
  return ProjectedPoint{h.x / h.z, h.y / h.z, cam.z};
}

inline Vec2 project_point(const CameraView& view, const Vec3& p) {
  const auto proj = try_project_point(view, p);
  if (!proj) throw BehindCameraError("project_point: point behind camera");
  return {proj->u, proj->v};
}

/// Tight axis-aligned 2D hull of the 8 projected corners. All corners must be
/// in front of the camera. `clamp` restricts the box to the image rectangle.
inline Box2D project_box3d(const CameraView& view, const Box3D& box, bool clamp = true) {
  Box2D out;
  out.class_id = box.class_id;
  bool first = true;
  for (const Vec3& c : box.corners()) {
    const auto proj = try_project_point(view, c);
    if (!proj) throw BehindCameraError("project_box3d: corner behind camera");
    if (first) {
      out.min = {proj->u, proj->v};
      out.max = {proj->u, proj->v};
      first = false;
    } else {
      out.min.u = std::min(out.min.u, proj->u);
      out.min.v = std::min(out.min.v, proj->v);
      out.max.u = std::max(out.max.u, proj->u);
      out.max.v = std::max(out.max.v, proj->v);
    }
  }
  if (clamp) {
    out.min.u = std::clamp(out.min.u, 0.0, static_cast<double>(view.width_px));
    out.max.u = std::clamp(out.max.u, 0.0, static_cast<double>(view.width_px));
    out.min.v = std::clamp(out.min.v, 0.0, static_cast<double>(view.height_px));
    out.max.v = std::clamp(out.max.v, 0.0, static_cast<double>(view.height_px));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// The augmentation matrix exactly as defined for point-cloud flip/rotate/
/// scale; flip_indicator = +1 is the identity-compatible "no flip" reading.
inline Mat3 augmentation_matrix(const AugmentParams& p) {
  p.validate();
  const double c = std::cos(p.theta), s = std::sin(p.theta);
  Mat3 a;
  a.m[0][0] = c * p.flip_indicator * p.scale;
  a.m[0][1] = s * p.flip_indicator;
  a.m[0][2] = 0;
  a.m[1][0] = -s;
  a.m[1][1] = c * p.scale;
  a.m[1][2] = 0;
  a.m[2][0] = 0;
  a.m[2][1] = 0;
  a.m[2][2] = p.scale;
  return a;
}

/// R_t' = A^T R_t, keeping projections consistent with augmented points.
inline Mat34 augment_extrinsics(const Mat34& rt, const Mat3& a) {
  return mat3_times_mat34(a.transposed(), rt);
}

/// Transformed axis-aligned hull of a transformed box: centre maps through A,
/// half-extents through |A| (componentwise), which preserves point-in-box
/// membership for every point of the original box.
inline Box3D transform_box(const Box3D& box, const Mat3& a) {
  Box3D out = box;
  out.center = a * box.center;
  for (int i = 0; i < 3; ++i) {
    double e = 0;
    for (int j = 0; j < 3; ++j) e += std::abs(a.m[i][j]) * box.size[j];
    (i == 0 ? out.size.x : i == 1 ? out.size.y : out.size.z) = e;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Occlusion filtering
// ---------------------------------------------------------------------------

/// visible[i] = the point projects onto the image, sits in front of the
/// camera, and its camera depth is at most the depth-map value at its rounded
/// pixel plus `tolerance` (boundary inclusive).
inline std::vector<bool> occlusion_filter(const CameraView& view, const std::vector<Vec3>& points,
                                          double tolerance = 0.05) {
  if (!view.has_depth()) throw ConfigError("occlusion_filter: view has no depth map");
  std::vector<bool> visible(points.size(), false);
  for (size_t i = 0; i < points.size(); ++i) {
    const auto proj = try_project_point(view, points[i]);
    if (!proj) continue;
    const long px = std::lround(proj->u);
    const long py = std::lround(proj->v);
    if (px < 0 || px >= view.width_px || py < 0 || py >= view.height_px) continue;
    const double surface = view.depth[static_cast<size_t>(py) * view.width_px + px];
    visible[i] = proj->depth <= surface + tolerance;
  }
  return visible;
}

// ---------------------------------------------------------------------------
// Multi-view stitching
// ---------------------------------------------------------------------------

/// Width-wise concatenation of same-sized views into one wide virtual image.
struct StitchedLayout {
  int num_views = 0;
  int view_width = 0;
  int height = 0;

  int total_width() const { return num_views * view_width; }
  double to_global_u(int view_index, double u) const {
    return static_cast<double>(view_index) * view_width + u;
  }
  /// Inverse mapping; valid for u_global in [0, total_width).
  std::pair<int, double> from_global_u(double u_global) const {
    int view = static_cast<int>(std::floor(u_global / view_width));
    view = std::clamp(view, 0, num_views - 1);
    return {view, u_global - static_cast<double>(view) * view_width};
  }
};

inline StitchedLayout stitch_views(const std::vector<CameraView>& views) {
  if (views.empty()) throw ConfigError("stitch_views: no views");
  StitchedLayout layout;
  layout.num_views = static_cast<int>(views.size());
  layout.view_width = views[0].width_px;
  layout.height = views[0].height_px;
  for (const CameraView& v : views) {
    if (v.height_px != layout.height) throw ConfigError("stitch_views: mismatched view heights");
    if (v.width_px != layout.view_width) throw ConfigError("stitch_views: mismatched view widths");
  }
  return layout;
}

/// Raster of the stitched image, H x (V*W) x 3 row-major.
inline std::vector<double> stitch_images(const std::vector<CameraView>& views) {
  const StitchedLayout layout = stitch_views(views);
  const int total_w = layout.total_width();
  std::vector<double> out(static_cast<size_t>(layout.height) * total_w * 3, 0.0);
  for (int vi = 0; vi < layout.num_views; ++vi) {
    const CameraView& v = views[static_cast<size_t>(vi)];
    for (int y = 0; y < layout.height; ++y)
      for (int x = 0; x < layout.view_width; ++x)
        for (int c = 0; c < 3; ++c)
          out[(static_cast<size_t>(y) * total_w + vi * layout.view_width + x) * 3 + c] =
              v.image[(static_cast<size_t>(y) * layout.view_width + x) * 3 + c];
  }
  return out;
}

}  // namespace brt
