// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "brt/error.hpp"
#include "brt/geometry.hpp"
#include "brt/nn.hpp"
#include "brt/scene.hpp"
#include "brt/tensor.hpp"

namespace brt {

/// Radius of the local-density feature attached to each seed point.
constexpr double kDensityRadius = 0.5;

// ---------------------------------------------------------------------------
// Farthest point sampling
// ---------------------------------------------------------------------------

namespace detail {

inline bool lex_less(const Vec3& a, const Vec3& b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  return a.z < b.z;
}

}  // namespace detail

/// Greedy max-min subset selection. The start point and all tie-breaks are
/// functions of the coordinates alone (lexicographic order), so shuffling the
/// input order returns the same points in the same sequence.
inline std::vector<int64_t> farthest_point_sample(const std::vector<Vec3>& pts, int64_t n) {
  const int64_t total = static_cast<int64_t>(pts.size());
  if (n > total) throw ConfigError("farthest_point_sample: asked for more points than available");
  std::vector<int64_t> picked;
  picked.reserve(static_cast<size_t>(n));
  if (n == 0) return picked;

  int64_t start = 0;
  for (int64_t i = 1; i < total; ++i)
    if (detail::lex_less(pts[static_cast<size_t>(start)], pts[static_cast<size_t>(i)])) start = i;

  std::vector<double> min_d2(static_cast<size_t>(total), std::numeric_limits<double>::infinity());
  std::vector<char> taken(static_cast<size_t>(total), 0);
  int64_t cur = start;
  for (int64_t k = 0; k < n; ++k) {
    picked.push_back(cur);
    taken[static_cast<size_t>(cur)] = 1;
    const Vec3 c = pts[static_cast<size_t>(cur)];
    int64_t best = -1;
    for (int64_t i = 0; i < total; ++i) {
      if (taken[static_cast<size_t>(i)]) continue;
      const Vec3 d = pts[static_cast<size_t>(i)] - c;
      min_d2[static_cast<size_t>(i)] = std::min(min_d2[static_cast<size_t>(i)], d.dot(d));
      if (best == -1 || min_d2[static_cast<size_t>(i)] > min_d2[static_cast<size_t>(best)] ||
          (min_d2[static_cast<size_t>(i)] == min_d2[static_cast<size_t>(best)] &&
           detail::lex_less(pts[static_cast<size_t>(i)], pts[static_cast<size_t>(best)])))
        best = i;
    }
    if (best == -1) break;
    cur = best;
  }
  return picked;
}

// ---------------------------------------------------------------------------
// Seed points
// ---------------------------------------------------------------------------

struct SeedPoints {
  std::vector<Vec3> coords;  // N_pnt world coordinates, an FPS subset
  Tensor coords_tensor;      // [N_pnt, 3] constant copy of coords
  Tensor feats;              // [N_pnt, F], differentiable through the encoder
  Vec3 cloud_centroid;
};

/// FPS subsample plus a small learned encoder over (centred coords, local
/// density), standing in for a point-cloud backbone while keeping the
/// N_pnt x (3+F) seed interface.
inline SeedPoints sample_seeds(const Scene& scene, int64_t n_pnt, const Mlp& encoder) {
  if (static_cast<int64_t>(scene.points.size()) < n_pnt)
    throw ConfigError("sample_seeds: scene has fewer than N_pnt points");
  SeedPoints seeds;
  const auto idx = farthest_point_sample(scene.points, n_pnt);
  Vec3 centroid{};
  for (const Vec3& p : scene.points) centroid = centroid + p;
  centroid = centroid * (1.0 / static_cast<double>(scene.points.size()));
  seeds.cloud_centroid = centroid;

  std::vector<double> coords_data, enc_in;
  coords_data.reserve(static_cast<size_t>(n_pnt) * 3);
  enc_in.reserve(static_cast<size_t>(n_pnt) * 4);
  const double r2 = kDensityRadius * kDensityRadius;
  for (int64_t i : idx) {
    const Vec3& p = scene.points[static_cast<size_t>(i)];
    seeds.coords.push_back(p);
    coords_data.insert(coords_data.end(), {p.x, p.y, p.z});
    int64_t count = 0;
    for (const Vec3& q : scene.points) {
      const Vec3 d = q - p;
      if (d.dot(d) <= r2) ++count;
    }
    const Vec3 c = p - centroid;
    enc_in.insert(enc_in.end(),
                  {c.x, c.y, c.z, static_cast<double>(count) / static_cast<double>(scene.points.size())});
  }
  seeds.coords_tensor = Tensor::from_data({n_pnt, 3}, std::move(coords_data));
  seeds.feats = encoder.forward(Tensor::from_data({n_pnt, 4}, std::move(enc_in)));
  return seeds;
}

// ---------------------------------------------------------------------------
// Patch grid
// ---------------------------------------------------------------------------

struct PatchGrid {
  int patch_size = 0;
  int rows = 0;
  int cols = 0;  // over the stitched width
  Tensor embeddings;  // [rows*cols, D]

  int64_t n_pat() const { return int64_t{rows} * cols; }
};

/// Flattens every SxSx3 patch of the stitched raster, embeds it with the
/// shared MLP and adds the learned per-cell positional embedding. Cells are
/// addressed as row * max_cols + col inside `pos_embed` so a cell keeps its
/// embedding regardless of how many views a scene has.
inline PatchGrid embed_patches(const std::vector<double>& stitched, const StitchedLayout& layout,
                               int patch_size, const Mlp& patch_mlp, const Tensor& pos_embed,
                               int max_cols) {
  PatchGrid grid;
  grid.patch_size = patch_size;
  grid.rows = layout.height / patch_size;
  grid.cols = layout.total_width() / patch_size;
  if (grid.rows == 0 || grid.cols == 0)
    throw ConfigError("embed_patches: image smaller than one patch");
  if (grid.cols > max_cols)
    throw ConfigError("embed_patches: stitched image wider than the positional-embedding grid");
  const int total_w = layout.total_width();
  const int64_t flat = int64_t{3} * patch_size * patch_size;
  std::vector<double> input(static_cast<size_t>(grid.n_pat() * flat));
  std::vector<int64_t> pe_idx(static_cast<size_t>(grid.n_pat()));
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const int64_t pi = int64_t{r} * grid.cols + c;
      pe_idx[static_cast<size_t>(pi)] = int64_t{r} * max_cols + c;
      double* dst = input.data() + pi * flat;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          for (int ch = 0; ch < 3; ++ch)
            *dst++ = stitched[(static_cast<size_t>(r * patch_size + y) * total_w +
                               c * patch_size + x) * 3 + ch];
    }
  }
  for (int64_t i : pe_idx)
    if (i >= pos_embed.rows())
      throw ConfigError("embed_patches: positional embedding table too small");
  const Tensor content = patch_mlp.forward(Tensor::from_data({grid.n_pat(), flat}, std::move(input)));
  grid.embeddings = add(content, gather_rows(pos_embed, pe_idx));
  return grid;
}

// ---------------------------------------------------------------------------
// Point-to-patch map
// ---------------------------------------------------------------------------

struct PointPatchMap {
  std::vector<int64_t> patch_index;  // -1 when no valid projection
  std::vector<Vec2> pixel;           // stitched continuous coordinates, (-1,-1) when invalid
  std::vector<int> view_index;       // -1 when invalid
};

/// Patch index of a pixel over a grid of stride `patch_size` and stitched
/// width `total_width`: floor(floor(v)/S) * floor(W/S) + floor(floor(u)/S).
inline int64_t patch_index_for_pixel(double u, double v, int total_width, int patch_size) {
  const int64_t cols = total_width / patch_size;
  const int64_t row = static_cast<int64_t>(std::floor(std::floor(v) / patch_size));
  const int64_t col = static_cast<int64_t>(std::floor(std::floor(u) / patch_size));
  return row * cols + col;
}

namespace detail {

/// Visibility rule shared with occlusion_filter: in front, rounded pixel on
/// the raster, and not hidden behind the depth map when one exists.
inline std::optional<ProjectedPoint> visible_projection(const CameraView& view, const Vec3& p,
                                                        double tolerance) {
  const auto proj = try_project_point(view, p);
  if (!proj) return std::nullopt;
  if (proj->u < 0 || proj->u >= view.width_px || proj->v < 0 || proj->v >= view.height_px)
    return std::nullopt;
  if (view.has_depth()) {
    const long px = std::lround(proj->u);
    const long py = std::lround(proj->v);
    if (px < 0 || px >= view.width_px || py < 0 || py >= view.height_px) return std::nullopt;
    const double surface = view.depth[static_cast<size_t>(py) * view.width_px + px];
    if (proj->depth > surface + tolerance) return std::nullopt;
  }
  return proj;
}

}  // namespace detail

/// Projects every seed through its best view (smallest camera depth, ties to
/// the lowest view index), occlusion-filtered when depth maps exist, and
/// derives the stitched-grid patch index. Any failure becomes the sentinel.
inline PointPatchMap build_point_patch_map(const std::vector<Vec3>& seed_coords,
                                           const std::vector<CameraView>& views, int patch_size,
                                           double occlusion_tolerance = 0.05) {
  const StitchedLayout layout = stitch_views(views);
  const int rows = layout.height / patch_size;
  const int cols = layout.total_width() / patch_size;
  PointPatchMap map;
  map.patch_index.assign(seed_coords.size(), -1);
  map.pixel.assign(seed_coords.size(), Vec2{-1, -1});
  map.view_index.assign(seed_coords.size(), -1);
  for (size_t i = 0; i < seed_coords.size(); ++i) {
    int best_view = -1;
    ProjectedPoint best;
    for (size_t v = 0; v < views.size(); ++v) {
      const auto proj = detail::visible_projection(views[v], seed_coords[i], occlusion_tolerance);
      if (proj && (best_view == -1 || proj->depth < best.depth)) {
        best_view = static_cast<int>(v);
        best = *proj;
      }
    }
    if (best_view == -1) continue;
    const double u_global = layout.to_global_u(best_view, best.u);
    map.pixel[i] = {u_global, best.v};
    map.view_index[i] = best_view;
    const int64_t row = static_cast<int64_t>(std::floor(std::floor(best.v) / patch_size));
    const int64_t col = static_cast<int64_t>(std::floor(std::floor(u_global) / patch_size));
    if (row >= 0 && row < rows && col >= 0 && col < cols) map.patch_index[i] = row * cols + col;
  }
  return map;
}

}  // namespace brt
