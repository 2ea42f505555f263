// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "brt/scene.hpp"
#include "brt/tokenizer.hpp"
#include "oracles.hpp"

using namespace brt;
using Catch::Approx;

namespace {

CameraView frontal_view(int w, int h, double focal, bool with_depth = false) {
  CameraView v;
  v.intrinsics = Mat3::identity();
  v.intrinsics.m[0][0] = focal;
  v.intrinsics.m[1][1] = focal;
  v.intrinsics.m[0][2] = w / 2.0;
  v.intrinsics.m[1][2] = h / 2.0;
  v.extrinsics = Mat34::identity();
  v.width_px = w;
  v.height_px = h;
  v.image.assign(static_cast<size_t>(w) * h * 3, 0.5);
  if (with_depth) v.depth.assign(static_cast<size_t>(w) * h, kFarDepth);
  return v;
}

}  // namespace

TEST_CASE("fps requesting all points returns a permutation") {
  Rng rng(1);
  std::vector<Vec3> pts;
  for (int i = 0; i < 40; ++i)
    pts.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  const auto idx = farthest_point_sample(pts, 40);
  std::set<int64_t> unique(idx.begin(), idx.end());
  CHECK(unique.size() == 40);
}

TEST_CASE("fps on four corners picks a diagonal pair") {
  const std::vector<Vec3> corners{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  const auto idx = farthest_point_sample(corners, 2);
  REQUIRE(idx.size() == 2);
  const Vec3 d = corners[static_cast<size_t>(idx[0])] - corners[static_cast<size_t>(idx[1])];
  CHECK(d.norm() == Approx(std::sqrt(2.0)));
}

TEST_CASE("fps beats random subsets on min pairwise distance") {
  Rng rng(2);
  std::vector<Vec3> pts;
  for (int i = 0; i < 64; ++i)
    pts.push_back({rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(0, 2)});
  const auto idx = farthest_point_sample(pts, 8);
  const auto min_pairwise = [&](const std::vector<int64_t>& subset) {
    double best = 1e300;
    for (size_t i = 0; i < subset.size(); ++i)
      for (size_t j = i + 1; j < subset.size(); ++j) {
        const Vec3 d = pts[static_cast<size_t>(subset[i])] - pts[static_cast<size_t>(subset[j])];
        best = std::min(best, d.norm());
      }
    return best;
  };
  const double fps_quality = min_pairwise(idx);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int64_t> all(64);
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    all.resize(8);
    CHECK(fps_quality >= min_pairwise(all));
  }
}

TEST_CASE("fps is stable under input permutation") {
  Rng rng(3);
  std::vector<Vec3> pts;
  for (int i = 0; i < 50; ++i)
    pts.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
  const auto base = farthest_point_sample(pts, 12);
  std::vector<Vec3> base_coords;
  for (int64_t i : base) base_coords.push_back(pts[static_cast<size_t>(i)]);

  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Vec3> shuffled = pts;
    rng.shuffle(shuffled);
    const auto idx = farthest_point_sample(shuffled, 12);
    REQUIRE(idx.size() == base_coords.size());
    for (size_t k = 0; k < idx.size(); ++k) {
      const Vec3& got = shuffled[static_cast<size_t>(idx[k])];
      CHECK(got.x == base_coords[k].x);
      CHECK(got.y == base_coords[k].y);
      CHECK(got.z == base_coords[k].z);
    }
  }
}

TEST_CASE("sample_seeds validates the point budget and picks scene points") {
  SynthConfig cfg = SynthConfig::default_config();
  cfg.points_per_scene = 128;
  cfg.image_height = 32;
  cfg.image_width = 32;
  const Scene scene = generate_scene(cfg, 5);
  ParameterRegistry reg(1);
  const Mlp encoder = Mlp::create(reg, "enc", {4, 8, 8}, Activation::kGelu);

  CHECK_THROWS_AS(sample_seeds(scene, 1000, encoder), ConfigError);

  const SeedPoints seeds = sample_seeds(scene, 16, encoder);
  CHECK(seeds.coords.size() == 16);
  CHECK(seeds.feats.shape() == Shape{16, 8});
  for (const Vec3& c : seeds.coords) {
    const bool found = std::any_of(scene.points.begin(), scene.points.end(), [&](const Vec3& p) {
      return p.x == c.x && p.y == c.y && p.z == c.z;
    });
    CHECK(found);
  }
  // Determinism.
  const SeedPoints again = sample_seeds(scene, 16, encoder);
  CHECK(again.feats.data() == seeds.feats.data());
}

TEST_CASE("patch grid arithmetic and zero-init embedding identity") {
  ParameterRegistry reg(2);
  const Mlp zero_mlp = Mlp::create(reg, "patch", {16 * 16 * 3, 4, 4}, Activation::kGelu,
                                   /*final_zero=*/true);
  const Tensor pe = reg.create("pe", {16, 4}, InitSpec::normal(0, 1));

  std::vector<CameraView> views{frontal_view(64, 64, 32)};
  const StitchedLayout layout = stitch_views(views);
  const PatchGrid grid = embed_patches(stitch_images(views), layout, 16, zero_mlp, pe, 4);
  CHECK(grid.n_pat() == 16);
  CHECK(grid.rows == 4);
  CHECK(grid.cols == 4);
  // Uniform image + zero-init MLP: embeddings equal the positional rows.
  for (int64_t i = 0; i < 16; ++i)
    for (int64_t j = 0; j < 4; ++j) CHECK(grid.embeddings.at(i, j) == pe.at(i, j));
}

TEST_CASE("embed_patches rejects undersized images") {
  ParameterRegistry reg(3);
  const Mlp mlp = Mlp::create(reg, "patch", {16 * 16 * 3, 4, 4}, Activation::kGelu);
  const Tensor pe = reg.create("pe", {16, 4}, InitSpec::zeros());
  std::vector<CameraView> views{frontal_view(8, 8, 4)};
  CHECK_THROWS_AS(embed_patches(stitch_images(views), stitch_views(views), 16, mlp, pe, 4),
                  ConfigError);
}

TEST_CASE("swapping two patches swaps exactly their content contributions") {
  Rng rng(9);
  ParameterRegistry reg(4);
  const int s = 8;
  const Mlp mlp = Mlp::create(reg, "patch", {s * s * 3, 6, 6}, Activation::kGelu);
  const Tensor pe = reg.create("pe", {8, 6}, InitSpec::normal(0, 1));

  CameraView view = frontal_view(4 * s, 2 * s, 16);
  for (double& x : view.image) x = rng.uniform(0, 1);
  std::vector<CameraView> views{view};
  const StitchedLayout layout = stitch_views(views);
  const PatchGrid before = embed_patches(stitch_images(views), layout, s, mlp, pe, 4);

  // Swap patch (0,1) and patch (1,2) in the raster.
  CameraView swapped = view;
  const auto pixel = [&](CameraView& v, int r, int c, int y, int x, int ch) -> double& {
    return v.image[(static_cast<size_t>(r * s + y) * v.width_px + c * s + x) * 3 + ch];
  };
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int ch = 0; ch < 3; ++ch)
        std::swap(pixel(swapped, 0, 1, y, x, ch), pixel(swapped, 1, 2, y, x, ch));
  std::vector<CameraView> views2{swapped};
  const PatchGrid after = embed_patches(stitch_images(views2), layout, s, mlp, pe, 4);

  const auto content = [&](const PatchGrid& g, int64_t i, int64_t j) {
    return g.embeddings.at(i, j) - pe.at(i, j);
  };
  const int64_t a = 0 * 4 + 1, b = 1 * 4 + 2;
  for (int64_t j = 0; j < 6; ++j) {
    CHECK(content(after, a, j) == Approx(content(before, b, j)).margin(1e-12));
    CHECK(content(after, b, j) == Approx(content(before, a, j)).margin(1e-12));
  }
  for (int64_t i = 0; i < 8; ++i) {
    if (i == a || i == b) continue;
    for (int64_t j = 0; j < 6; ++j)
      CHECK(content(after, i, j) == Approx(content(before, i, j)).margin(1e-15));
  }
}

TEST_CASE("patch index formula evaluates the spec cases") {
  CHECK(patch_index_for_pixel(33, 17, 64, 16) == 6);  // 1*4 + 2
  CHECK(patch_index_for_pixel(0.4, 0.2, 64, 16) == 0);
}

TEST_CASE("patch index formula matches exhaustive containment search") {
  for (int s : {8, 16}) {
    for (int py = 0; py < 64; ++py)
      for (int px = 0; px < 64; ++px) {
        const double u = px + 0.37, v = py + 0.81;
        CHECK(patch_index_for_pixel(u, v, 64, s) ==
              oracles::containment_patch_search(u, v, 64, 64, s));
      }
  }
  Rng rng(12);
  for (int trial = 0; trial < 10000; ++trial) {
    const double u = rng.uniform(0, 64), v = rng.uniform(0, 64);
    CHECK(patch_index_for_pixel(u, v, 64, 16) ==
          oracles::containment_patch_search(u, v, 64, 64, 16));
  }
}

TEST_CASE("point-patch map selects the nearest visible view") {
  // Two frontal cameras; the second sits two metres ahead, so points land in
  // both but are closer to the second.
  CameraView near = frontal_view(32, 32, 16, true);
  CameraView far = frontal_view(32, 32, 16, true);
  near.extrinsics.m[2][3] = -2.0;  // camera moved to world z = +2
  std::vector<CameraView> views{far, near};

  const std::vector<Vec3> pts{{0, 0, 3}, {0.4, -0.2, 4}};
  const PointPatchMap map = build_point_patch_map(pts, views, 16);
  CHECK(map.view_index == std::vector<int>{1, 1});
  for (size_t i = 0; i < pts.size(); ++i) {
    CHECK(map.patch_index[i] >= 0);
    // Stitched u lands in the second view's span.
    CHECK(map.pixel[i].u >= 32.0);
  }
}

TEST_CASE("point-patch map emits sentinels for invisible points") {
  CameraView v = frontal_view(32, 32, 16, true);
  std::vector<CameraView> views{v};
  const std::vector<Vec3> pts{
      {0, 0, -1},    // behind the camera
      {100, 0, 1},   // far outside the frustum
      {0, 0, 2},     // visible
  };
  PointPatchMap map = build_point_patch_map(pts, views, 16);
  CHECK(map.patch_index[0] == -1);
  CHECK(map.patch_index[1] == -1);
  CHECK(map.patch_index[2] >= 0);
  CHECK(map.view_index[0] == -1);

  // Occlusion: a depth map closer than the point hides it.
  CameraView occluded = frontal_view(32, 32, 16, true);
  occluded.depth.assign(occluded.depth.size(), 1.0);
  std::vector<CameraView> views2{occluded};
  map = build_point_patch_map({{0, 0, 2}}, views2, 16);
  CHECK(map.patch_index[0] == -1);
}

TEST_CASE("all seeds map to patches when everything is visible") {
  // Points inside the frustum of a depth-free camera: sentinel rate is zero.
  CameraView v = frontal_view(64, 64, 32);
  std::vector<CameraView> views{v};
  Rng rng(14);
  std::vector<Vec3> pts;
  for (int i = 0; i < 200; ++i) {
    const double z = rng.uniform(1.0, 6.0);
    pts.push_back({rng.uniform(-0.8, 0.8) * z, rng.uniform(-0.8, 0.8) * z, z});
  }
  const PointPatchMap map = build_point_patch_map(pts, views, 16);
  for (size_t i = 0; i < pts.size(); ++i) CHECK(map.patch_index[i] >= 0);
}
