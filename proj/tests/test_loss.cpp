// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "brt/loss.hpp"
#include "brt/nn.hpp"
#include "oracles.hpp"

using namespace brt;
using Catch::Approx;

namespace {

Box2D make_box(double x1, double y1, double x2, double y2) {
  Box2D b;
  b.min = {x1, y1};
  b.max = {x2, y2};
  return b;
}

/// Random boxes on a 1/64 lattice so the counting oracle is exact.
Box2D lattice_box(Rng& rng) {
  const double cell = 1.0 / 64;
  const auto snap = [&](double lo, double hi) {
    return cell * std::floor(rng.uniform(lo, hi) / cell);
  };
  double x1 = snap(0, 3), x2 = snap(0, 3);
  double y1 = snap(0, 3), y2 = snap(0, 3);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return make_box(x1, y1, x2 + 4 * cell, y2 + 4 * cell);
}

}  // namespace

TEST_CASE("hungarian hand cases") {
  const MatchResult a = hungarian({{1, 2}, {2, 1}});
  REQUIRE(a.pairs.size() == 2);
  CHECK(a.pairs[0] == std::pair<int64_t, int64_t>{0, 0});
  CHECK(a.pairs[1] == std::pair<int64_t, int64_t>{1, 1});
  CHECK(a.total_cost == 2.0);

  const MatchResult b = hungarian({{2, 1}, {1, 2}});
  CHECK(b.pairs[0] == std::pair<int64_t, int64_t>{1, 0});
  CHECK(b.pairs[1] == std::pair<int64_t, int64_t>{0, 1});
  CHECK(b.total_cost == 2.0);
}

TEST_CASE("hungarian equals brute-force permutation minimum") {
  Rng rng(41);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<std::vector<double>> cost(6, std::vector<double>(6));
    for (auto& row : cost)
      for (double& c : row) c = rng.uniform(0, 10);
    const MatchResult res = hungarian(cost);
    CHECK(res.pairs.size() == 6);
    CHECK(res.total_cost == Approx(oracles::brute_force_assignment(cost)).margin(1e-12));
  }
}

TEST_CASE("hungarian handles rectangular costs and rejects bad input") {
  Rng rng(42);
  std::vector<std::vector<double>> cost(7, std::vector<double>(3));
  for (auto& row : cost)
    for (double& c : row) c = rng.uniform(0, 5);
  const MatchResult res = hungarian(cost);
  CHECK(res.pairs.size() == 3);
  CHECK(res.unmatched_queries.size() == 4);
  std::vector<char> used_cols(3, 0);
  for (const auto& [q, g] : res.pairs) used_cols[static_cast<size_t>(g)]++;
  for (char c : used_cols) CHECK(c == 1);

  CHECK_THROWS_AS(hungarian({{1.0, std::numeric_limits<double>::infinity()}, {1.0, 1.0}}),
                  NumericError);
  CHECK_THROWS_AS(hungarian({{1.0, 2.0}}), ConfigError);  // more columns than rows
}

TEST_CASE("hungarian assignment survives row-constant shifts") {
  Rng rng(43);
  std::vector<std::vector<double>> cost(5, std::vector<double>(5));
  for (auto& row : cost)
    for (double& c : row) c = rng.uniform(0, 10);
  const MatchResult base = hungarian(cost);
  std::vector<std::vector<double>> shifted = cost;
  for (size_t r = 0; r < 5; ++r)
    for (double& c : shifted[r]) c += 3.7 * static_cast<double>(r + 1);
  const MatchResult moved = hungarian(shifted);
  CHECK(moved.pairs == base.pairs);
}

TEST_CASE("giou hand cases") {
  const Box2D unit = make_box(0, 0, 1, 1);
  CHECK(giou_2d(unit, unit) == 1.0);
  CHECK(giou_2d(unit, make_box(1, 0, 2, 1)) == 0.0);  // touching: IoU 0, hull == union
  CHECK_THROWS_AS(giou_2d(unit, make_box(0, 0, 0, 1)), NumericError);
}

TEST_CASE("giou properties") {
  Rng rng(44);
  for (int t = 0; t < 300; ++t) {
    const Box2D a = lattice_box(rng), b = lattice_box(rng);
    const double g = giou_2d(a, b);
    CHECK(g == Approx(giou_2d(b, a)).margin(1e-12));  // symmetric
    CHECK(g <= iou_2d(a, b) + 1e-12);
    CHECK(g > -1.0);
    CHECK(g <= 1.0);
  }
  // Monotone decreasing as fixed-size boxes separate.
  double prev = 1.0;
  for (double gap = 0; gap < 8; gap += 0.5) {
    const double g = giou_2d(make_box(0, 0, 1, 1), make_box(1 + gap, 0, 2 + gap, 1));
    CHECK(g <= prev + 1e-12);
    prev = g;
  }
  CHECK(prev < -0.7);  // approaches -1 with separation
}

TEST_CASE("giou matches the rasterisation oracle") {
  Rng rng(45);
  for (int t = 0; t < 1000; ++t) {
    const Box2D a = lattice_box(rng), b = lattice_box(rng);
    const double expect = oracles::rasterized_giou(a, b, 1.0 / 256);
    CHECK(giou_2d(a, b) == Approx(expect).margin(1e-3));
  }
}

TEST_CASE("differentiable giou equals the scalar version") {
  Rng rng(46);
  for (int t = 0; t < 100; ++t) {
    const Box2D a = lattice_box(rng), b = lattice_box(rng);
    const Tensor pa = Tensor::from_data(
        {1, 4}, {(a.min.u + a.max.u) / 2, (a.min.v + a.max.v) / 2, a.width(), a.height()});
    const Tensor pb = Tensor::from_data(
        {1, 4}, {(b.min.u + b.max.u) / 2, (b.min.v + b.max.v) / 2, b.width(), b.height()});
    const Tensor g = detail::giou_tensor(pa, pb);
    CHECK(g.item() == Approx(giou_2d(a, b)).margin(1e-12));
  }
}

TEST_CASE("match_cost hand cases") {
  Box3D gt;
  gt.center = {1, 2, 3};
  gt.size = {1, 1, 1};
  gt.class_id = 0;
  Pred3D same;
  same.center = gt.center;
  same.size = gt.size;
  same.logits = {50, 0, 0};  // probability-1 class in the one-hot limit
  CHECK(match_cost(same, gt) == Approx(0.0).margin(1e-9));

  Pred3D shifted = same;
  shifted.center.x += 1.0;
  CHECK(match_cost(shifted, gt) == Approx(1.0).margin(1e-9));

  Rng rng(47);
  for (int t = 0; t < 100; ++t) {
    Pred3D p;
    p.center = {rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1)};
    p.size = {rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2)};
    p.logits = {rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1)};
    Box3D g;
    g.center = {rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1)};
    g.size = {rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2)};
    g.class_id = static_cast<int>(rng.uniform_int(2));
    const double l1c = std::abs(p.center.x - g.center.x) + std::abs(p.center.y - g.center.y) +
                       std::abs(p.center.z - g.center.z);
    const double l1s = std::abs(p.size.x - g.size.x) + std::abs(p.size.y - g.size.y) +
                       std::abs(p.size.z - g.size.z);
    double mx = std::max({p.logits[0], p.logits[1], p.logits[2]});
    const double denom = std::exp(p.logits[0] - mx) + std::exp(p.logits[1] - mx) +
                         std::exp(p.logits[2] - mx);
    const double logp = p.logits[static_cast<size_t>(g.class_id)] - mx - std::log(denom);
    CHECK(match_cost(p, g) == l1c + 0.1 * l1s - logp);
  }
}

namespace {

struct LossFixture {
  int64_t k = 4;
  int64_t c = 3;
  std::vector<Box3D> gts;
  std::vector<GtBox2D> gts2d;
  std::vector<Vec3> templates;

  LossFixture() {
    Box3D b0, b1;
    b0.center = {1, 0, 0.5};
    b0.size = {1, 1, 1};
    b0.class_id = 0;
    b1.center = {-1.5, 1, 0.4};
    b1.size = {0.8, 0.6, 0.8};
    b1.class_id = 2;
    gts = {b0, b1};
    gts2d = {{true, 0.3, 0.4, 0.2, 0.25}, {true, 0.7, 0.5, 0.15, 0.2}};
    templates = {{1, 1, 1}, {2, 2, 2}, {0.8, 0.6, 0.8}};
  }

  /// pred rows: two close to the gts (classes right), two no-object.
  Tensor perfect3d() const {
    std::vector<double> data;
    const auto push_row = [&](Vec3 cen, Vec3 sz, int cls) {
      data.insert(data.end(), {cen.x, cen.y, cen.z, sz.x, sz.y, sz.z});
      for (int64_t i = 0; i < c + 1; ++i) data.push_back(i == cls ? 60.0 : 0.0);
    };
    push_row(gts[0].center, gts[0].size, 0);
    push_row(gts[1].center, gts[1].size, 2);
    push_row({5, 5, 5}, {1, 1, 1}, static_cast<int>(c));
    push_row({-5, 5, 5}, {1, 1, 1}, static_cast<int>(c));
    return Tensor::from_data({k, 6 + c + 1}, data);
  }

  Tensor perfect2d() const {
    std::vector<double> data;
    const auto push_row = [&](const GtBox2D& t, int cls) {
      data.insert(data.end(), {t.cx, t.cy, t.w, t.h});
      for (int64_t i = 0; i < c + 1; ++i) data.push_back(i == cls ? 60.0 : 0.0);
    };
    push_row(gts2d[0], 0);
    push_row(gts2d[1], 2);
    push_row({true, 0.5, 0.5, 0.1, 0.1}, static_cast<int>(c));
    push_row({true, 0.5, 0.5, 0.1, 0.1}, static_cast<int>(c));
    return Tensor::from_data({k, 4 + c + 1}, data);
  }
};

}  // namespace

TEST_CASE("unit sub-losses combine with the configured weights") {
  LossTerms unit;
  unit.obj3d_center = unit.obj3d_size = unit.cls3d_obj = unit.cls3d_size = 1.0;
  unit.obj2d_center = unit.obj2d_giou = unit.cls2d = 1.0;
  const LossWeights w;
  // (1.0 + 0.1) + 0.2*(1 + 1) + 0.5*(1 + 2) + 0.1*1 = 3.1
  CHECK(combine_loss_terms(unit, w) == Approx(3.1).margin(1e-12));
}

TEST_CASE("perfect predictions drive every term to the one-hot limit") {
  const LossFixture fx;
  const LossResult res = total_loss(fx.perfect3d(), fx.perfect2d(), fx.gts, fx.gts2d, fx.c, {},
                                    fx.templates);
  CHECK(res.terms.obj3d_center == Approx(0.0).margin(1e-12));
  CHECK(res.terms.obj3d_size == Approx(0.0).margin(1e-12));
  CHECK(res.terms.obj2d_center == Approx(0.0).margin(1e-12));
  CHECK(res.terms.obj2d_giou == Approx(0.0).margin(1e-9));
  CHECK(res.terms.cls3d_obj == Approx(0.0).margin(1e-9));
  CHECK(res.terms.cls3d_size == Approx(0.0).margin(1e-9));
  CHECK(res.terms.cls2d == Approx(0.0).margin(1e-9));
  CHECK(res.terms.total == Approx(0.0).margin(1e-8));
  REQUIRE(res.match.pairs.size() == 2);
  CHECK(res.match.pairs[0].second == 0);
  CHECK(res.match.pairs[1].second == 1);
}

TEST_CASE("empty ground truth reduces to no-object classification") {
  const LossFixture fx;
  const LossResult res = total_loss(fx.perfect3d(), fx.perfect2d(), {}, {}, fx.c, {},
                                    fx.templates);
  CHECK(res.terms.obj3d_center == 0.0);
  CHECK(res.terms.obj3d_size == 0.0);
  CHECK(res.terms.obj2d_center == 0.0);
  CHECK(res.terms.obj2d_giou == 0.0);
  CHECK(res.terms.cls3d_size == 0.0);
  CHECK(res.terms.cls3d_obj > 0.0);  // the two matched-class rows now pay CE
  CHECK(res.terms.total > 0.0);
  CHECK(res.match.pairs.empty());
}

TEST_CASE("total_loss rejects more boxes than queries") {
  const LossFixture fx;
  std::vector<Box3D> many(5, fx.gts[0]);
  std::vector<GtBox2D> many2d(5, fx.gts2d[0]);
  CHECK_THROWS_AS(
      total_loss(fx.perfect3d(), fx.perfect2d(), many, many2d, fx.c, {}, fx.templates),
      ConfigError);
}

TEST_CASE("total_loss is non-negative on random inputs") {
  Rng rng(48);
  const LossFixture fx;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> d3, d2;
    for (int64_t i = 0; i < fx.k * (6 + fx.c + 1); ++i) d3.push_back(rng.normal(0, 2));
    for (int64_t i = 0; i < fx.k * (4 + fx.c + 1); ++i) d2.push_back(rng.normal(0, 2));
    // Keep 2D widths/heights positive the way the model head does.
    Tensor p2 = Tensor::from_data({fx.k, 4 + fx.c + 1}, d2);
    p2 = concat_cols({sigmoid(slice_cols(p2, 0, 4)), slice_cols(p2, 4, 4 + fx.c + 1)});
    const LossResult res = total_loss(Tensor::from_data({fx.k, 6 + fx.c + 1}, d3), p2, fx.gts,
                                      fx.gts2d, fx.c, {}, fx.templates);
    CHECK(res.terms.total >= 0.0);
  }
}

TEST_CASE("matching and loss are invariant to gt ordering") {
  Rng rng(49);
  const LossFixture fx;
  std::vector<double> d3, d2;
  for (int64_t i = 0; i < fx.k * (6 + fx.c + 1); ++i) d3.push_back(rng.normal(0, 1));
  for (int64_t i = 0; i < fx.k * (4 + fx.c + 1); ++i) d2.push_back(rng.normal(0, 1));
  Tensor p3 = Tensor::from_data({fx.k, 6 + fx.c + 1}, d3);
  Tensor p2 = Tensor::from_data({fx.k, 4 + fx.c + 1}, d2);
  p2 = concat_cols({sigmoid(slice_cols(p2, 0, 4)), slice_cols(p2, 4, 4 + fx.c + 1)});

  const LossResult fwd = total_loss(p3, p2, fx.gts, fx.gts2d, fx.c, {}, fx.templates);
  std::vector<Box3D> rev_gts{fx.gts[1], fx.gts[0]};
  std::vector<GtBox2D> rev_2d{fx.gts2d[1], fx.gts2d[0]};
  const LossResult rev = total_loss(p3, p2, rev_gts, rev_2d, fx.c, {}, fx.templates);
  CHECK(fwd.terms.total == Approx(rev.terms.total).margin(1e-12));
  CHECK(fwd.terms.cls3d_obj == Approx(rev.terms.cls3d_obj).margin(1e-12));
  CHECK(fwd.terms.obj2d_giou == Approx(rev.terms.obj2d_giou).margin(1e-12));
}

TEST_CASE("loss gradients pass the central-difference check") {
  const LossFixture fx;
  ParameterRegistry reg(50);
  reg.create("p3", {fx.k, 6 + fx.c + 1}, InitSpec::normal(0, 1));
  reg.create("p2raw", {fx.k, 4 + fx.c + 1}, InitSpec::normal(0, 1));
  const auto f = [&]() {
    const Tensor p3 = reg.get("p3").tensor;
    Tensor p2 = reg.get("p2raw").tensor;
    p2 = concat_cols({sigmoid(slice_cols(p2, 0, 4)), slice_cols(p2, 4, 4 + fx.c + 1)});
    // Freeze the matching so the probe stays smooth across +-h.
    const MatchResult match = hungarian({{0.0, 9.0}, {9.0, 0.0}, {9.0, 9.0}, {9.0, 9.0}});
    return total_loss(p3, p2, fx.gts, fx.gts2d, fx.c, {}, fx.templates, &match).total;
  };
  const auto report = grad_check(f, all_parameters(reg), 1e-5);
  INFO(report.worst_param << "[" << report.worst_index << "]");
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("size templates are per-class means with fallback") {
  Scene s;
  Box3D a;
  a.center = {0, 0, 0};
  a.size = {1, 2, 3};
  a.class_id = 0;
  Box3D b = a;
  b.size = {3, 2, 1};
  Box3D c = a;
  c.size = {2, 2, 2};
  c.class_id = 2;
  s.gt_boxes = {a, b, c};
  const auto templates = size_templates({s}, 4);
  CHECK(templates[0].x == Approx(2.0));
  CHECK(templates[0].z == Approx(2.0));
  CHECK(templates[2].x == Approx(2.0));
  // Class 1 and 3 fall back to the global mean size.
  CHECK(templates[1].x == Approx(2.0));
  CHECK(templates[3].y == Approx(2.0));

  CHECK(nearest_template(templates, {2.1, 2.0, 1.9}) >= 0);
}

TEST_CASE("2D targets come from the minimum-depth fully-projectable view") {
  SynthConfig cfg = SynthConfig::default_config();
  cfg.points_per_scene = 128;
  cfg.image_height = 32;
  cfg.image_width = 32;
  cfg.boxes_min = 1;
  cfg.boxes_max = 2;
  const Scene scene = generate_scene(cfg, 61);
  const StitchedLayout layout = stitch_views(scene.views);
  const auto targets = derive_gt_boxes_2d(scene, layout);
  REQUIRE(targets.size() == scene.gt_boxes.size());
  for (size_t g = 0; g < targets.size(); ++g) {
    if (!targets[g].valid) continue;
    CHECK(targets[g].w > 0);
    CHECK(targets[g].h > 0);
    CHECK(targets[g].cx >= 0);
    CHECK(targets[g].cx <= 1);
    // Re-derive: the chosen view must be the min-depth one among those with
    // all corners in front.
    int best = -1;
    double best_depth = 0;
    for (size_t v = 0; v < scene.views.size(); ++v) {
      bool ok = true;
      for (const Vec3& corner : scene.gt_boxes[g].corners())
        ok = ok && try_project_point(scene.views[v], corner).has_value();
      if (!ok) continue;
      const double depth = scene.views[v].extrinsics.apply(scene.gt_boxes[g].center).z;
      if (best < 0 || depth < best_depth) {
        best = static_cast<int>(v);
        best_depth = depth;
      }
    }
    REQUIRE(best >= 0);
    const Box2D b2 = project_box3d(scene.views[static_cast<size_t>(best)], scene.gt_boxes[g]);
    const double expect_cx =
        0.5 * (layout.to_global_u(best, b2.min.u) + layout.to_global_u(best, b2.max.u)) /
        layout.total_width();
    CHECK(targets[g].cx == Approx(expect_cx).margin(1e-12));
  }
}
