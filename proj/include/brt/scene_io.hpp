// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "brt/error.hpp"
#include "brt/scene.hpp"

namespace brt {

using nlohmann::json;

namespace detail {

inline const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw ParseError(path + ": expected object");
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(path + "." + key + ": missing field");
  return *it;
}

inline double num(const json& j, const std::string& path) {
  if (!j.is_number()) throw ParseError(path + ": expected number");
  return j.get<double>();
}

inline std::vector<double> num_array(const json& j, size_t n, const std::string& path) {
  if (!j.is_array() || (n != 0 && j.size() != n))
    throw ParseError(path + ": expected array of " + std::to_string(n) + " numbers");
  std::vector<double> out;
  out.reserve(j.size());
  for (size_t i = 0; i < j.size(); ++i) out.push_back(num(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline json vec3_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }
inline Vec3 vec3_from(const json& j, const std::string& path) {
  const auto a = num_array(j, 3, path);
  return {a[0], a[1], a[2]};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SynthConfig <-> JSON
// ---------------------------------------------------------------------------

inline json synth_config_to_json(const SynthConfig& cfg) {
  json classes = json::array();
  for (const ClassSpec& c : cfg.classes)
    classes.push_back({{"name", c.name},
                       {"size", detail::vec3_json(c.canonical_size)},
                       {"color", json::array({c.color[0], c.color[1], c.color[2]})}});
  return {{"classes", classes},
          {"boxes_per_scene", json::array({cfg.boxes_min, cfg.boxes_max})},
          {"points_per_scene", cfg.points_per_scene},
          {"views_per_scene", cfg.views_per_scene},
          {"image_size", json::array({cfg.image_height, cfg.image_width})},
          {"noise_std", cfg.noise_std},
          {"room_extent", cfg.room_extent}};
}

inline SynthConfig synth_config_from_json(const json& j, const std::string& path = "config") {
  SynthConfig cfg;
  cfg.classes.clear();
  const json& classes = detail::field(j, "classes", path);
  if (!classes.is_array()) throw ParseError(path + ".classes: expected array");
  for (size_t i = 0; i < classes.size(); ++i) {
    const std::string cpath = path + ".classes[" + std::to_string(i) + "]";
    ClassSpec spec;
    spec.name = detail::field(classes[i], "name", cpath).get<std::string>();
    spec.canonical_size = detail::vec3_from(detail::field(classes[i], "size", cpath), cpath + ".size");
    const auto col = detail::num_array(detail::field(classes[i], "color", cpath), 3, cpath + ".color");
    spec.color = {col[0], col[1], col[2]};
    cfg.classes.push_back(spec);
  }
  const auto boxes = detail::num_array(detail::field(j, "boxes_per_scene", path), 2,
                                       path + ".boxes_per_scene");
  cfg.boxes_min = static_cast<int>(boxes[0]);
  cfg.boxes_max = static_cast<int>(boxes[1]);
  cfg.points_per_scene =
      static_cast<int>(detail::num(detail::field(j, "points_per_scene", path), path + ".points_per_scene"));
  cfg.views_per_scene =
      static_cast<int>(detail::num(detail::field(j, "views_per_scene", path), path + ".views_per_scene"));
  const auto img = detail::num_array(detail::field(j, "image_size", path), 2, path + ".image_size");
  cfg.image_height = static_cast<int>(img[0]);
  cfg.image_width = static_cast<int>(img[1]);
  cfg.noise_std = detail::num(detail::field(j, "noise_std", path), path + ".noise_std");
  cfg.room_extent = detail::num(detail::field(j, "room_extent", path), path + ".room_extent");
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Scene <-> JSON
// ---------------------------------------------------------------------------

inline json scene_to_json(const Scene& scene) {
  json points = json::array();
  for (const Vec3& p : scene.points) points.push_back(detail::vec3_json(p));
  json colors = json::array();
  for (const auto& c : scene.point_colors) colors.push_back(json::array({c[0], c[1], c[2]}));
  json views = json::array();
  for (const CameraView& v : scene.views) {
    json k = json::array(), rt = json::array();
    for (int i = 0; i < 3; ++i) {
      k.push_back(json::array({v.intrinsics.m[i][0], v.intrinsics.m[i][1], v.intrinsics.m[i][2]}));
      rt.push_back(json::array(
          {v.extrinsics.m[i][0], v.extrinsics.m[i][1], v.extrinsics.m[i][2], v.extrinsics.m[i][3]}));
    }
    views.push_back({{"K_intr", k},
                     {"R_t", rt},
                     {"intrinsic_scale", v.intrinsic_scale},
                     {"width_px", v.width_px},
                     {"height_px", v.height_px},
                     {"image", v.image},
                     {"depth", v.depth}});
  }
  json boxes = json::array();
  for (const Box3D& b : scene.gt_boxes)
    boxes.push_back({{"center", detail::vec3_json(b.center)},
                     {"size", detail::vec3_json(b.size)},
                     {"class_id", b.class_id}});
  return {{"scene_id", scene.scene_id}, {"seed", scene.seed},     {"points", points},
          {"point_colors", colors},     {"views", views},         {"gt_boxes", boxes}};
}

inline Scene scene_from_json(const json& j, const std::string& path) {
  Scene scene;
  scene.scene_id = detail::field(j, "scene_id", path).get<std::string>();
  scene.seed = detail::field(j, "seed", path).get<uint64_t>();
  const json& points = detail::field(j, "points", path);
  for (size_t i = 0; i < points.size(); ++i)
    scene.points.push_back(detail::vec3_from(points[i], path + ".points[" + std::to_string(i) + "]"));
  const json& colors = detail::field(j, "point_colors", path);
  if (colors.size() != points.size())
    throw ParseError(path + ".point_colors: length differs from points");
  for (size_t i = 0; i < colors.size(); ++i) {
    const auto c = detail::num_array(colors[i], 3, path + ".point_colors[" + std::to_string(i) + "]");
    scene.point_colors.push_back({c[0], c[1], c[2]});
  }
  const json& views = detail::field(j, "views", path);
  for (size_t i = 0; i < views.size(); ++i) {
    const std::string vpath = path + ".views[" + std::to_string(i) + "]";
    CameraView view;
    const json& k = detail::field(views[i], "K_intr", vpath);
    const json& rt = detail::field(views[i], "R_t", vpath);
    if (!k.is_array() || k.size() != 3) throw ParseError(vpath + ".K_intr: expected 3x3 array");
    if (!rt.is_array() || rt.size() != 3) throw ParseError(vpath + ".R_t: expected 3x4 array");
    for (int r = 0; r < 3; ++r) {
      const auto krow = detail::num_array(k[static_cast<size_t>(r)], 3, vpath + ".K_intr row");
      const auto rtrow = detail::num_array(rt[static_cast<size_t>(r)], 4, vpath + ".R_t row");
      for (int c = 0; c < 3; ++c) view.intrinsics.m[r][c] = krow[static_cast<size_t>(c)];
      for (int c = 0; c < 4; ++c) view.extrinsics.m[r][c] = rtrow[static_cast<size_t>(c)];
    }
    view.intrinsic_scale = detail::num(detail::field(views[i], "intrinsic_scale", vpath),
                                       vpath + ".intrinsic_scale");
    view.width_px = static_cast<int>(detail::num(detail::field(views[i], "width_px", vpath),
                                                 vpath + ".width_px"));
    view.height_px = static_cast<int>(detail::num(detail::field(views[i], "height_px", vpath),
                                                  vpath + ".height_px"));
    view.image = detail::num_array(detail::field(views[i], "image", vpath), 0, vpath + ".image");
    view.depth = detail::num_array(detail::field(views[i], "depth", vpath), 0, vpath + ".depth");
    try {
      view.validate();
    } catch (const ConfigError& e) {
      throw ParseError(vpath + ": " + e.what());
    }
    scene.views.push_back(std::move(view));
  }
  const json& boxes = detail::field(j, "gt_boxes", path);
  for (size_t i = 0; i < boxes.size(); ++i) {
    const std::string bpath = path + ".gt_boxes[" + std::to_string(i) + "]";
    Box3D box;
    box.center = detail::vec3_from(detail::field(boxes[i], "center", bpath), bpath + ".center");
    box.size = detail::vec3_from(detail::field(boxes[i], "size", bpath), bpath + ".size");
    box.class_id = static_cast<int>(detail::num(detail::field(boxes[i], "class_id", bpath),
                                                bpath + ".class_id"));
    box.validate();
    scene.gt_boxes.push_back(box);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

struct Dataset {
  SynthConfig config;
  std::vector<Scene> scenes;
};

inline void write_dataset(const std::string& file_path, const Dataset& ds) {
  json j = {{"format_version", 1}, {"config", synth_config_to_json(ds.config)}};
  json scenes = json::array();
  for (const Scene& s : ds.scenes) scenes.push_back(scene_to_json(s));
  j["scenes"] = std::move(scenes);
  std::ofstream os(file_path);
  if (!os) throw IoError("cannot open '" + file_path + "' for writing");
  os << j.dump() << '\n';
  if (!os) throw IoError("failed writing '" + file_path + "'");
}

inline Dataset read_dataset(const std::string& file_path) {
  std::ifstream is(file_path);
  if (!is) throw IoError("cannot open '" + file_path + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError(file_path + ": " + e.what());
  }
  if (detail::field(j, "format_version", "dataset").get<int>() != 1)
    throw ParseError("dataset.format_version: unsupported version");
  Dataset ds;
  ds.config = synth_config_from_json(detail::field(j, "config", "dataset"), "dataset.config");
  const json& scenes = detail::field(j, "scenes", "dataset");
  if (!scenes.is_array()) throw ParseError("dataset.scenes: expected array");
  for (size_t i = 0; i < scenes.size(); ++i)
    ds.scenes.push_back(scene_from_json(scenes[i], "dataset.scenes[" + std::to_string(i) + "]"));
  return ds;
}

}  // namespace brt
