// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: synthesize datasets, train, evaluate, and export
// per-scene geometry / attention reports. Every command writes a manifest
// into --out before any artifact and is byte-deterministic given its inputs.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "brt/manifest.hpp"
#include "brt/model.hpp"
#include "brt/scene_io.hpp"
#include "brt/train.hpp"
#include "brt/version.hpp"

namespace {

using nlohmann::json;

json load_json_file(const std::string& path, const char* what) {
  std::ifstream is(path);
  if (!is) throw brt::IoError(std::string("cannot open ") + what + " '" + path + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw brt::ParseError(path + ": " + e.what());
  }
  return j;
}

/// Applies "a.b.c=value" overrides; values parse as JSON when possible.
void apply_overrides(json& j, const std::vector<std::string>& sets, const std::string& scope) {
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw brt::ConfigError("--set expects key.path=value, got '" + s + "'");
    std::string path = s.substr(0, eq);
    const std::string value = s.substr(eq + 1);
    if (!scope.empty()) {
      if (path.rfind(scope + ".", 0) != 0) continue;  // override meant for another config
      path = path.substr(scope.size() + 1);
    }
    json* cur = &j;
    std::istringstream keys(path);
    std::string key, next;
    std::getline(keys, key, '.');
    while (std::getline(keys, next, '.')) {
      cur = &((*cur)[key]);
      key = next;
    }
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::exception&) {
      parsed = value;  // plain string
    }
    (*cur)[key] = parsed;
  }
}

std::string checkpoint_prefix(std::string path) {
  for (const char* ext : {".json", ".bin"})
    if (path.size() > 5 && path.ends_with(ext)) return path.substr(0, path.size() - 5);
  return path;
}

const brt::Scene& find_scene(const brt::Dataset& ds, const std::string& scene_id) {
  for (const brt::Scene& s : ds.scenes)
    if (s.scene_id == scene_id) return s;
  throw brt::ConfigError("scene '" + scene_id + "' not found in dataset");
}

struct LoadedModel {
  brt::ModelConfig config;
  std::unique_ptr<brt::BrtModel> model;
};

LoadedModel load_model(const std::string& checkpoint, const std::string& model_config_path,
                       const std::vector<std::string>& sets) {
  const std::string prefix = checkpoint_prefix(checkpoint);
  const json manifest = brt::read_checkpoint_manifest(prefix);
  json cfg_json;
  if (!model_config_path.empty())
    cfg_json = load_json_file(model_config_path, "model config");
  else if (manifest.contains("model_config"))
    cfg_json = manifest["model_config"];
  else
    throw brt::ConfigError("checkpoint has no embedded model_config; pass --model-config");
  apply_overrides(cfg_json, sets, "model");
  LoadedModel lm;
  lm.config = brt::model_config_from_json(cfg_json);
  lm.model = std::make_unique<brt::BrtModel>(lm.config, manifest.value("train_seed", uint64_t{0}));
  brt::load_checkpoint(lm.model->registry(), prefix);
  return lm;
}

void write_json_artifact(const std::string& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw brt::IoError("cannot open '" + path + "' for writing");
  os << j.dump(2) << '\n';
  if (!os) throw brt::IoError("failed writing '" + path + "'");
}

int cmd_synth(const std::string& config_path, uint64_t seed, int count, const std::string& out,
              const std::vector<std::string>& sets) {
  brt::RunManifest manifest{"synth", {{"config", config_path}}, {{"seed", seed}}, out};
  manifest.write();
  json cfg_json = load_json_file(config_path, "synth config");
  apply_overrides(cfg_json, sets, "");
  brt::Dataset ds;
  ds.config = brt::synth_config_from_json(cfg_json);
  for (int i = 0; i < count; ++i)
    ds.scenes.push_back(brt::generate_scene(ds.config, seed + static_cast<uint64_t>(i)));
  brt::write_dataset(out + "/dataset.json", ds);
  std::cout << "wrote " << count << " scenes to " << out << "/dataset.json\n";
  return 0;
}

int cmd_train(const std::string& dataset_path, const std::string& model_config_path,
              const std::string& train_config_path, const std::string& out,
              const std::vector<std::string>& sets) {
  brt::RunManifest manifest{"train",
                            {{"dataset", dataset_path},
                             {"model_config", model_config_path},
                             {"train_config", train_config_path}},
                            {},
                            out};
  json mc_json = load_json_file(model_config_path, "model config");
  json tc_json = load_json_file(train_config_path, "train config");
  apply_overrides(mc_json, sets, "model");
  apply_overrides(tc_json, sets, "train");
  const brt::ModelConfig mc = brt::model_config_from_json(mc_json);
  const brt::TrainConfig tc = brt::train_config_from_json(tc_json);
  manifest.seeds["train_seed"] = tc.seed;
  manifest.write();
  const brt::Dataset ds = brt::read_dataset(dataset_path);
  brt::BrtModel model(mc, tc.seed);
  const brt::TrainSummary summary = brt::train(ds, model, tc, out);
  std::cout << "trained " << summary.steps << " steps; epoch-mean loss "
            << summary.first_epoch_mean_loss << " -> " << summary.last_epoch_mean_loss << "\n";
  return 0;
}

int cmd_eval(const std::string& dataset_path, const std::string& checkpoint,
             const std::string& model_config_path, double score_floor, const std::string& out,
             const std::vector<std::string>& sets) {
  brt::RunManifest manifest{
      "eval", {{"dataset", dataset_path}, {"checkpoint", checkpoint_prefix(checkpoint) + ".json"}},
      {},
      out};
  manifest.write();
  LoadedModel lm = load_model(checkpoint, model_config_path, sets);
  const brt::Dataset ds = brt::read_dataset(dataset_path);
  const brt::EvalResult result = brt::evaluate(ds, *lm.model, score_floor);
  const json metrics = result.to_json(brt::class_names(ds.config));
  write_json_artifact(out + "/metrics.json", metrics);
  std::cout << metrics.dump(2) << "\n";
  return 0;
}

int cmd_project(const std::string& dataset_path, const std::string& scene_id, int patch_size,
                const std::string& out) {
  brt::RunManifest manifest{"project", {{"dataset", dataset_path}}, {}, out};
  manifest.write();
  const brt::Dataset ds = brt::read_dataset(dataset_path);
  const brt::Scene& scene = find_scene(ds, scene_id);
  const brt::StitchedLayout layout = brt::stitch_views(scene.views);
  const brt::PointPatchMap map =
      brt::build_point_patch_map(scene.points, scene.views, patch_size);
  json points = json::array();
  for (size_t i = 0; i < scene.points.size(); ++i)
    points.push_back({{"index", i},
                      {"view", map.view_index[i]},
                      {"u", map.pixel[i].u},
                      {"v", map.pixel[i].v},
                      {"patch_index", map.patch_index[i]},
                      {"visible", map.view_index[i] >= 0}});
  json boxes = json::array();
  for (const brt::Box3D& box : scene.gt_boxes) {
    int best_view = -1;
    double best_depth = 0;
    for (size_t v = 0; v < scene.views.size(); ++v) {
      bool in_front = true;
      for (const brt::Vec3& c : box.corners())
        in_front = in_front && brt::try_project_point(scene.views[v], c).has_value();
      if (!in_front) continue;
      const double depth = scene.views[v].extrinsics.apply(box.center).z;
      if (best_view < 0 || depth < best_depth) {
        best_view = static_cast<int>(v);
        best_depth = depth;
      }
    }
    json entry = {{"class_id", box.class_id}, {"view", best_view}, {"valid", best_view >= 0}};
    if (best_view >= 0) {
      const brt::Box2D b2 =
          brt::project_box3d(scene.views[static_cast<size_t>(best_view)], box, /*clamp=*/true);
      entry["min_u"] = layout.to_global_u(best_view, b2.min.u);
      entry["max_u"] = layout.to_global_u(best_view, b2.max.u);
      entry["min_v"] = b2.min.v;
      entry["max_v"] = b2.max.v;
    }
    boxes.push_back(std::move(entry));
  }
  const json report = {{"scene_id", scene_id},
                       {"patch_size", patch_size},
                       {"stitched",
                        {{"num_views", layout.num_views},
                         {"view_width", layout.view_width},
                         {"height", layout.height}}},
                       {"points", std::move(points)},
                       {"boxes_2d", std::move(boxes)}};
  write_json_artifact(out + "/projection_report.json", report);
  std::cout << "wrote " << out << "/projection_report.json\n";
  return 0;
}

int cmd_export_attn(const std::string& dataset_path, const std::string& checkpoint,
                    const std::string& scene_id, const std::string& stages_csv,
                    const std::string& out, const std::vector<std::string>& sets) {
  brt::RunManifest manifest{
      "export-attn",
      {{"dataset", dataset_path}, {"checkpoint", checkpoint_prefix(checkpoint) + ".json"}},
      {},
      out};
  manifest.write();
  LoadedModel lm = load_model(checkpoint, "", sets);
  const brt::Dataset ds = brt::read_dataset(dataset_path);
  const brt::Scene& scene = find_scene(ds, scene_id);
  std::vector<int> stages;
  std::istringstream ss(stages_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) stages.push_back(std::stoi(tok));
  if (stages.empty())
    for (int s = 1; s <= static_cast<int>(lm.config.stages); ++s) stages.push_back(s);
  brt::NoGradGuard guard;
  const brt::ForwardResult fwd = lm.model->forward(scene);
  const json report = {{"scene_id", scene_id},
                       {"stages", stages},
                       {"entries", brt::attention_export_json(fwd, stages)}};
  write_json_artifact(out + "/attention.json", report);
  std::cout << "wrote " << out << "/attention.json\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bridged-transformer 3D/2D detection on synthetic scenes"};
  app.set_version_flag("--version", brt::kVersion);
  app.require_subcommand(1);

  std::string config_path, dataset_path, model_config_path, train_config_path;
  std::string checkpoint, scene_id, out, stages_csv;
  std::vector<std::string> sets;
  uint64_t seed = 1;
  int count = 10;
  int patch_size = 16;
  double score_floor = 0.05;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--config", config_path, "synth config JSON")->required();
  synth->add_option("--seed", seed, "base scene seed");
  synth->add_option("--count", count, "number of scenes")->required();
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--set", sets, "dot-path config overrides (key.path=value)");

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--dataset", dataset_path, "dataset JSON")->required();
  train->add_option("--model-config", model_config_path, "model config JSON")->required();
  train->add_option("--train-config", train_config_path, "train config JSON")->required();
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--set", sets, "overrides, scoped as model.* / train.*");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--dataset", dataset_path, "dataset JSON")->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint prefix or .json path")->required();
  eval_cmd->add_option("--model-config", model_config_path, "override the stored model config");
  eval_cmd->add_option("--score-floor", score_floor, "minimum detection score");
  eval_cmd->add_option("--out", out, "output directory")->required();
  eval_cmd->add_option("--set", sets, "overrides, scoped as model.*");

  CLI::App* project = app.add_subcommand("project", "per-scene geometry report");
  project->add_option("--dataset", dataset_path, "dataset JSON")->required();
  project->add_option("--scene-id", scene_id, "scene to report")->required();
  project->add_option("--patch-size", patch_size, "patch size for indices");
  project->add_option("--out", out, "output directory")->required();

  CLI::App* attn = app.add_subcommand("export-attn", "attention-weight export");
  attn->add_option("--dataset", dataset_path, "dataset JSON")->required();
  attn->add_option("--checkpoint", checkpoint, "checkpoint prefix or .json path")->required();
  attn->add_option("--scene-id", scene_id, "scene to run")->required();
  attn->add_option("--stages", stages_csv, "comma-separated 1-based stages (default: all)");
  attn->add_option("--out", out, "output directory")->required();
  attn->add_option("--set", sets, "overrides");

  try {
    app.parse(argc, argv);
    if (synth->parsed()) return cmd_synth(config_path, seed, count, out, sets);
    if (train->parsed())
      return cmd_train(dataset_path, model_config_path, train_config_path, out, sets);
    if (eval_cmd->parsed())
      return cmd_eval(dataset_path, checkpoint, model_config_path, score_floor, out, sets);
    if (project->parsed()) return cmd_project(dataset_path, scene_id, patch_size, out);
    if (attn->parsed())
      return cmd_export_attn(dataset_path, checkpoint, scene_id, stages_csv, out, sets);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const brt::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const brt::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const brt::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
