// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line binary; the path arrives in BRT_CLI.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "brt/scene_io.hpp"
#include "brt/tokenizer.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* env = std::getenv("BRT_CLI");
  REQUIRE(env != nullptr);
  return env;
}

int run(const std::string& args) {
  const std::string cmd = cli() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

struct Workspace {
  fs::path root;
  Workspace() : root(fs::temp_directory_path() / "brt_cli_ws") {
    fs::remove_all(root);
    fs::create_directories(root);
    // Small synth config.
    json synth = brt::synth_config_to_json(brt::SynthConfig::default_config());
    synth["points_per_scene"] = 256;
    synth["image_size"] = {32, 32};
    synth["boxes_per_scene"] = {1, 3};
    synth["views_per_scene"] = 3;
    synth["noise_std"] = 0.005;
    write("synth.json", synth);
    // Toy model config.
    write("model.json", json{{"n_pnt", 32},
                             {"n_pat", 16},
                             {"k_queries", 4},
                             {"hidden_dim", 32},
                             {"stages", 2},
                             {"heads", 2},
                             {"patch_size", 16},
                             {"feat_dim", 16},
                             {"num_classes", 10},
                             {"aggregation_stages", "all"},
                             {"occlusion_tolerance", 0.35}});
    write("train.json", json{{"epochs", 3},
                             {"batch_size", 2},
                             {"lr", 1e-3},
                             {"seed", 11}});
  }
  ~Workspace() { fs::remove_all(root); }

  void write(const std::string& name, const json& j) {
    std::ofstream os(root / name);
    os << j.dump(2);
  }
  std::string p(const std::string& rel) const { return (root / rel).string(); }
};

}  // namespace

TEST_CASE("cli pipeline: synth, train, eval, project, export-attn") {
  Workspace ws;

  // Empty dataset is valid.
  CHECK(run("synth --config " + ws.p("synth.json") + " --seed 5 --count 0 --out " +
            ws.p("empty")) == 0);
  CHECK(fs::exists(ws.root / "empty" / "manifest.json"));
  const brt::Dataset empty = brt::read_dataset(ws.p("empty/dataset.json"));
  CHECK(empty.scenes.empty());

  // Synthesize a real dataset, twice: byte-identical outputs.
  REQUIRE(run("synth --config " + ws.p("synth.json") + " --seed 100 --count 4 --out " +
              ws.p("data")) == 0);
  REQUIRE(run("synth --config " + ws.p("synth.json") + " --seed 100 --count 4 --out " +
              ws.p("data2")) == 0);
  CHECK(slurp(ws.root / "data/dataset.json") == slurp(ws.root / "data2/dataset.json"));
  // Identical inputs and identical --out give byte-identical manifests.
  const std::string manifest_before = slurp(ws.root / "data2/manifest.json");
  REQUIRE(run("synth --config " + ws.p("synth.json") + " --seed 100 --count 4 --out " +
              ws.p("data2")) == 0);
  CHECK(slurp(ws.root / "data2/manifest.json") == manifest_before);

  // Overrides reach the synth config.
  REQUIRE(run("synth --config " + ws.p("synth.json") + " --seed 100 --count 1 --out " +
              ws.p("quiet") + " --set noise_std=0.0") == 0);
  const brt::Dataset quiet = brt::read_dataset(ws.p("quiet/dataset.json"));
  CHECK(quiet.config.noise_std == 0.0);

  // Train.
  REQUIRE(run("train --dataset " + ws.p("data/dataset.json") + " --model-config " +
              ws.p("model.json") + " --train-config " + ws.p("train.json") + " --out " +
              ws.p("runA")) == 0);
  CHECK(fs::exists(ws.root / "runA/checkpoint.bin"));
  CHECK(fs::exists(ws.root / "runA/train_log.jsonl"));

  // Evaluate twice: idempotent bytes.
  REQUIRE(run("eval --dataset " + ws.p("data/dataset.json") + " --checkpoint " +
              ws.p("runA/checkpoint") + " --out " + ws.p("evalA")) == 0);
  REQUIRE(run("eval --dataset " + ws.p("data/dataset.json") + " --checkpoint " +
              ws.p("runA/checkpoint.json") + " --out " + ws.p("evalB")) == 0);
  CHECK(slurp(ws.root / "evalA/metrics.json") == slurp(ws.root / "evalB/metrics.json"));
  const json metrics = json::parse(slurp(ws.root / "evalA/metrics.json"));
  CHECK(metrics.contains("map_025"));
  CHECK(metrics.contains("map_05"));
  CHECK(metrics.contains("per_class"));
  CHECK(metrics.at("num_scenes") == 4);

  // Projection report: spot-check the patch-index formula.
  const brt::Dataset data = brt::read_dataset(ws.p("data/dataset.json"));
  const std::string scene_id = data.scenes[0].scene_id;
  REQUIRE(run("project --dataset " + ws.p("data/dataset.json") + " --scene-id " + scene_id +
              " --patch-size 16 --out " + ws.p("proj")) == 0);
  const json report = json::parse(slurp(ws.root / "proj/projection_report.json"));
  CHECK(report.at("scene_id") == scene_id);
  const int total_width =
      report.at("stitched").at("num_views").get<int>() * report.at("stitched").at("view_width").get<int>();
  int64_t checked = 0;
  for (const auto& pt : report.at("points")) {
    if (!pt.at("visible").get<bool>()) {
      CHECK(pt.at("patch_index").get<int64_t>() == -1);
      continue;
    }
    const double u = pt.at("u").get<double>(), v = pt.at("v").get<double>();
    const int64_t expect = brt::patch_index_for_pixel(u, v, total_width, 16);
    if (pt.at("patch_index").get<int64_t>() != -1) {
      CHECK(pt.at("patch_index").get<int64_t>() == expect);
      ++checked;
    }
  }
  CHECK(checked > 0);

  // Attention export: normalised rows, blocked point-patch block.
  REQUIRE(run("export-attn --dataset " + ws.p("data/dataset.json") + " --checkpoint " +
              ws.p("runA/checkpoint") + " --scene-id " + scene_id + " --stages 1,2 --out " +
              ws.p("attn")) == 0);
  const json attn = json::parse(slurp(ws.root / "attn/attention.json"));
  REQUIRE(attn.at("entries").size() == 4);  // 2 stages x 2 heads
  const auto& entry = attn.at("entries")[0];
  const int64_t n_pnt = entry.at("token_group_offsets").at("p_pat").get<int64_t>();
  const int64_t opnt0 = entry.at("token_group_offsets").at("o_pnt").get<int64_t>();
  const auto& weights = entry.at("weights");
  for (const auto& row : weights) {
    double sum = 0;
    for (const auto& w : row) sum += w.get<double>();
    CHECK(sum == Catch::Approx(1.0).margin(1e-9));
  }
  for (int64_t r = 0; r < n_pnt; ++r)
    for (int64_t c = n_pnt; c < opnt0; ++c)
      CHECK(weights[static_cast<size_t>(r)][static_cast<size_t>(c)].get<double>() == 0.0);
}

TEST_CASE("cli error codes") {
  Workspace ws;
  REQUIRE(run("synth --config " + ws.p("synth.json") + " --seed 7 --count 2 --out " +
              ws.p("data")) == 0);
  REQUIRE(run("train --dataset " + ws.p("data/dataset.json") + " --model-config " +
              ws.p("model.json") + " --train-config " + ws.p("train.json") + " --out " +
              ws.p("run")) == 0);

  // Config error: checkpoint shapes do not match an overridden model config.
  const std::string cmd = cli() + " eval --dataset " + ws.p("data/dataset.json") +
                          " --checkpoint " + ws.p("run/checkpoint") + " --model-config " +
                          ws.p("model.json") + " --set model.hidden_dim=16 --out " +
                          ws.p("bad") + " 2> " + ws.p("stderr.txt");
  CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 1);
  const std::string err = slurp(ws.root / "stderr.txt");
  CHECK(err.find("shape") != std::string::npos);
  CHECK(err.find("head") != std::string::npos);  // names the offending parameter

  // IO error: missing dataset.
  CHECK(run("eval --dataset " + ws.p("nope.json") + " --checkpoint " + ws.p("run/checkpoint") +
            " --out " + ws.p("x")) == 3);

  // Numeric error: a divergent learning rate produces a non-finite loss.
  CHECK(run("train --dataset " + ws.p("data/dataset.json") + " --model-config " +
            ws.p("model.json") + " --train-config " + ws.p("train.json") + " --out " +
            ws.p("diverge") + " --set train.lr=1e18 --set train.grad_clip_norm=0") == 2);

  // Unknown scene.
  CHECK(run("project --dataset " + ws.p("data/dataset.json") +
            " --scene-id scene-does-not-exist --out " + ws.p("p")) == 1);

  // Bad flags.
  CHECK(run("synth --count 1 --out " + ws.p("y")) != 0);
}
