// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "brt/error.hpp"
#include "brt/loss.hpp"
#include "brt/metrics.hpp"
#include "brt/model.hpp"
#include "brt/scene_io.hpp"

namespace brt {

/// Parallelism cap; defaults to 1 so runs are single-core unless raised.
inline int thread_budget() {
  const char* env = std::getenv("BRT_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n > 0 ? n : 1;
}

/// Runs fn(i) for i in [0, n), each result landing in its own slot, so the
/// outcome is independent of the thread count.
template <typename Fn>
void parallel_for(int64_t n, Fn fn) {
  const int threads = std::min<int64_t>(thread_budget(), n);
  if (threads <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int64_t> next{0};
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&]() {
      for (int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 40;
  int batch_size = 4;
  double lr = 2e-3;
  double lr_decay_factor = 0.1;
  std::vector<double> decay_epoch_fractions{0.7, 0.8, 0.9};
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  uint64_t seed = 1;
  double flip_prob = 0.5;
  double rotation_max_deg = 5.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double grad_clip_norm = 1.0;
  LossWeights loss_weights;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("TrainConfig: lr must be positive");
    if (epochs < 1 || batch_size < 1) throw ConfigError("TrainConfig: bad epochs/batch_size");
    double prev = 0;
    for (double f : decay_epoch_fractions) {
      if (!(f > prev && f < 1)) throw ConfigError("TrainConfig: fractions must increase in (0,1)");
      prev = f;
    }
    loss_weights.validate();
  }

  std::vector<int> decay_epochs() const {
    std::vector<int> out;
    for (double f : decay_epoch_fractions)
      out.push_back(static_cast<int>(std::floor(f * epochs)));
    return out;
  }

  double lr_at_epoch(int epoch) const {
    double value = lr;
    for (int boundary : decay_epochs())
      if (epoch >= boundary) value *= lr_decay_factor;
    return value;
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"lr", cfg.lr},
          {"lr_decay_factor", cfg.lr_decay_factor},
          {"decay_epoch_fractions", cfg.decay_epoch_fractions},
          {"weight_decay", cfg.weight_decay},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"seed", cfg.seed},
          {"flip_prob", cfg.flip_prob},
          {"rotation_max_deg", cfg.rotation_max_deg},
          {"scale_range", {cfg.scale_min, cfg.scale_max}},
          {"grad_clip_norm", cfg.grad_clip_norm},
          {"loss_weights",
           {{"alpha1", cfg.loss_weights.alpha1},
            {"alpha2", cfg.loss_weights.alpha2},
            {"alpha3", cfg.loss_weights.alpha3},
            {"w_center3d", cfg.loss_weights.w_center3d},
            {"w_size3d", cfg.loss_weights.w_size3d},
            {"w_objcls3d", cfg.loss_weights.w_objcls3d},
            {"w_sizecls3d", cfg.loss_weights.w_sizecls3d},
            {"w_center2d", cfg.loss_weights.w_center2d},
            {"w_giou2d", cfg.loss_weights.w_giou2d}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j,
                                          const std::string& path = "train_config") {
  TrainConfig cfg;
  try {
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.lr_decay_factor = j.value("lr_decay_factor", cfg.lr_decay_factor);
    if (j.contains("decay_epoch_fractions"))
      cfg.decay_epoch_fractions = j["decay_epoch_fractions"].get<std::vector<double>>();
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.flip_prob = j.value("flip_prob", cfg.flip_prob);
    cfg.rotation_max_deg = j.value("rotation_max_deg", cfg.rotation_max_deg);
    if (j.contains("scale_range")) {
      cfg.scale_min = j["scale_range"][0].get<double>();
      cfg.scale_max = j["scale_range"][1].get<double>();
    }
    cfg.grad_clip_norm = j.value("grad_clip_norm", cfg.grad_clip_norm);
    if (j.contains("loss_weights")) {
      const auto& w = j["loss_weights"];
      cfg.loss_weights.alpha1 = w.value("alpha1", cfg.loss_weights.alpha1);
      cfg.loss_weights.alpha2 = w.value("alpha2", cfg.loss_weights.alpha2);
      cfg.loss_weights.alpha3 = w.value("alpha3", cfg.loss_weights.alpha3);
      cfg.loss_weights.w_center3d = w.value("w_center3d", cfg.loss_weights.w_center3d);
      cfg.loss_weights.w_size3d = w.value("w_size3d", cfg.loss_weights.w_size3d);
      cfg.loss_weights.w_objcls3d = w.value("w_objcls3d", cfg.loss_weights.w_objcls3d);
      cfg.loss_weights.w_sizecls3d = w.value("w_sizecls3d", cfg.loss_weights.w_sizecls3d);
      cfg.loss_weights.w_center2d = w.value("w_center2d", cfg.loss_weights.w_center2d);
      cfg.loss_weights.w_giou2d = w.value("w_giou2d", cfg.loss_weights.w_giou2d);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. Decay is skipped for parameters flagged
/// weight_decay=false (biases, layernorm gains/offsets, positional
/// embeddings).
class AdamW {
 public:
  AdamW(ParameterRegistry& reg, double beta1, double beta2, double weight_decay,
        double eps = 1e-8)
      : reg_(reg), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
    for (const auto& [name, p] : reg.all()) {
      m_[name].assign(static_cast<size_t>(p.tensor.numel()), 0.0);
      v_[name].assign(static_cast<size_t>(p.tensor.numel()), 0.0);
    }
  }

  /// Scales all gradients so their global norm is at most `max_norm`.
  void clip_gradients(double max_norm) {
    double sq = 0;
    for (const auto& [name, p] : reg_.all())
      for (double g : p.tensor.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0) return;
    const double scale = max_norm / norm;
    for (auto& [name, p] : reg_.all()) {
      auto node = p.tensor.node();
      for (double& g : node->grad) g *= scale;
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& [name, p] : reg_.all()) {
      auto& m = m_[name];
      auto& v = v_[name];
      const auto& g = p.tensor.grad();
      auto& values = p.tensor.mutable_data();
      for (size_t i = 0; i < values.size(); ++i) {
        m[i] = beta1_ * m[i] + (1 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1 - beta2_) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        values[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        if (p.weight_decay && weight_decay_ > 0) values[i] -= lr * weight_decay_ * values[i];
      }
    }
  }

 private:
  ParameterRegistry& reg_;
  double beta1_, beta2_, weight_decay_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainSummary {
  int64_t steps = 0;
  double first_epoch_mean_loss = 0.0;
  double last_epoch_mean_loss = 0.0;
  std::vector<double> epoch_mean_loss;
};

inline AugmentParams draw_augment_params(const TrainConfig& cfg, int epoch, int64_t scene_index) {
  Rng rng(mix_seed(mix_seed(cfg.seed, 0x617567 + static_cast<uint64_t>(epoch)),
                   static_cast<uint64_t>(scene_index)));
  AugmentParams p;
  p.flip_indicator = rng.bernoulli(cfg.flip_prob) ? -1.0 : 1.0;
  p.theta = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg) * std::numbers::pi / 180.0;
  p.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  return p;
}

/// Deterministic training: per-epoch shuffling and per-(epoch, scene)
/// augmentation draws are pure functions of the config seed. Checkpoints are
/// written at every learning-rate decay boundary and at the end.
inline TrainSummary train(const Dataset& dataset, BrtModel& model, const TrainConfig& cfg,
                          const std::string& out_dir) {
  cfg.validate();
  if (dataset.scenes.empty()) throw ConfigError("train: dataset has no scenes");
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir + "/train_log.jsonl");
  if (!log) throw IoError("cannot open training log in '" + out_dir + "'");

  const std::vector<Vec3> templates =
      size_templates(dataset.scenes, model.config().num_classes);
  AdamW opt(model.registry(), cfg.beta1, cfg.beta2, cfg.weight_decay);
  const std::vector<int> boundaries = cfg.decay_epochs();

  TrainSummary summary;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t b = 0; b < boundaries.size(); ++b)
      if (epoch == boundaries[b]) {
        const nlohmann::json extra = {{"model_config", model_config_to_json(model.config())},
                                      {"train_seed", cfg.seed}};
        save_checkpoint(model.registry(), out_dir + "/checkpoint_decay" + std::to_string(b),
                        extra);
      }
    const double lr = cfg.lr_at_epoch(epoch);
    std::vector<int64_t> order(dataset.scenes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x736875 + static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0;
    int64_t epoch_batches = 0;
    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
      const size_t batch_end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(batch_end - pos);
      model.registry().zero_grad();
      LossTerms mean_terms;
      for (size_t bi = pos; bi < batch_end; ++bi) {
        const int64_t si = order[bi];
        const Scene& base = dataset.scenes[static_cast<size_t>(si)];
        const Scene scene = augment_scene(base, draw_augment_params(cfg, epoch, si));
        LossResult loss = [&]() {
          try {
            const ForwardResult fwd = model.forward(scene);
            const StitchedLayout layout = stitch_views(scene.views);
            return total_loss(fwd.pred3d, fwd.pred2d, scene.gt_boxes,
                              derive_gt_boxes_2d(scene, layout), model.config().num_classes,
                              cfg.loss_weights, templates);
          } catch (const NumericError& e) {
            throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                               ", scene '" + base.scene_id + "': " + e.what());
          }
        }();
        if (!std::isfinite(loss.terms.total))
          throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                             ", scene '" + base.scene_id + "'");
        scale(loss.total, inv_batch).backward();
        mean_terms.obj3d_center += inv_batch * loss.terms.obj3d_center;
        mean_terms.obj3d_size += inv_batch * loss.terms.obj3d_size;
        mean_terms.cls3d_obj += inv_batch * loss.terms.cls3d_obj;
        mean_terms.cls3d_size += inv_batch * loss.terms.cls3d_size;
        mean_terms.obj2d_center += inv_batch * loss.terms.obj2d_center;
        mean_terms.obj2d_giou += inv_batch * loss.terms.obj2d_giou;
        mean_terms.cls2d += inv_batch * loss.terms.cls2d;
        mean_terms.total += inv_batch * loss.terms.total;
      }
      if (cfg.grad_clip_norm > 0) opt.clip_gradients(cfg.grad_clip_norm);
      opt.step(lr);
      ++step;
      epoch_loss += mean_terms.total;
      ++epoch_batches;
      log << nlohmann::json({{"step", step},
                             {"epoch", epoch},
                             {"lr", lr},
                             {"obj3d_center", mean_terms.obj3d_center},
                             {"obj3d_size", mean_terms.obj3d_size},
                             {"cls3d_obj", mean_terms.cls3d_obj},
                             {"cls3d_size", mean_terms.cls3d_size},
                             {"obj2d_center", mean_terms.obj2d_center},
                             {"obj2d_giou", mean_terms.obj2d_giou},
                             {"cls2d", mean_terms.cls2d},
                             {"total", mean_terms.total}})
                 .dump()
          << '\n';
    }
    const double mean_loss = epoch_loss / static_cast<double>(epoch_batches);
    summary.epoch_mean_loss.push_back(mean_loss);
    if (epoch == 0) summary.first_epoch_mean_loss = mean_loss;
    summary.last_epoch_mean_loss = mean_loss;
  }
  summary.steps = step;
  const nlohmann::json extra = {{"model_config", model_config_to_json(model.config())},
                                {"train_seed", cfg.seed}};
  save_checkpoint(model.registry(), out_dir + "/checkpoint", extra);
  return summary;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Head outputs -> detections: score is the best real-class probability
/// (softmax over C+1 including no-object); low scores are dropped.
inline std::vector<Detection> detections_from_forward(const ForwardResult& fwd,
                                                      const std::string& scene_id,
                                                      int64_t num_classes,
                                                      double score_floor = 0.05) {
  std::vector<Detection> dets;
  for (int64_t q = 0; q < fwd.pred3d.rows(); ++q) {
    const Pred3D p = pred3d_row(fwd.pred3d, q, num_classes);
    double mx = p.logits[0];
    for (double l : p.logits) mx = std::max(mx, l);
    double denom = 0;
    for (double l : p.logits) denom += std::exp(l - mx);
    int best_cls = 0;
    double best_prob = 0;
    for (int64_t c = 0; c < num_classes; ++c) {
      const double prob = std::exp(p.logits[static_cast<size_t>(c)] - mx) / denom;
      if (prob > best_prob) {
        best_prob = prob;
        best_cls = static_cast<int>(c);
      }
    }
    if (best_prob < score_floor) continue;
    Detection det;
    det.box.center = p.center;
    det.box.size = {std::max(p.size.x, 0.01), std::max(p.size.y, 0.01), std::max(p.size.z, 0.01)};
    det.box.class_id = best_cls;
    det.score = best_prob;
    det.scene_id = scene_id;
    dets.push_back(det);
  }
  return dets;
}

struct EvalResult {
  EvalSummary at025;
  EvalSummary at05;
  int64_t num_scenes = 0;
  nlohmann::json to_json(const std::vector<std::string>& class_names) const {
    return metrics_json(at025, at05, class_names, num_scenes);
  }
};

inline EvalResult evaluate(const Dataset& dataset, const BrtModel& model,
                           double score_floor = 0.05) {
  const int64_t n = static_cast<int64_t>(dataset.scenes.size());
  std::vector<std::vector<Detection>> per_scene(static_cast<size_t>(n));
  parallel_for(n, [&](int64_t i) {
    NoGradGuard guard;
    const Scene& scene = dataset.scenes[static_cast<size_t>(i)];
    per_scene[static_cast<size_t>(i)] = detections_from_forward(
        model.forward(scene), scene.scene_id, model.config().num_classes, score_floor);
  });
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> gts;
  for (int64_t i = 0; i < n; ++i) {
    const Scene& scene = dataset.scenes[static_cast<size_t>(i)];
    dets.insert(dets.end(), per_scene[static_cast<size_t>(i)].begin(),
                per_scene[static_cast<size_t>(i)].end());
    for (const Box3D& b : scene.gt_boxes) gts.push_back({b, scene.scene_id});
  }
  EvalResult result;
  result.num_scenes = n;
  result.at025 = evaluate_detections(dets, gts, model.config().num_classes, 0.25);
  result.at05 = evaluate_detections(dets, gts, model.config().num_classes, 0.5);
  return result;
}

inline std::vector<std::string> class_names(const SynthConfig& cfg) {
  std::vector<std::string> names;
  for (const ClassSpec& c : cfg.classes) names.push_back(c.name);
  return names;
}

}  // namespace brt
