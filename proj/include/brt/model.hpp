// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "brt/error.hpp"
#include "brt/nn.hpp"
#include "brt/scene.hpp"
#include "brt/tensor.hpp"
#include "brt/tokenizer.hpp"

namespace brt {

/// Fixed scale applied to metre-valued coordinate inputs before they reach
/// learned layers, conditioning them to roughly unit range at room scale.
constexpr double kCoordScale = 0.25;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  int64_t n_pnt = 64;       // seed point tokens
  int64_t n_pat = 16;       // patch-token capacity (positional-embedding grid)
  int64_t k_queries = 16;   // object queries per modality
  int64_t hidden_dim = 32;  // D
  int64_t stages = 2;       // L
  int64_t heads = 2;        // H
  int64_t patch_size = 16;  // S
  int64_t feat_dim = 16;    // F
  int64_t num_classes = 10;

  bool aggregate_all_stages = true;
  std::set<int> aggregation_stages;  // 1-based, used when !aggregate_all_stages

  // Bridge ablation toggles.
  bool use_conditional_queries = true;
  bool use_shared_pe = true;
  bool use_point_patch_projection = true;

  // Attention-connectivity toggles; defaults are the blocked point<->patch
  // pattern with globally attentive queries.
  bool connect_opnt_ppat = true;
  bool connect_opat_ppnt = true;
  bool connect_ppnt_ppat = false;

  double occlusion_tolerance = 0.05;

  void validate() const {
    if (hidden_dim % heads != 0) throw ConfigError("ModelConfig: hidden_dim must divide by heads");
    if (k_queries > n_pnt) throw ConfigError("ModelConfig: k_queries must be <= n_pnt");
    if (stages < 1) throw ConfigError("ModelConfig: stages must be >= 1");
    if (n_pnt < 1 || n_pat < 1 || patch_size < 1 || feat_dim < 1 || num_classes < 1)
      throw ConfigError("ModelConfig: dimensions must be positive");
  }

  bool aggregate_at(int stage) const {
    return aggregate_all_stages || aggregation_stages.count(stage) > 0;
  }

  int64_t pred3d_cols() const { return 3 + 3 + num_classes + 1; }
  int64_t pred2d_cols() const { return 4 + num_classes + 1; }
};

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j = {{"n_pnt", cfg.n_pnt},
                      {"n_pat", cfg.n_pat},
                      {"k_queries", cfg.k_queries},
                      {"hidden_dim", cfg.hidden_dim},
                      {"stages", cfg.stages},
                      {"heads", cfg.heads},
                      {"patch_size", cfg.patch_size},
                      {"feat_dim", cfg.feat_dim},
                      {"num_classes", cfg.num_classes},
                      {"use_conditional_queries", cfg.use_conditional_queries},
                      {"use_shared_pe", cfg.use_shared_pe},
                      {"use_point_patch_projection", cfg.use_point_patch_projection},
                      {"connect_opnt_ppat", cfg.connect_opnt_ppat},
                      {"connect_opat_ppnt", cfg.connect_opat_ppnt},
                      {"connect_ppnt_ppat", cfg.connect_ppnt_ppat},
                      {"occlusion_tolerance", cfg.occlusion_tolerance}};
  if (cfg.aggregate_all_stages)
    j["aggregation_stages"] = "all";
  else
    j["aggregation_stages"] = cfg.aggregation_stages;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j,
                                          const std::string& path = "model_config") {
  ModelConfig cfg;
  try {
    cfg.n_pnt = j.at("n_pnt").get<int64_t>();
    cfg.n_pat = j.at("n_pat").get<int64_t>();
    cfg.k_queries = j.at("k_queries").get<int64_t>();
    cfg.hidden_dim = j.at("hidden_dim").get<int64_t>();
    cfg.stages = j.at("stages").get<int64_t>();
    cfg.heads = j.at("heads").get<int64_t>();
    cfg.patch_size = j.at("patch_size").get<int64_t>();
    cfg.feat_dim = j.at("feat_dim").get<int64_t>();
    cfg.num_classes = j.at("num_classes").get<int64_t>();
    if (j.contains("aggregation_stages")) {
      if (j["aggregation_stages"].is_string()) {
        cfg.aggregate_all_stages = true;
      } else {
        cfg.aggregate_all_stages = false;
        for (const auto& s : j["aggregation_stages"]) cfg.aggregation_stages.insert(s.get<int>());
      }
    }
    cfg.use_conditional_queries = j.value("use_conditional_queries", true);
    cfg.use_shared_pe = j.value("use_shared_pe", true);
    cfg.use_point_patch_projection = j.value("use_point_patch_projection", true);
    cfg.connect_opnt_ppat = j.value("connect_opnt_ppat", true);
    cfg.connect_opat_ppnt = j.value("connect_opat_ppnt", true);
    cfg.connect_ppnt_ppat = j.value("connect_ppnt_ppat", false);
    cfg.occlusion_tolerance = j.value("occlusion_tolerance", 0.05);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Attention mask
// ---------------------------------------------------------------------------

/// Row/column order is [p_pnt | p_pat | o_pnt | o_pat]; entry (i, j) answers
/// "may token i attend to token j".
struct AttentionMask {
  BoolMat mat;
  int64_t n_pnt = 0;
  int64_t n_pat = 0;
  int64_t k = 0;

  int64_t tokens() const { return n_pnt + n_pat + 2 * k; }
};

/// Default connectivity: point tokens see {o_pnt, p_pnt}, patch tokens see
/// {o_pat, p_pat}, both query groups see everything. The three connect_*
/// toggles reproduce the alternative wirings used for ablations.
inline AttentionMask build_mask(const ModelConfig& cfg, int64_t n_pat_actual) {
  AttentionMask mask;
  mask.n_pnt = cfg.n_pnt;
  mask.n_pat = n_pat_actual;
  mask.k = cfg.k_queries;
  const int64_t t = mask.tokens();
  const int64_t pnt0 = 0, pat0 = cfg.n_pnt, opnt0 = pat0 + n_pat_actual, opat0 = opnt0 + cfg.k_queries;
  mask.mat = BoolMat::full(t, t, false);
  const auto fill = [&](int64_t r0, int64_t r1, int64_t c0, int64_t c1, bool v) {
    for (int64_t r = r0; r < r1; ++r)
      for (int64_t c = c0; c < c1; ++c) mask.mat.set(r, c, v);
  };
  // point rows
  fill(pnt0, pat0, pnt0, pat0, true);
  fill(pnt0, pat0, opnt0, opat0, true);
  if (cfg.connect_ppnt_ppat) fill(pnt0, pat0, pat0, opnt0, true);
  // patch rows
  fill(pat0, opnt0, pat0, opnt0, true);
  fill(pat0, opnt0, opat0, t, true);
  if (cfg.connect_ppnt_ppat) fill(pat0, opnt0, pnt0, pat0, true);
  // query rows attend everywhere unless a toggle removes a block
  fill(opnt0, opat0, 0, t, true);
  fill(opat0, t, 0, t, true);
  if (!cfg.connect_opnt_ppat) fill(opnt0, opat0, pat0, opnt0, false);
  if (!cfg.connect_opat_ppnt) fill(opat0, t, pnt0, pat0, false);
  return mask;
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

struct AttentionHeadParams {
  Tensor q;  // [D, d_h] query projection
  Tensor u;  // [D, d_h] key projection
  Tensor v;  // [D, d_h] value projection
  Tensor w;  // [d_h, D] output projection
};

struct MsaResult {
  Tensor out;                 // [n_q, D]
  std::vector<Tensor> attn;   // per head, [n_q, n_k]; masked cells exactly 0
};

/// Attention weights are the masked softmax of (Q_h q)^T (U_h p); the output
/// sums W_h-projected value aggregates over heads. No logit scaling is
/// applied.
inline MsaResult msa(const Tensor& queries, const Tensor& keys_values,
                     const std::vector<AttentionHeadParams>& heads, const BoolMat& mask) {
  MsaResult res;
  for (size_t h = 0; h < heads.size(); ++h) {
    const Tensor qh = matmul(queries, heads[h].q);
    const Tensor kh = matmul(keys_values, heads[h].u);
    const Tensor logits = matmul_nt(qh, kh);
    const Tensor attn = softmax_lastdim(logits, &mask);
    const Tensor vh = matmul(keys_values, heads[h].v);
    const Tensor head_out = matmul(matmul(attn, vh), heads[h].w);
    res.attn.push_back(attn);
    res.out = h == 0 ? head_out : add(res.out, head_out);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Token bundle and stages
// ---------------------------------------------------------------------------

struct TokenBundle {
  Tensor p_pnt;  // [N_pnt, D]
  Tensor p_pat;  // [n_pat, D]
  Tensor o_pnt;  // [K, D]
  Tensor o_pat;  // [K, D]
  int stage = 1;
};

struct TransformerStage {
  std::vector<AttentionHeadParams> heads;
  LayerNorm ln_attn;
  LayerNorm ln_mlp;
  Mlp mlp;
  Mlp aggregation;  // point <- patch feature transfer, present when enabled
  bool has_aggregation = false;
};

struct StageResult {
  TokenBundle tokens;
  std::vector<Tensor> attn;  // per head
};

/// Point <- patch feature transfer: every point token with a mapped patch
/// receives the MLP-transformed features of that patch token; sentinel
/// entries pass through untouched.
inline Tensor aggregate_point_tokens(const Tensor& p_pnt, const Tensor& p_pat,
                                     const PointPatchMap& map, const Mlp& mlp) {
  const Tensor transferred = mlp.forward(p_pat);
  return add(p_pnt, gather_rows(transferred, map.patch_index, /*allow_sentinel=*/true));
}

/// One transformer stage: optional patch->point aggregation, then pre-norm
/// masked MSA and MLP with residuals over the concatenated token matrix.
inline StageResult stage_forward(const TokenBundle& in, const PointPatchMap& map,
                                 const TransformerStage& stage, const AttentionMask& mask) {
  TokenBundle bundle = in;
  if (stage.has_aggregation)
    bundle.p_pnt = aggregate_point_tokens(bundle.p_pnt, bundle.p_pat, map, stage.aggregation);
  Tensor x = concat_rows({bundle.p_pnt, bundle.p_pat, bundle.o_pnt, bundle.o_pat});
  const Tensor normed = stage.ln_attn.forward(x);
  MsaResult attn_res = msa(normed, normed, stage.heads, mask.mat);
  x = add(x, attn_res.out);
  x = add(x, stage.mlp.forward(stage.ln_mlp.forward(x)));
  StageResult out;
  const int64_t n_pnt = bundle.p_pnt.rows(), n_pat = bundle.p_pat.rows(), k = bundle.o_pnt.rows();
  out.tokens.p_pnt = slice_rows(x, 0, n_pnt);
  out.tokens.p_pat = slice_rows(x, n_pnt, n_pnt + n_pat);
  out.tokens.o_pnt = slice_rows(x, n_pnt + n_pat, n_pnt + n_pat + k);
  out.tokens.o_pat = slice_rows(x, n_pnt + n_pat + k, n_pnt + n_pat + 2 * k);
  out.tokens.stage = in.stage + 1;
  out.attn = std::move(attn_res.attn);
  return out;
}

// ---------------------------------------------------------------------------
// Conditional object queries
// ---------------------------------------------------------------------------

struct BridgeState {
  std::vector<int64_t> proposal_indices;  // rows of the seed set
  Tensor proposal_coords;                 // [K, 3] constant
  Tensor refined_coords;                  // [K, 3], proposal + learned bias
  Tensor projected_2d;                    // [K, 2] normalised stitched coordinates
  std::vector<int> proposal_view;         // view chosen per proposal (-1 = borrowed)
  Tensor pe_pnt;                          // positional embedding added to o_pnt
  Tensor pe_pat;                          // positional embedding added to o_pat
};

namespace detail {

/// Differentiable pinhole projection of a [K,3] coordinate tensor through one
/// view; homogeneous depths are clamped away from zero so rows that are later
/// discarded by view selection cannot poison the forward pass.
inline Tensor project_tensor(const Tensor& coords, const CameraView& view) {
  std::vector<double> rot_t(9), trans(3);
  for (int i = 0; i < 3; ++i) {
    trans[static_cast<size_t>(i)] = view.extrinsics.m[i][3];
    for (int j = 0; j < 3; ++j) rot_t[static_cast<size_t>(j * 3 + i)] = view.extrinsics.m[i][j];
  }
  const Tensor cam = add_rowvec(matmul(coords, Tensor::from_data({3, 3}, rot_t)),
                                Tensor::from_data({3}, trans));
  const Mat3 ks = Mat3::diag(view.intrinsic_scale, view.intrinsic_scale, 1.0) * view.intrinsics;
  std::vector<double> ks_t(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) ks_t[static_cast<size_t>(j * 3 + i)] = ks.m[i][j];
  const Tensor hom = matmul(cam, Tensor::from_data({3, 3}, ks_t));
  const Tensor z = clamp_min(slice_cols(hom, 2, 3), 1e-6);
  return concat_cols({div(slice_cols(hom, 0, 1), z), div(slice_cols(hom, 1, 2), z)});
}

}  // namespace detail

/// Builds the conditional queries: proposals are an FPS subset of the seeds,
/// refined by a learned bias on their features; the 3D stream embeds the
/// refined coordinates, the 2D stream embeds their stitched camera
/// projections, and both streams receive their positional embeddings.
struct ConditionalQueryParams {
  Mlp bridge;    // f_pnt -> coordinate bias
  Mlp query3d;   // refined coords -> content
  Mlp query2d;   // projected coords -> content
  Tensor pe_pnt;
  Tensor pe_pat;           // same underlying parameter when PE is shared
  Tensor embed_pnt;        // used instead of query3d when conditioning is off
  Tensor embed_pat;
  bool conditional = true;
};

struct ConditionalQueryResult {
  BridgeState bridge;
  Tensor o_pnt1;
  Tensor o_pat1;
};

inline ConditionalQueryResult build_conditional_queries(const SeedPoints& seeds,
                                                        const std::vector<CameraView>& views,
                                                        const StitchedLayout& layout,
                                                        int64_t k_queries,
                                                        const ConditionalQueryParams& params) {
  ConditionalQueryResult res;
  BridgeState& bridge = res.bridge;
  bridge.proposal_indices = farthest_point_sample(seeds.coords, k_queries);
  bridge.proposal_coords = gather_rows(seeds.coords_tensor, bridge.proposal_indices);
  if (params.conditional) {
    const Tensor f_pnt = gather_rows(seeds.feats, bridge.proposal_indices);
    bridge.refined_coords = add(bridge.proposal_coords, params.bridge.forward(f_pnt));
  } else {
    bridge.refined_coords = bridge.proposal_coords;
  }

  // Project through every view, then select per proposal the in-image view
  // with the smallest camera depth; proposals with no valid view borrow the
  // nearest valid proposal's projection.
  const int64_t k = k_queries;
  std::vector<Tensor> per_view;
  std::vector<std::vector<double>> cam_depth(views.size());
  for (size_t v = 0; v < views.size(); ++v) {
    per_view.push_back(detail::project_tensor(bridge.refined_coords, views[v]));
    cam_depth[v].resize(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) {
      const Vec3 p{bridge.refined_coords.at(i, 0), bridge.refined_coords.at(i, 1),
                   bridge.refined_coords.at(i, 2)};
      cam_depth[v][static_cast<size_t>(i)] = views[v].extrinsics.apply(p).z;
    }
  }
  bridge.proposal_view.assign(static_cast<size_t>(k), -1);
  for (int64_t i = 0; i < k; ++i) {
    double best_depth = 0;
    for (size_t v = 0; v < views.size(); ++v) {
      const double depth = cam_depth[v][static_cast<size_t>(i)];
      if (!(depth > 0)) continue;
      const double u = per_view[v].at(i, 0), vv = per_view[v].at(i, 1);
      if (u < 0 || u >= views[v].width_px || vv < 0 || vv >= views[v].height_px) continue;
      if (bridge.proposal_view[static_cast<size_t>(i)] == -1 || depth < best_depth) {
        bridge.proposal_view[static_cast<size_t>(i)] = static_cast<int>(v);
        best_depth = depth;
      }
    }
  }
  std::vector<int64_t> select(static_cast<size_t>(k));
  std::vector<double> u_offset(static_cast<size_t>(k) * 2, 0.0);
  bool any_valid = false;
  for (int64_t i = 0; i < k; ++i) any_valid = any_valid || bridge.proposal_view[static_cast<size_t>(i)] >= 0;
  if (any_valid) {
    for (int64_t i = 0; i < k; ++i) {
      int64_t src = i;
      if (bridge.proposal_view[static_cast<size_t>(i)] < 0) {
        double best_d = 0;
        int64_t best_j = -1;
        for (int64_t j = 0; j < k; ++j) {
          if (bridge.proposal_view[static_cast<size_t>(j)] < 0) continue;
          double d = 0;
          for (int c = 0; c < 3; ++c) {
            const double delta = bridge.refined_coords.at(i, c) - bridge.refined_coords.at(j, c);
            d += delta * delta;
          }
          if (best_j == -1 || d < best_d) {
            best_j = j;
            best_d = d;
          }
        }
        src = best_j;
      }
      select[static_cast<size_t>(i)] =
          static_cast<int64_t>(bridge.proposal_view[static_cast<size_t>(src)]) * k + src;
      u_offset[static_cast<size_t>(i) * 2] =
          static_cast<double>(bridge.proposal_view[static_cast<size_t>(src)]) * layout.view_width;
    }
    const Tensor stacked = concat_rows(per_view);
    const Tensor stitched = add(gather_rows(stacked, select),
                                Tensor::from_data({k, 2}, u_offset));
    std::vector<double> inv_dims(static_cast<size_t>(k) * 2);
    for (int64_t i = 0; i < k; ++i) {
      inv_dims[static_cast<size_t>(i) * 2] = 1.0 / layout.total_width();
      inv_dims[static_cast<size_t>(i) * 2 + 1] = 1.0 / layout.height;
    }
    bridge.projected_2d = mul(stitched, Tensor::from_data({k, 2}, inv_dims));
  } else {
    // Degenerate scene: nothing projects anywhere. Anchor at the image centre.
    bridge.projected_2d = Tensor::filled({k, 2}, 0.5);
  }

  bridge.pe_pnt = params.pe_pnt;
  bridge.pe_pat = params.pe_pat;
  const Tensor content3d = params.conditional
                               ? params.query3d.forward(scale(bridge.refined_coords, kCoordScale))
                               : params.embed_pnt;
  const Tensor content2d =
      params.conditional ? params.query2d.forward(bridge.projected_2d) : params.embed_pat;
  res.o_pnt1 = add(content3d, params.pe_pnt);
  res.o_pat1 = add(content2d, params.pe_pat);
  return res;
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

struct TokenizedScene {
  SeedPoints seeds;
  StitchedLayout layout;
  PatchGrid patches;
  PointPatchMap map;
  const Scene* scene = nullptr;
};

struct ForwardResult {
  Tensor pred3d;  // [K, 3 + 3 + C+1]: centre, size, class logits
  Tensor pred2d;  // [K, 4 + C+1]: sigmoid cx cy w h, class logits
  BridgeState bridge;
  std::vector<std::vector<Tensor>> attention;  // [stage][head]
  AttentionMask mask;
  int64_t n_pat_actual = 0;
};

class BrtModel {
 public:
  BrtModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg), reg_(seed) {
    cfg_.validate();
    const int64_t d = cfg_.hidden_dim;
    const int64_t dh = d / cfg_.heads;
    encoder_ = Mlp::create(reg_, "encoder", {4, cfg_.feat_dim, cfg_.feat_dim}, Activation::kGelu,
                           false, Mlp::kFanInStd);
    token_embed_ = Mlp::create(reg_, "token_embed", {3 + cfg_.feat_dim, d, d}, Activation::kGelu,
                               false, Mlp::kFanInStd);
    patch_embed_ = Mlp::create(reg_, "patch_embed",
                               {3 * cfg_.patch_size * cfg_.patch_size, d, d}, Activation::kGelu,
                               false, Mlp::kFanInStd);
    patch_pe_ = reg_.create("patch_pe", {cfg_.n_pat, d}, InitSpec::normal(0.0, 0.02),
                            /*weight_decay=*/false);

    query_params_.conditional = cfg_.use_conditional_queries;
    if (cfg_.use_conditional_queries) {
      query_params_.bridge = Mlp::create(reg_, "bridge", {cfg_.feat_dim, cfg_.feat_dim, 3},
                                         Activation::kGelu, /*final_zero=*/true, Mlp::kFanInStd);
      query_params_.query3d =
          Mlp::create(reg_, "query3d", {3, d, d}, Activation::kGelu, /*final_zero=*/true, Mlp::kFanInStd);
      query_params_.query2d =
          Mlp::create(reg_, "query2d", {2, d, d}, Activation::kGelu, /*final_zero=*/true, Mlp::kFanInStd);
    } else {
      query_params_.embed_pnt = reg_.create("queries.embed_pnt", {cfg_.k_queries, d},
                                            InitSpec::normal(0.0, 0.02), false);
      query_params_.embed_pat = reg_.create("queries.embed_pat", {cfg_.k_queries, d},
                                            InitSpec::normal(0.0, 0.02), false);
    }
    if (cfg_.use_shared_pe) {
      Tensor pe = reg_.create("queries.pe", {cfg_.k_queries, d}, InitSpec::normal(0.0, 0.02), false);
      query_params_.pe_pnt = pe;
      query_params_.pe_pat = pe;
    } else {
      query_params_.pe_pnt = reg_.create("queries.pe_pnt", {cfg_.k_queries, d},
                                         InitSpec::normal(0.0, 0.02), false);
      query_params_.pe_pat = reg_.create("queries.pe_pat", {cfg_.k_queries, d},
                                         InitSpec::normal(0.0, 0.02), false);
    }

    for (int s = 1; s <= cfg_.stages; ++s) {
      const std::string prefix = "stage" + std::to_string(s);
      TransformerStage stage;
      for (int h = 0; h < cfg_.heads; ++h) {
        const std::string hp = prefix + ".attn.h" + std::to_string(h);
        AttentionHeadParams head;
        head.q = reg_.create(hp + ".q", {d, dh}, InitSpec::normal(0.0, 0.02));
        head.u = reg_.create(hp + ".u", {d, dh}, InitSpec::normal(0.0, 0.02));
        head.v = reg_.create(hp + ".v", {d, dh}, InitSpec::normal(0.0, 0.02));
        head.w = reg_.create(hp + ".w", {dh, d}, InitSpec::normal(0.0, 0.02));
        stage.heads.push_back(head);
      }
      stage.ln_attn = LayerNorm::create(reg_, prefix + ".ln_attn", d);
      stage.ln_mlp = LayerNorm::create(reg_, prefix + ".ln_mlp", d);
      stage.mlp = Mlp::create(reg_, prefix + ".mlp", {d, 4 * d, d}, Activation::kGelu, false,
                              Mlp::kFanInStd);
      stage.has_aggregation = cfg_.use_point_patch_projection && cfg_.aggregate_at(s);
      if (stage.has_aggregation)
        stage.aggregation = Mlp::create(reg_, prefix + ".aggregation", {d, d, d},
                                        Activation::kGelu, /*final_zero=*/true, Mlp::kFanInStd);
      stages_.push_back(stage);
    }
    final_ln_ = LayerNorm::create(reg_, "final_ln", d);
    head3d_ = Mlp::create(reg_, "head3d", {d, 2 * d, cfg_.pred3d_cols()}, Activation::kGelu,
                          false, Mlp::kFanInStd);
    head2d_ = Mlp::create(reg_, "head2d", {d, 2 * d, cfg_.pred2d_cols()}, Activation::kGelu,
                          false, Mlp::kFanInStd);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterRegistry& registry() { return reg_; }
  const ParameterRegistry& registry() const { return reg_; }

  TokenizedScene tokenize(const Scene& scene) const {
    TokenizedScene tok;
    tok.scene = &scene;
    tok.seeds = sample_seeds(scene, cfg_.n_pnt, encoder_);
    tok.layout = stitch_views(scene.views);
    const std::vector<double> stitched = stitch_images(scene.views);
    const int64_t grid_rows = tok.layout.height / cfg_.patch_size;
    if (grid_rows == 0) throw ConfigError("tokenize: image smaller than one patch");
    const int max_cols = static_cast<int>(cfg_.n_pat / grid_rows);
    tok.patches = embed_patches(stitched, tok.layout, static_cast<int>(cfg_.patch_size),
                                patch_embed_, patch_pe_, max_cols);
    tok.map = build_point_patch_map(tok.seeds.coords, scene.views,
                                    static_cast<int>(cfg_.patch_size), cfg_.occlusion_tolerance);
    return tok;
  }

  ForwardResult forward(const TokenizedScene& tok) const {
    ForwardResult res;
    res.n_pat_actual = tok.patches.n_pat();

    // Point tokens from centred coordinates + encoder features.
    std::vector<double> centred(static_cast<size_t>(cfg_.n_pnt) * 3);
    for (int64_t i = 0; i < cfg_.n_pnt; ++i) {
      const Vec3 c = tok.seeds.coords[static_cast<size_t>(i)] - tok.seeds.cloud_centroid;
      centred[static_cast<size_t>(i) * 3] = c.x;
      centred[static_cast<size_t>(i) * 3 + 1] = c.y;
      centred[static_cast<size_t>(i) * 3 + 2] = c.z;
    }
    const Tensor point_in =
        concat_cols({scale(Tensor::from_data({cfg_.n_pnt, 3}, centred), kCoordScale),
                     tok.seeds.feats});

    TokenBundle bundle;
    bundle.p_pnt = token_embed_.forward(point_in);
    bundle.p_pat = tok.patches.embeddings;
    ConditionalQueryResult queries = build_conditional_queries(
        tok.seeds, tok.scene->views, tok.layout, cfg_.k_queries, query_params_);
    bundle.o_pnt = queries.o_pnt1;
    bundle.o_pat = queries.o_pat1;
    bundle.stage = 1;
    res.bridge = queries.bridge;

    res.mask = build_mask(cfg_, res.n_pat_actual);
    for (const TransformerStage& stage : stages_) {
      StageResult sr = stage_forward(bundle, tok.map, stage, res.mask);
      bundle = sr.tokens;
      res.attention.push_back(std::move(sr.attn));
    }

    const Tensor raw3d = head3d_.forward(final_ln_.forward(bundle.o_pnt));
    const Tensor center = add(slice_cols(raw3d, 0, 3), res.bridge.refined_coords);
    res.pred3d = concat_cols({center, slice_cols(raw3d, 3, 6),
                              slice_cols(raw3d, 6, cfg_.pred3d_cols())});
    const Tensor raw2d = head2d_.forward(final_ln_.forward(bundle.o_pat));
    res.pred2d = concat_cols({sigmoid(slice_cols(raw2d, 0, 4)),
                              slice_cols(raw2d, 4, cfg_.pred2d_cols())});
    return res;
  }

  ForwardResult forward(const Scene& scene) const {
    const TokenizedScene tok = tokenize(scene);
    return forward(tok);
  }

 private:
  ModelConfig cfg_;
  ParameterRegistry reg_;
  Mlp encoder_, token_embed_, patch_embed_;
  Tensor patch_pe_;
  ConditionalQueryParams query_params_;
  std::vector<TransformerStage> stages_;
  LayerNorm final_ln_;
  Mlp head3d_, head2d_;
};

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

/// JSON records of the attention maps for the requested 1-based stages.
inline nlohmann::json attention_export_json(const ForwardResult& result,
                                            const std::vector<int>& stages) {
  nlohmann::json entries = nlohmann::json::array();
  const nlohmann::json offsets = {{"p_pnt", 0},
                                  {"p_pat", result.mask.n_pnt},
                                  {"o_pnt", result.mask.n_pnt + result.mask.n_pat},
                                  {"o_pat", result.mask.n_pnt + result.mask.n_pat + result.mask.k}};
  for (int s : stages) {
    if (s < 1 || s > static_cast<int>(result.attention.size()))
      throw ConfigError("attention export: stage " + std::to_string(s) + " out of range");
    const auto& heads = result.attention[static_cast<size_t>(s - 1)];
    for (size_t h = 0; h < heads.size(); ++h) {
      const Tensor& a = heads[h];
      nlohmann::json weights = nlohmann::json::array();
      for (int64_t r = 0; r < a.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int64_t c = 0; c < a.cols(); ++c) row.push_back(a.at(r, c));
        weights.push_back(std::move(row));
      }
      entries.push_back({{"stage", s},
                         {"head", static_cast<int>(h)},
                         {"token_group_offsets", offsets},
                         {"weights", std::move(weights)}});
    }
  }
  return entries;
}

}  // namespace brt
