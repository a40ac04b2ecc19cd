// SPDX-License-Identifier: Apache-2.0
#include "htcl/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <random>

#include "htcl/tensor_io.hpp"
#include "json_reader.hpp"

namespace htcl {

void PipelineConfig::validate() const {
  auto fail = [](const std::string& path, const std::string& msg) { throw ConfigError(path + ": " + msg); };
  if (frame_count < 1) fail("frame_count", "must be at least 1");
  if (depth.count < 1) fail("depth.count", "must be at least 1");
  if (!(depth.min > 0)) fail("depth.min", "must be positive");
  if (depth.count > 1 && !(depth.max > depth.min)) fail("depth.max", "must exceed depth.min");
  if (!(depth.logit_sigma > 0)) fail("depth.logit_sigma", "must be positive");
  if (context.group_channels < 2) fail("context.group_channels", "must be at least 2");
  if (context.norm_groups < 1 || context.group_channels % context.norm_groups) {
    fail("context.norm_groups", "must divide context.group_channels");
  }
  if (context.kernel % 2 == 0) fail("context.kernel", "must be odd");
  if (context.dilations.empty()) fail("context.dilations", "must list at least one dilation");
  for (std::size_t i = 0; i < context.dilations.size(); ++i) {
    if (context.dilations[i] == 0) fail("context.dilations[" + std::to_string(i) + "]", "must be positive");
  }
  if (deform.levels < 1) fail("deformable.levels", "must be at least 1");
  if (deform.kernel % 2 == 0) fail("deformable.kernel", "must be odd");
  if (deform.pred_kernel % 2 == 0) fail("deformable.pred_kernel", "must be odd");
  if (deform.channels < 1) fail("deformable.channels", "must be positive");
  if (deform.refined_channels < 1) fail("deformable.refined_channels", "must be positive");
  if (deform.offset_init < 0) fail("deformable.offset_init", "must be non-negative");
  if (attention.dim < 1) fail("attention.dim", "must be positive");
  if (attention.heads < 1) fail("attention.heads", "must be positive");
  if (attention.dim % attention.heads) fail("attention.heads", "must divide attention.dim");
  if (!(attention.locality_sigma > 0)) fail("attention.locality_sigma", "must be positive");
  if (upsample < 1) fail("head.upsample", "must be at least 1");
  if (training.lr < 0) fail("training.lr", "must be non-negative");
  if (training.lr_attention < 0) fail("training.lr_attention", "must be non-negative");
  if (training.lr_alpha < 0) fail("training.lr_alpha", "must be non-negative");
  if (training.lr_bias < 0) fail("training.lr_bias", "must be non-negative");
  if (training.lambda_ce < 0) fail("training.lambda_ce", "must be non-negative");
  if (training.lambda_depth < 0) fail("training.lambda_depth", "must be non-negative");
  if (training.lambda_geo < 0) fail("training.lambda_geo", "must be non-negative");
}

PipelineConfig pipeline_config_from_json(const std::string& text) {
  const auto doc = detail::parse_json(text);
  detail::JsonObject root(doc, "");
  PipelineConfig c;
  c.frame_count = root.get("frame_count", c.frame_count);
  {
    auto d = root.object("depth");
    c.depth.count = d.get("count", c.depth.count);
    c.depth.min = d.get("min", c.depth.min);
    c.depth.max = d.get("max", c.depth.max);
    const auto spacing = d.get<std::string>("spacing", "inverse");
    if (spacing != "inverse" && spacing != "uniform") {
      throw ConfigError(d.path_of("spacing") + ": expected \"inverse\" or \"uniform\"");
    }
    c.depth.inverse_spacing = spacing == "inverse";
    c.depth.logit_sigma = d.get("logit_sigma", c.depth.logit_sigma);
    d.finish();
  }
  {
    auto g = root.object("context");
    c.context.group_channels = g.get("group_channels", c.context.group_channels);
    c.context.kernel = g.get("kernel", c.context.kernel);
    c.context.norm_groups = g.get("norm_groups", c.context.norm_groups);
    c.context.dilations = g.get("dilations", c.context.dilations);
    g.finish();
  }
  {
    const auto reduce = root.get<std::string>("affinity_reduce", "mean");
    if (reduce == "mean") {
      c.affinity_reduce = AffinityReduce::mean;
    } else if (reduce == "max") {
      c.affinity_reduce = AffinityReduce::max;
    } else {
      throw ConfigError("affinity_reduce: expected \"mean\" or \"max\"");
    }
    const auto fusion = root.get<std::string>("history_fusion", "mean");
    if (fusion == "mean") {
      c.history_fusion = HistoryFusion::mean;
    } else if (fusion == "per_frame_concat") {
      c.history_fusion = HistoryFusion::per_frame_concat;
    } else {
      throw ConfigError("history_fusion: expected \"mean\" or \"per_frame_concat\"");
    }
  }
  {
    auto d = root.object("deformable");
    c.deform.levels = d.get("levels", c.deform.levels);
    c.deform.kernel = d.get("kernel", c.deform.kernel);
    c.deform.pred_kernel = d.get("pred_kernel", c.deform.pred_kernel);
    c.deform.channels = d.get("channels", c.deform.channels);
    c.deform.refined_channels = d.get("refined_channels", c.deform.refined_channels);
    c.deform.parallel_levels = d.get("parallel_levels", c.deform.parallel_levels);
    c.deform.offset_init = d.get("offset_init", c.deform.offset_init);
    d.finish();
  }
  {
    auto a = root.object("attention");
    c.attention.dim = a.get("dim", c.attention.dim);
    c.attention.heads = a.get("heads", c.attention.heads);
    const auto mode = a.get<std::string>("mode", "global");
    if (mode != "global" && mode != "local_window") {
      throw ConfigError(a.path_of("mode") + ": expected \"global\" or \"local_window\"");
    }
    c.attention.local_window = mode == "local_window";
    c.attention.positional = a.get("positional", c.attention.positional);
    c.attention.locality_sigma = a.get("locality_sigma", c.attention.locality_sigma);
    c.attention.max_queries = a.get("max_queries", c.attention.max_queries);
    c.attention.max_keys = a.get("max_keys", c.attention.max_keys);
    a.finish();
  }
  {
    auto h = root.object("head");
    c.upsample = h.get("upsample", c.upsample);
    h.finish();
  }
  {
    auto f = root.object("ablation");
    auto& a = c.ablation;
    a.scale_aware_isolation = f.get("scale_aware_isolation", a.scale_aware_isolation);
    a.multi_group = f.get("multi_group", a.multi_group);
    a.affinity_weights = f.get("affinity_weights", a.affinity_weights);
    a.deformable = f.get("deformable", a.deformable);
    a.alpha_coefficient = f.get("alpha_coefficient", a.alpha_coefficient);
    a.cross_attention = f.get("cross_attention", a.cross_attention);
    a.fixed_alpha = f.get("fixed_alpha", a.fixed_alpha);
    f.finish();
  }
  {
    auto t = root.object("training");
    c.training.steps = t.get("steps", c.training.steps);
    c.training.lr = t.get("lr", c.training.lr);
    c.training.lr_attention = t.get("lr_attention", c.training.lr_attention);
    c.training.lr_alpha = t.get("lr_alpha", c.training.lr_alpha);
    c.training.lr_bias = t.get("lr_bias", c.training.lr_bias);
    c.training.lambda_ce = t.get("lambda_ce", c.training.lambda_ce);
    c.training.lambda_depth = t.get("lambda_depth", c.training.lambda_depth);
    c.training.lambda_geo = t.get("lambda_geo", c.training.lambda_geo);
    const auto weights = t.get<std::string>("class_weights", "inverse_sqrt");
    if (weights != "inverse_sqrt" && weights != "uniform") {
      throw ConfigError(t.path_of("class_weights") + ": expected \"inverse_sqrt\" or \"uniform\"");
    }
    c.training.uniform_class_weights = weights == "uniform";
    t.finish();
  }
  c.seed = root.get("seed", c.seed);
  root.finish();
  c.validate();
  return c;
}

std::string pipeline_config_to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["frame_count"] = c.frame_count;
  j["depth"] = {{"count", c.depth.count},
                {"min", c.depth.min},
                {"max", c.depth.max},
                {"spacing", c.depth.inverse_spacing ? "inverse" : "uniform"},
                {"logit_sigma", c.depth.logit_sigma}};
  j["context"] = {{"group_channels", c.context.group_channels},
                  {"kernel", c.context.kernel},
                  {"norm_groups", c.context.norm_groups},
                  {"dilations", c.context.dilations}};
  j["affinity_reduce"] = c.affinity_reduce == AffinityReduce::mean ? "mean" : "max";
  j["history_fusion"] = c.history_fusion == HistoryFusion::mean ? "mean" : "per_frame_concat";
  j["deformable"] = {{"levels", c.deform.levels},
                     {"kernel", c.deform.kernel},
                     {"pred_kernel", c.deform.pred_kernel},
                     {"channels", c.deform.channels},
                     {"refined_channels", c.deform.refined_channels},
                     {"parallel_levels", c.deform.parallel_levels},
                     {"offset_init", c.deform.offset_init}};
  j["attention"] = {{"dim", c.attention.dim},
                    {"heads", c.attention.heads},
                    {"mode", c.attention.local_window ? "local_window" : "global"},
                    {"positional", c.attention.positional},
                    {"locality_sigma", c.attention.locality_sigma},
                    {"max_queries", c.attention.max_queries},
                    {"max_keys", c.attention.max_keys}};
  j["head"] = {{"upsample", c.upsample}};
  const auto& a = c.ablation;
  j["ablation"] = {{"scale_aware_isolation", a.scale_aware_isolation},
                   {"multi_group", a.multi_group},
                   {"affinity_weights", a.affinity_weights},
                   {"deformable", a.deformable},
                   {"alpha_coefficient", a.alpha_coefficient},
                   {"cross_attention", a.cross_attention},
                   {"fixed_alpha", a.fixed_alpha}};
  j["training"] = {{"steps", c.training.steps},
                   {"lr", c.training.lr},
                   {"lr_attention", c.training.lr_attention},
                   {"lr_alpha", c.training.lr_alpha},
                   {"lr_bias", c.training.lr_bias},
                   {"lambda_ce", c.training.lambda_ce},
                   {"lambda_depth", c.training.lambda_depth},
                   {"lambda_geo", c.training.lambda_geo},
                   {"class_weights", c.training.uniform_class_weights ? "uniform" : "inverse_sqrt"}};
  j["seed"] = c.seed;
  return j.dump(2);
}

namespace {

void fill_normal(TensorF& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& x : t.data()) x = static_cast<float>(stddev * nd(rng));
}

std::size_t history_channels(const PipelineConfig& cfg, std::size_t feat_ch) {
  return cfg.history_fusion == HistoryFusion::mean ? feat_ch : feat_ch * cfg.frame_count;
}

MultiGroupParams<float> random_context(const PipelineConfig& cfg, std::size_t in_ch, std::mt19937_64& rng) {
  auto p = make_multi_group_params<float>(in_ch, cfg.context.group_channels, cfg.context.kernel, cfg.context.dilations,
                                          cfg.context.norm_groups);
  const double k3 = double(cfg.context.kernel * cfg.context.kernel * cfg.context.kernel);
  for (auto& b : p.branches) fill_normal(b.atrous.weights, 1.0 / std::sqrt(double(in_ch) * k3), rng);
  return p;
}

}  // namespace

ModelParams init_model(const PipelineConfig& cfg, std::size_t feat_ch, std::size_t num_classes) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  ModelParams m;
  m.context = random_context(cfg, feat_ch, rng);
  const std::size_t his_ch = history_channels(cfg, feat_ch);
  if (cfg.history_fusion == HistoryFusion::per_frame_concat) m.context_his = random_context(cfg, his_ch, rng);

  const std::size_t tem_ch = feat_ch + his_ch;
  const double pk3 = double(cfg.deform.pred_kernel * cfg.deform.pred_kernel * cfg.deform.pred_kernel);
  for (std::size_t l = 0; l < cfg.deform.levels; ++l) {
    const std::size_t in = (l == 0 || cfg.deform.parallel_levels) ? tem_ch : cfg.deform.channels;
    auto dp = make_deform_params<float>(in, cfg.deform.channels, cfg.deform.kernel, cfg.deform.pred_kernel);
    fill_normal(dp.offset_conv.weights, cfg.deform.offset_init, rng);
    fill_normal(dp.weight_conv.weights, 1.0 / std::sqrt(double(in) * pk3), rng);
    fill_normal(dp.proj.weights, 4.0 / (double(dp.footprint()) * std::sqrt(double(in))), rng);
    m.levels.push_back(std::move(dp));
  }
  const std::size_t stacked = cfg.deform.levels * cfg.deform.channels;
  m.fuse = Conv3dParams<float>::pointwise(cfg.deform.refined_channels, stacked);
  fill_normal(m.fuse.weights, 1.0 / std::sqrt(double(stacked)), rng);

  const std::size_t rel = cfg.deform.refined_channels, dim = cfg.attention.dim;
  const std::size_t pos = cfg.attention.positional ? 4 : 0;
  auto& ap = m.attention;
  ap = make_attention_params<float>(feat_ch, rel, dim, cfg.attention.heads, pos);
  fill_normal(ap.q_w, 0.1 / std::sqrt(double(feat_ch + pos)), rng);
  fill_normal(ap.k_w, 0.1 / std::sqrt(double(rel + pos)), rng);
  fill_normal(ap.v_w, 1.0 / std::sqrt(double(rel)), rng);
  fill_normal(ap.out_w, 1.0 / std::sqrt(double(dim)), rng);
  const std::size_t dh = dim / cfg.attention.heads;
  if (pos && dh >= 4) {
    // Locality prior: scale * q.k = -|p_q - p_k|^2 / (2 sigma^2) + const(q) in
    // normalized coordinates, written into the first four dims of every head.
    const double a2 = std::sqrt(double(dh)) / (cfg.attention.locality_sigma * cfg.attention.locality_sigma);
    const double a = std::sqrt(a2);
    for (std::size_t h = 0; h < cfg.attention.heads; ++h) {
      const std::size_t r = h * dh;
      for (std::size_t ax = 0; ax < 3; ++ax) {
        for (std::size_t c = 0; c < feat_ch + pos; ++c) ap.q_w(r + ax, c) = 0;
        for (std::size_t c = 0; c < rel + pos; ++c) ap.k_w(r + ax, c) = 0;
        ap.q_w(r + ax, feat_ch + ax) = float(a);
        ap.k_w(r + ax, rel + ax) = float(a);
      }
      for (std::size_t c = 0; c < feat_ch + pos; ++c) ap.q_w(r + 3, c) = 0;
      for (std::size_t c = 0; c < rel + pos; ++c) ap.k_w(r + 3, c) = 0;
      ap.q_b[r + 3] = float(-a2 / 2);
      ap.k_w(r + 3, rel + 3) = 1.0f;
    }
  }
  m.concat_proj = Conv3dParams<float>::pointwise(feat_ch, feat_ch + rel);
  fill_normal(m.concat_proj.weights, 0.01, rng);
  for (std::size_t c = 0; c < feat_ch; ++c) m.concat_proj.weights(c, c, 0, 0, 0) = 1.0f;
  m.head = Conv3dParams<float>::pointwise(num_classes, feat_ch);
  fill_normal(m.head.weights, 0.1 / std::sqrt(double(feat_ch)), rng);
  return m;
}

namespace {

MultiGroupParams<float> first_branch(const MultiGroupParams<float>& p) {
  MultiGroupParams<float> q = p;
  q.branches.resize(1);
  return q;
}

}  // namespace

Stage prepare_stage(const PipelineConfig& cfg, const Scene& scene, const ModelParams& params) {
  cfg.validate();
  if (scene.frames.size() < cfg.frame_count + 1) {
    throw ConfigError("frame_count: scene provides " + std::to_string(scene.frames.size() - 1) +
                      " history frames, config asks for " + std::to_string(cfg.frame_count));
  }
  const auto& gspec = scene.grid.spec;
  for (auto d : gspec.dims) {
    if (d % cfg.upsample) throw ConfigError("head.upsample: grid dims must be divisible by the upsampling factor");
  }
  const auto& cur = scene.frames[0];
  const std::size_t h = scene.feat_h(), w = scene.feat_w();
  Stage s;
  s.hyp = cfg.depth.inverse_spacing ? DepthHypotheses::inverse_depth(cfg.depth.min, cfg.depth.max, cfg.depth.count)
                                    : DepthHypotheses::uniform(cfg.depth.min, cfg.depth.max, cfg.depth.count);

  std::vector<WarpedFrame<float>> warped;
  for (std::size_t n = 1; n <= cfg.frame_count; ++n) {
    const auto grid = build_warp_grid(cur.camera, scene.frames[n].camera, s.hyp, h, w);
    warped.push_back({int(n), warp_feature(scene.frames[n].features, grid), grid.mask});
  }
  auto his = aggregate_history(warped, s.hyp, cfg.history_fusion);
  const auto cur_vol = lift_current(cur.features, s.hyp);
  s.v_cur = cur_vol.data;
  s.v_his = his.volume.data;
  s.coverage = his.coverage;
  s.v_tem = concat_temporal(cur_vol, his.volume).data;

  const auto& ctx_cur = params.context;
  const auto& ctx_his = params.history_context();
  const MultiGroupContext<float> mc = cfg.ablation.multi_group ? multi_group_context(s.v_cur, ctx_cur)
                                                               : multi_group_context(s.v_cur, first_branch(ctx_cur));
  const MultiGroupContext<float> mh = cfg.ablation.multi_group ? multi_group_context(s.v_his, ctx_his)
                                                               : multi_group_context(s.v_his, first_branch(ctx_his));
  const auto av = cross_frame_affinity(mc, mh, cfg.ablation.scale_aware_isolation);
  s.affinity_groups = av.data;
  s.affinity = affinity_reduce(av, cfg.affinity_reduce);
  const TensorF unit = TensorF::ones(s.affinity.shape());
  auto block = multi_level_block(s.v_tem, cfg.ablation.affinity_weights ? s.affinity : unit, params.levels, params.fuse,
                                 {cfg.ablation.deformable, cfg.deform.parallel_levels});
  s.levels = std::move(block.levels);
  s.stacked = std::move(block.stacked);

  const std::size_t D = s.hyp.count();
  s.depth_logits = TensorF::zeros({D, h, w});
  s.depth_bins.assign(h * w, -1);
  const double inv2s2 = 1.0 / (2 * cfg.depth.logit_sigma * cfg.depth.logit_sigma);
  for (std::size_t v = 0; v < h; ++v)
    for (std::size_t u = 0; u < w; ++u) {
      const double z = cur.depth(v, u);
      const double ci = z > 0 ? s.hyp.continuous_index(z) : -1;
      if (ci < 0) continue;
      s.depth_bins[v * w + u] = int(s.hyp.nearest(z));
      for (std::size_t j = 0; j < D; ++j) s.depth_logits(j, v, u) = float(-(double(j) - ci) * (double(j) - ci) * inv2s2);
    }
  s.depth_dist = depth_distribution(s.depth_logits);

  s.coarse = gspec.coarsened(cfg.upsample);
  const auto plan = make_splat_plan(cur.camera, s.hyp, h, w, s.coarse);
  s.v_vox = lift_splat(cur.features, s.depth_dist, plan);
  if (cfg.attention.positional) {
    s.pe.query = voxel_positions<float>(s.coarse);
    s.pe.key = temporal_positions<float>(cur.camera, s.hyp, h, w, s.coarse);
  }
  s.vox_coords = voxel_to_temporal_coords<float>(cur.camera, s.hyp, h, w, s.coarse);
  return s;
}

namespace {

AttentionParams<float> effective_attention(const PipelineConfig& cfg, const ModelParams& p) {
  AttentionParams<float> ap = p.attention;
  if (!cfg.ablation.alpha_coefficient) ap.alpha = float(cfg.ablation.fixed_alpha);
  return ap;
}

AttentionLimits limits_of(const PipelineConfig& cfg) {
  return {cfg.attention.max_queries, cfg.attention.max_keys, cfg.attention.local_window};
}

}  // namespace

TailOutput forward_tail(const PipelineConfig& cfg, const Stage& stage, const ModelParams& params,
                        AttentionCache<float>* cache) {
  TailOutput t;
  t.refined = conv3d(stage.stacked, params.fuse);
  if (cfg.ablation.cross_attention) {
    AttentionCache<float> local;
    AttentionCache<float>& c = cache ? *cache : local;
    t.v_ret = weighted_cross_attention(stage.v_vox, t.refined, effective_attention(cfg, params), stage.pe,
                                       limits_of(cfg), &c);
    t.cross = c.cross;
  } else {
    t.cross = trilinear_sample(t.refined, stage.vox_coords);
    t.v_ret = conv3d(concat<float>({stage.v_vox, t.cross}, 0), params.concat_proj);
  }
  t.head = ssc_head(t.v_ret, params.head, cfg.upsample);
  return t;
}

namespace {

std::vector<double> class_weights(const PipelineConfig& cfg, const VoxelGrid& gt) {
  const std::size_t K = gt.spec.num_classes;
  std::vector<double> w(K, 1.0);
  if (cfg.training.uniform_class_weights) return w;
  std::vector<std::size_t> counts(K, 0);
  std::size_t total = 0;
  for (auto l : gt.labels) {
    if (l == gt.spec.ignore_label || l >= K) continue;
    ++counts[l];
    ++total;
  }
  for (std::size_t c = 0; c < K; ++c) w[c] = std::sqrt(double(total) / (double(K) * double(std::max<std::size_t>(counts[c], 1))));
  return w;
}

struct LossEval {
  LossBreakdown breakdown;
  TensorF grad_logits;
};

LossEval evaluate_loss(const PipelineConfig& cfg, const Stage& stage, const TailOutput& tail, const VoxelGrid& gt,
                       const std::vector<double>& weights) {
  LossEval e;
  const auto ce = weighted_ce(tail.head.probs, gt.labels, weights, gt.spec.ignore_label);
  double depth = 0;
  bool any_depth = false;
  for (int b : stage.depth_bins) any_depth |= b >= 0;
  if (any_depth) depth = depth_bce(stage.depth_dist, stage.depth_bins).value;
  e.grad_logits = elementwise(ElementwiseOp::scale, ce.grad, float(cfg.training.lambda_ce));
  std::vector<LossTerm> terms{{"depth", depth, cfg.training.lambda_depth}, {"ce", ce.value, cfg.training.lambda_ce}};
  if (cfg.training.lambda_geo > 0) {
    const auto geo = occupancy_bce(tail.head.probs, gt.labels, gt.spec.ignore_label);
    terms.push_back({"geo", geo.value, cfg.training.lambda_geo});
    for (std::size_t i = 0; i < e.grad_logits.size(); ++i) {
      e.grad_logits[i] += float(cfg.training.lambda_geo) * geo.grad[i];
    }
  }
  e.breakdown = total_loss(terms);
  return e;
}

void descend(TensorF& p, const TensorF& g, float lr) {
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg, const Scene& scene, const ModelParams& params) {
  const auto t0 = std::chrono::steady_clock::now();
  PipelineResult r;
  r.stage = prepare_stage(cfg, scene, params);
  r.tail = forward_tail(cfg, r.stage, params);
  r.prediction = argmax_labels(r.tail.head.probs, scene.grid.spec);
  r.report = compute_iou(r.prediction, scene.grid);
  r.loss = evaluate_loss(cfg, r.stage, r.tail, scene.grid, class_weights(cfg, scene.grid)).breakdown;
  r.seconds = seconds_since(t0);
  return r;
}

std::vector<std::pair<std::string, const TensorF*>> intermediates(const PipelineResult& r) {
  std::vector<std::pair<std::string, const TensorF*>> out{
      {"v_cur", &r.stage.v_cur},       {"v_his", &r.stage.v_his},     {"v_tem", &r.stage.v_tem},
      {"affinity_groups", &r.stage.affinity_groups}, {"affinity", &r.stage.affinity}};
  for (std::size_t l = 0; l < r.stage.levels.size(); ++l) {
    out.emplace_back("level_" + std::to_string(l), &r.stage.levels[l]);
  }
  out.insert(out.end(), {{"stacked", &r.stage.stacked},
                         {"refined", &r.tail.refined},
                         {"depth_dist", &r.stage.depth_dist},
                         {"v_vox", &r.stage.v_vox},
                         {"cross", &r.tail.cross},
                         {"v_ret", &r.tail.v_ret},
                         {"probs", &r.tail.head.probs}});
  return out;
}

void dump_volumes(const PipelineResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dump directory " + dir.string());
  for (const auto& [name, t] : intermediates(r)) write_tensor(dir / (name + ".htcv"), *t);
  write_voxel_grid(dir / "pred.htvg", r.prediction);
}

void dump_affinity(const PipelineResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create heatmap directory " + dir.string());
  const auto& a = r.stage.affinity;
  const std::size_t D = a.dim(0), h = a.dim(1), w = a.dim(2);
  for (std::size_t j = 0; j < D; ++j) {
    TensorF slice({h, w});
    std::copy_n(a.raw() + j * h * w, h * w, slice.raw());
    export_heatmap(slice, dir / ("affinity_d" + std::to_string(j) + ".pgm"));
  }
}

TrainResult train_desk(const PipelineConfig& cfg, const Scene& scene, const ModelParams& init) {
  TrainResult r;
  r.params = init;
  ModelParams& p = r.params;
  const Stage stage = prepare_stage(cfg, scene, p);
  const auto weights = class_weights(cfg, scene.grid);
  const float lr = float(cfg.training.lr);
  const float lr_att = float(cfg.training.lr_attention);
  const float lr_alpha = float(cfg.training.lr_alpha);
  const float lr_bias = float(cfg.training.lr_bias);
  const auto& gt = scene.grid;

  for (std::size_t step = 0;; ++step) {
    AttentionCache<float> cache;
    TailOutput tail;
    LossEval loss;
    try {
      tail = forward_tail(cfg, stage, p, &cache);
      loss = evaluate_loss(cfg, stage, tail, gt, weights);
    } catch (const ValueError& e) {
      throw ValueError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss.breakdown.total)) {
      throw ValueError("training diverged at step " + std::to_string(step) + " (loss is not finite)");
    }
    r.loss_curve.push_back(loss.breakdown.total);
    if (step == 0) r.initial = compute_iou(argmax_labels(tail.head.probs, gt.spec), gt);
    if (step == cfg.training.steps) {
      r.last.stage = stage;
      r.last.tail = tail;
      r.last.prediction = argmax_labels(tail.head.probs, gt.spec);
      r.last.report = compute_iou(r.last.prediction, gt);
      r.last.loss = loss.breakdown;
      r.final = r.last.report;
      break;
    }
    const auto head = conv3d_backward(tail.head.upsampled, p.head, loss.grad_logits);
    const TensorF g_ret = upsample_trilinear_backward(tail.v_ret.shape(), cfg.upsample, head.input);
    // A gate frozen at 0 passes no gradient into the attention branch.
    const bool gate_closed = !cfg.ablation.alpha_coefficient && cfg.ablation.fixed_alpha == 0.0;
    TensorF g_refined;
    if (cfg.ablation.cross_attention && gate_closed) {
      // V_ret is V_vox alone, which is frozen
    } else if (cfg.ablation.cross_attention) {
      const auto ag = attention_backward(g_ret, stage.v_vox, tail.refined, effective_attention(cfg, p), cache);
      auto& ap = p.attention;
      descend(ap.q_w, ag.q_w, lr_att);
      descend(ap.q_b, ag.q_b, lr_bias);
      descend(ap.k_w, ag.k_w, lr_att);
      descend(ap.k_b, ag.k_b, lr_bias);
      descend(ap.v_w, ag.v_w, lr_att);
      descend(ap.v_b, ag.v_b, lr_bias);
      descend(ap.out_w, ag.out_w, lr_att);
      descend(ap.out_b, ag.out_b, lr_bias);
      if (cfg.ablation.alpha_coefficient) ap.alpha -= lr_alpha * ag.alpha;
      g_refined = ag.rel;
    } else {
      const TensorF cat = concat<float>({stage.v_vox, tail.cross}, 0);
      const auto cg = conv3d_backward(cat, p.concat_proj, g_ret);
      const auto parts = split(cg.input, 0, {stage.v_vox.dim(0), tail.cross.dim(0)});
      g_refined = trilinear_sample_backward(tail.refined, stage.vox_coords, parts[1]).volume;
      descend(p.concat_proj.weights, cg.weights, lr);
      descend(p.concat_proj.bias, cg.bias, lr_bias);
    }
    if (!(cfg.ablation.cross_attention && gate_closed)) {
      const auto fg = conv3d_backward(stage.stacked, p.fuse, g_refined);
      descend(p.fuse.weights, fg.weights, lr_att);
      descend(p.fuse.bias, fg.bias, lr_bias);
    }
    descend(p.head.weights, head.weights, lr);
    descend(p.head.bias, head.bias, lr_bias);
  }
  return r;
}

namespace {

std::vector<std::pair<std::string, PipelineConfig>> ablation_matrix(const PipelineConfig& base) {
  std::vector<std::pair<std::string, PipelineConfig>> rows{{"full", base}};
  auto add = [&](const std::string& name, bool AblationFlags::*flag) {
    PipelineConfig c = base;
    c.ablation.*flag = false;
    rows.emplace_back("no_" + name, c);
  };
  add("scale_aware_isolation", &AblationFlags::scale_aware_isolation);
  add("multi_group", &AblationFlags::multi_group);
  add("affinity_weights", &AblationFlags::affinity_weights);
  add("deformable", &AblationFlags::deformable);
  add("alpha_coefficient", &AblationFlags::alpha_coefficient);
  add("cross_attention", &AblationFlags::cross_attention);
  return rows;
}

}  // namespace

std::vector<AblationRow> ablate(const PipelineConfig& cfg, const Scene& scene) {
  std::vector<AblationRow> out;
  for (const auto& [name, c] : ablation_matrix(cfg)) {
    const auto tr = train_desk(c, scene, init_model(c, scene.feature_channels(), scene.grid.spec.num_classes));
    out.push_back({name, c, tr.final, tr.loss_curve.back()});
  }
  return out;
}

std::vector<SweepRow> sweep_frames(const PipelineConfig& cfg, const Scene& scene, std::size_t first,
                                   std::size_t last) {
  if (first < 1 || last < first) throw ConfigError("frames: expected a range a..b with 1 <= a <= b");
  std::vector<SweepRow> out;
  for (std::size_t f = first; f <= last; ++f) {
    const auto t0 = std::chrono::steady_clock::now();
    PipelineConfig c = cfg;
    c.frame_count = f;
    const auto tr = train_desk(c, scene, init_model(c, scene.feature_channels(), scene.grid.spec.num_classes));
    out.push_back({f, tr.final, seconds_since(t0)});
  }
  return out;
}

namespace {

nlohmann::json metric_json(const MetricReport& m) { return nlohmann::json::parse(m.to_json()); }

}  // namespace

std::string ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"name", r.name}, {"metrics", metric_json(r.report)}, {"final_loss", r.final_loss}});
  return nlohmann::json{{"ablation", j}}.dump(2);
}

std::string sweep_json(const std::vector<SweepRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"frames", r.frames}, {"metrics", metric_json(r.report)}, {"seconds", r.seconds}});
  return nlohmann::json{{"sweep", j}}.dump(2);
}

std::string train_json(const TrainResult& r) {
  nlohmann::json j;
  j["initial"] = metric_json(r.initial);
  j["final"] = metric_json(r.final);
  j["loss_curve"] = r.loss_curve;
  j["alpha"] = r.params.attention.alpha;
  return j.dump(2);
}

std::string run_json(const PipelineResult& r) {
  nlohmann::json j = metric_json(r.report);
  nlohmann::json loss;
  for (const auto& t : r.loss.terms) loss[t.name] = t.value;
  loss["total"] = r.loss.total;
  j["loss"] = loss;
  j["seconds"] = r.seconds;
  return j.dump(2);
}

}  // namespace htcl
