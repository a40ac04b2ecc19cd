// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "htcl/dynamic_refinement.hpp"
#include "htcl/losses_metrics.hpp"
#include "htcl/pattern_affinity.hpp"
#include "htcl/scene.hpp"
#include "htcl/temporal_volume.hpp"
#include "htcl/voxel_aggregation.hpp"

namespace htcl {

struct DepthConfig {
  std::size_t count = 16;
  double min = 1.0, max = 10.0;
  bool inverse_spacing = true;
  double logit_sigma = 0.5;  // width of the synthetic depth logits, in planes
};

struct ContextConfig {
  std::size_t group_channels = 8;
  std::size_t kernel = 3;
  std::size_t norm_groups = 2;
  std::vector<std::size_t> dilations{1, 2, 4};
};

struct DeformConfig {
  std::size_t levels = 3;
  std::size_t kernel = 3;
  std::size_t pred_kernel = 3;
  std::size_t channels = 16;  // per-level output channels
  std::size_t refined_channels = 8;
  bool parallel_levels = false;
  double offset_init = 0.1;  // std of the offset predictor weights
};

struct AttentionConfig {
  std::size_t dim = 16;
  std::size_t heads = 1;
  bool local_window = false;
  bool positional = true;
  double locality_sigma = 0.125;  // initial width of the positional prior, in positional-encoding units
  std::size_t max_queries = 1 << 14;
  std::size_t max_keys = 1 << 15;
};

/// Each flag on is the full model; off substitutes the matching baseline.
struct AblationFlags {
  bool scale_aware_isolation = true;  // off: plain cosine similarity
  bool multi_group = true;            // off: first dilation only
  bool affinity_weights = true;       // off: unit affinity
  bool deformable = true;             // off: zero offsets
  bool alpha_coefficient = true;      // off: alpha fixed at fixed_alpha, untrained
  bool cross_attention = true;        // off: concatenation and 1x1x1 projection
  double fixed_alpha = 1.0;
};

struct TrainingConfig {
  std::size_t steps = 200;
  double lr = 200.0;            // head and concatenation projection weights
  double lr_attention = 0.001;  // attention projection and fuse weights
  double lr_bias = 2.0;         // every bias vector
  double lr_alpha = 0.001;
  double lambda_ce = 1.0;
  double lambda_depth = 1.0;
  double lambda_geo = 0.0;
  bool uniform_class_weights = false;  // default: inverse square-root frequency
};

struct PipelineConfig {
  std::size_t frame_count = 3;
  DepthConfig depth;
  ContextConfig context;
  AffinityReduce affinity_reduce = AffinityReduce::mean;
  HistoryFusion history_fusion = HistoryFusion::mean;
  DeformConfig deform;
  AttentionConfig attention;
  std::size_t upsample = 2;
  AblationFlags ablation;
  TrainingConfig training;
  std::uint64_t seed = 7;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Strict JSON parsing: unknown keys and type mismatches raise ConfigError
/// with the field path.
PipelineConfig pipeline_config_from_json(const std::string& text);
std::string pipeline_config_to_json(const PipelineConfig& cfg);

struct ModelParams {
  MultiGroupParams<float> context;      // current frame
  MultiGroupParams<float> context_his;  // history; unused (shared weights) when empty
  std::vector<DeformParams<float>> levels;
  Conv3dParams<float> fuse;
  AttentionParams<float> attention;
  Conv3dParams<float> concat_proj;
  Conv3dParams<float> head;

  const MultiGroupParams<float>& history_context() const {
    return context_his.branches.empty() ? context : context_his;
  }
};

/// Seeded initialization for a scene with `feat_ch` feature channels.
ModelParams init_model(const PipelineConfig& cfg, std::size_t feat_ch, std::size_t num_classes);

/// Frozen stage outputs ahead of the trainable tail.
struct Stage {
  DepthHypotheses hyp;
  VoxelGridSpec coarse;
  TensorF v_cur, v_his, v_tem;
  Tensor<std::uint32_t> coverage;
  TensorF affinity_groups;  // [G, D, h, w]
  TensorF affinity;         // [D, h, w] as consumed by the refinement
  std::vector<TensorF> levels;
  TensorF stacked;
  TensorF depth_logits, depth_dist;
  std::vector<int> depth_bins;
  TensorF v_vox;
  PositionalEncoding<float> pe;
  TensorF vox_coords;  // [X', Y', Z', 3] voxel centers inside the temporal volume
};

Stage prepare_stage(const PipelineConfig& cfg, const Scene& scene, const ModelParams& params);

struct TailOutput {
  TensorF refined;
  TensorF cross;  // attention (or concatenation) branch before gating
  TensorF v_ret;
  SscHeadOutput<float> head;
};

TailOutput forward_tail(const PipelineConfig& cfg, const Stage& stage, const ModelParams& params,
                        AttentionCache<float>* cache = nullptr);

struct PipelineResult {
  Stage stage;
  TailOutput tail;
  VoxelGrid prediction;
  MetricReport report;
  LossBreakdown loss;
  double seconds = 0;
};

PipelineResult run_pipeline(const PipelineConfig& cfg, const Scene& scene, const ModelParams& params);

/// Every intermediate tensor as <name>.htcv plus pred.htvg.
void dump_volumes(const PipelineResult& r, const std::filesystem::path& dir);
/// Reduced affinity per depth plane as affinity_d<j>.pgm.
void dump_affinity(const PipelineResult& r, const std::filesystem::path& dir);

/// Named intermediate tensors in a fixed order (used by dumps and liveness checks).
std::vector<std::pair<std::string, const TensorF*>> intermediates(const PipelineResult& r);

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_curve;  // total loss before each update, then after the last
  MetricReport initial, final;
  PipelineResult last;
};

/// Plain gradient descent on the head, attention projections, alpha, the
/// fuse projection and the concatenation projection.
TrainResult train_desk(const PipelineConfig& cfg, const Scene& scene, const ModelParams& init);

struct AblationRow {
  std::string name;
  PipelineConfig cfg;
  MetricReport report;
  double final_loss = 0;
};

/// Full model plus every flag toggled off alone.
std::vector<AblationRow> ablate(const PipelineConfig& cfg, const Scene& scene);

struct SweepRow {
  std::size_t frames = 0;
  MetricReport report;
  double seconds = 0;
};

std::vector<SweepRow> sweep_frames(const PipelineConfig& cfg, const Scene& scene, std::size_t first,
                                   std::size_t last);

std::string ablation_json(const std::vector<AblationRow>& rows);
std::string sweep_json(const std::vector<SweepRow>& rows);
std::string train_json(const TrainResult& r);
std::string run_json(const PipelineResult& r);

}  // namespace htcl
