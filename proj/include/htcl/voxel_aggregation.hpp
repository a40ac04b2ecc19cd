// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "htcl/camera.hpp"
#include "htcl/ops.hpp"
#include "htcl/tensor.hpp"

namespace htcl {

/// Axis-aligned voxel grid in current-camera coordinates (x right, y down,
/// z forward). Voxel (i, j, k) spans origin + [i, i+1) * voxel_size on x, etc.
struct VoxelGridSpec {
  std::array<std::size_t, 3> dims{1, 1, 1};
  double voxel_size = 0.2;
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  std::uint8_t num_classes = 2;  // including the free class 0
  std::uint8_t ignore_label = 255;

  void validate() const;
  std::size_t count() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t flat(std::size_t i, std::size_t j, std::size_t k) const { return (i * dims[1] + j) * dims[2] + k; }
  Eigen::Vector3d center(std::size_t i, std::size_t j, std::size_t k) const;
  /// Flat index of the voxel containing `p`, or -1 outside the grid.
  long locate(const Eigen::Vector3d& p) const;
  /// Same extent with dims / factor and voxel_size * factor.
  VoxelGridSpec coarsened(std::size_t factor) const;

  friend bool operator==(const VoxelGridSpec&, const VoxelGridSpec&) = default;
};

/// Semantic labels, X outermost.
struct VoxelGrid {
  VoxelGridSpec spec;
  std::vector<std::uint8_t> labels;

  explicit VoxelGrid(VoxelGridSpec s = {}, std::uint8_t fill = 0) : spec(s), labels(s.count(), fill) {}
  std::uint8_t& at(std::size_t i, std::size_t j, std::size_t k) { return labels[spec.flat(i, j, k)]; }
  std::uint8_t at(std::size_t i, std::size_t j, std::size_t k) const { return labels[spec.flat(i, j, k)]; }
};

// "HTVG", u32 version = 1, 3 x u32 dims, f32 voxel_size, 3 x f32 origin,
// u8 num_classes, u8 ignore_label, X*Y*Z u8 labels.
void write_voxel_grid(const std::filesystem::path& path, const VoxelGrid& grid);
VoxelGrid read_voxel_grid(const std::filesystem::path& path);

/// Softmax over D of [D, h, w] logits.
template <typename T>
Tensor<T> depth_distribution(const Tensor<T>& logits);

/// Geometry of a lift-splat: the voxel hit by every (plane, pixel) cell and,
/// per voxel, the cells landing in it in ascending order.
struct SplatPlan {
  VoxelGridSpec spec;
  std::size_t planes = 0, feat_h = 0, feat_w = 0;
  std::vector<long> voxel_of;         // [D * h * w], -1 when outside the grid
  std::vector<std::size_t> row_start;  // [voxels + 1]
  std::vector<std::size_t> cells;      // cell ids grouped per voxel

  std::size_t hits(std::size_t voxel) const { return row_start[voxel + 1] - row_start[voxel]; }
};

SplatPlan make_splat_plan(const CameraFrame& cam, const DepthHypotheses& hyp, std::size_t feat_h, std::size_t feat_w,
                          const VoxelGridSpec& spec);

/// Scatter-add of context(:, u, v) * dist(j, u, v) into voxels, before normalization.
template <typename T>
Tensor<T> splat_sum(const Tensor<T>& context, const Tensor<T>& depth_dist, const SplatPlan& plan);

/// Mean splat: splat_sum divided by each voxel's hit count. Output [C, X, Y, Z].
template <typename T>
Tensor<T> lift_splat(const Tensor<T>& context, const Tensor<T>& depth_dist, const SplatPlan& plan);

template <typename T>
Tensor<T> lift_splat(const Tensor<T>& context, const Tensor<T>& depth_dist, const CameraFrame& cam,
                     const DepthHypotheses& hyp, const VoxelGridSpec& spec);

/// Projections are stored [out, in] with separate bias vectors.
template <typename T>
struct AttentionParams {
  Tensor<T> q_w, q_b;      // [dim, C + P], [dim]
  Tensor<T> k_w, k_b;      // [dim, C' + P], [dim]
  Tensor<T> v_w, v_b;      // [dim, C'], [dim]
  Tensor<T> out_w, out_b;  // [C, dim], [C]
  T alpha = T(0);
  std::size_t heads = 1;

  std::size_t dim() const { return q_w.dim(0); }
};

/// Zero projections, alpha = 0.
template <typename T>
AttentionParams<T> make_attention_params(std::size_t vox_ch, std::size_t rel_ch, std::size_t dim, std::size_t heads,
                                         std::size_t pos_ch);

/// Extra query/key input channels (empty tensors mean none).
template <typename T>
struct PositionalEncoding {
  Tensor<T> query;  // [P, X, Y, Z]
  Tensor<T> key;    // [P, D, h, w]
  std::size_t channels() const { return query.empty() ? 0 : query.dim(0); }
};

struct AttentionLimits {
  std::size_t max_queries = 1 << 14;
  std::size_t max_keys = 1 << 15;
  bool local_window = false;
};

/// Saved forward state for attention_backward.
template <typename T>
struct AttentionCache {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  Mat xq, xk, xv;         // inputs, channels x tokens
  Mat q, k, v;            // projections, dim x tokens
  std::vector<Mat> probs;  // per head, keys x queries
  Mat context;            // dim x queries
  Tensor<T> cross;        // CrossAtt output [C, X, Y, Z]
};

/// V_ret = alpha * CrossAtt(Q, K, V) + V_vox with queries from voxels and
/// keys/values from temporal cells. Scores are scaled by 1 / sqrt(head dim).
template <typename T>
Tensor<T> weighted_cross_attention(const Tensor<T>& vox, const Tensor<T>& rel, const AttentionParams<T>& ap,
                                   const PositionalEncoding<T>& pe = {}, const AttentionLimits& limits = {},
                                   AttentionCache<T>* cache = nullptr);

template <typename T>
struct AttentionGrads {
  Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
  T alpha = T(0);
  Tensor<T> vox, rel;
};

template <typename T>
AttentionGrads<T> attention_backward(const Tensor<T>& grad_ret, const Tensor<T>& vox, const Tensor<T>& rel,
                                     const AttentionParams<T>& ap, const AttentionCache<T>& cache);

/// Voxel-center coordinates relative to the grid center, divided by half the
/// longest grid extent, and their squared norm; [4, X, Y, Z].
template <typename T>
Tensor<T> voxel_positions(const VoxelGridSpec& spec);

/// Same encoding for the 3D points of temporal cells, [4, D, h, w].
template <typename T>
Tensor<T> temporal_positions(const CameraFrame& cam, const DepthHypotheses& hyp, std::size_t feat_h,
                             std::size_t feat_w, const VoxelGridSpec& spec);

/// Continuous (plane, row, col) coordinates of every voxel center inside the
/// temporal volume, [X, Y, Z, 3]; voxels outside the frustum get -1.
template <typename T>
Tensor<T> voxel_to_temporal_coords(const CameraFrame& cam, const DepthHypotheses& hyp, std::size_t feat_h,
                                   std::size_t feat_w, const VoxelGridSpec& spec);

template <typename T>
struct SscHeadOutput {
  Tensor<T> upsampled;  // [C, X', Y', Z']
  Tensor<T> logits;     // [num_classes, X', Y', Z']
  Tensor<T> probs;
};

/// Trilinear upsampling, 1x1x1 class projection, softmax over classes.
template <typename T>
SscHeadOutput<T> ssc_head(const Tensor<T>& ret, const Conv3dParams<T>& head, std::size_t upsample_factor);

/// Per-voxel argmax, ties to the lowest class index.
template <typename T>
VoxelGrid argmax_labels(const Tensor<T>& probs, const VoxelGridSpec& spec);

}  // namespace htcl
