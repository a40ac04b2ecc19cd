// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <vector>

#include "htcl/ops.hpp"
#include "htcl/tensor.hpp"

namespace htcl {

/// Parameters of one affinity-weighted deformable sampling level.
template <typename T>
struct DeformParams {
  Conv3dParams<T> offset_conv;                // C -> 3 * K channels, (d, h, w) per point
  Conv3dParams<T> weight_conv;                // C -> K channels, sigmoid-activated
  std::vector<std::array<int, 3>> base_grid;  // K fixed footprint offsets p_k
  Conv3dParams<T> proj;                       // 1x1x1 channel mixing after sampling

  std::size_t footprint() const { return base_grid.size(); }
  std::size_t in_channels() const { return offset_conv.in_channels(); }
  std::size_t out_channels() const { return proj.out_channels(); }
};

/// Regular k^3 footprint in lexicographic (d, h, w) order, centered on 0.
std::vector<std::array<int, 3>> cubic_footprint(std::size_t kernel);

/// Zero-initialized level with a k^3 footprint and pred_kernel^3 predictors.
template <typename T>
DeformParams<T> make_deform_params(std::size_t in_ch, std::size_t out_ch, std::size_t kernel = 3,
                                   std::size_t pred_kernel = 3);

template <typename T>
struct OffsetsWeights {
  Tensor<T> offsets;  // [K, 3, D, h, w]
  Tensor<T> weights;  // [K, D, h, w], in (0, 1)
};

template <typename T>
OffsetsWeights<T> predict_offsets_weights(const Tensor<T>& volume, const DeformParams<T>& dp);

/// sum_k w_k(p) * V(p + p_k + dp_k(p)) * a(p + p_k + dp_k(p)) before channel
/// mixing. The affinity map is sampled trilinearly at the displaced point.
template <typename T>
Tensor<T> deformable_gather(const Tensor<T>& volume, const Tensor<T>& offsets, const Tensor<T>& weights,
                            const Tensor<T>& affinity, const std::vector<std::array<int, 3>>& base_grid);

/// deformable_gather followed by dp.proj.
template <typename T>
Tensor<T> deformable_sample(const Tensor<T>& volume, const Tensor<T>& offsets, const Tensor<T>& weights,
                            const Tensor<T>& affinity, const DeformParams<T>& dp);

template <typename T>
struct DeformGrads {
  Tensor<T> volume;
  Tensor<T> offsets;
  Tensor<T> weights;
  Tensor<T> affinity;
  Tensor<T> proj_weights;
  Tensor<T> proj_bias;
};

/// Analytic gradients of deformable_sample given the upstream gradient of
/// its output. Coordinate derivatives use the piecewise-linear trilinear slope.
template <typename T>
DeformGrads<T> deformable_sample_backward(const Tensor<T>& grad_out, const Tensor<T>& volume, const Tensor<T>& offsets,
                                          const Tensor<T>& weights, const Tensor<T>& affinity,
                                          const DeformParams<T>& dp);

struct BlockOptions {
  bool deformable = true;        // false: offsets forced to 0 (regular footprint)
  bool parallel_levels = false;  // false: level l + 1 consumes level l's output
};

template <typename T>
struct BlockOutput {
  std::vector<Tensor<T>> levels;  // per-level deformable outputs
  Tensor<T> stacked;              // levels concatenated on channels
  Tensor<T> refined;              // fuse(stacked)
};

/// Three (or more) cascaded deformable levels, channel concatenation, and a
/// 1x1x1 reduction `fuse`.
template <typename T>
BlockOutput<T> multi_level_block(const Tensor<T>& volume, const Tensor<T>& affinity,
                                 const std::vector<DeformParams<T>>& levels, const Conv3dParams<T>& fuse,
                                 const BlockOptions& opts = {});

}  // namespace htcl
