// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "htcl/tensor.hpp"
#include "htcl/voxel_aggregation.hpp"

namespace htcl {

struct ClassCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// per_class_iou[i] and counts[i] describe semantic class i + 1 (class 0 is
/// free space). Classes with TP + FP + FN = 0 report 0 and are left out of miou.
struct MetricReport {
  double iou = 0;
  double miou = 0;
  std::vector<double> per_class_iou;
  std::vector<ClassCounts> counts;
  std::vector<bool> present;

  /// {"iou": ..., "miou": ..., "per_class": [...]}
  std::string to_json() const;
};

MetricReport compute_iou(const VoxelGrid& pred, const VoxelGrid& gt);

/// Loss value with its gradient w.r.t. the logits that produced `probs`.
template <typename T>
struct LossGrad {
  double value = 0;
  Tensor<T> grad;
};

/// Mean over non-ignored positions of -w[y] * log(p[y]). probs is [K, ...]
/// normalized over axis 0; labels has one entry per trailing position.
template <typename T>
LossGrad<T> weighted_ce(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                        std::span<const double> class_weights, std::uint8_t ignore_label);

/// weighted_ce with every weight equal to 1.
template <typename T>
LossGrad<T> cross_entropy(const Tensor<T>& probs, std::span<const std::uint8_t> labels, std::uint8_t ignore_label);

/// Binary occupancy cross-entropy with p(occupied) = 1 - probs[0].
template <typename T>
LossGrad<T> occupancy_bce(const Tensor<T>& probs, std::span<const std::uint8_t> labels, std::uint8_t ignore_label);

/// Per-bin binary cross-entropy against a one-hot target at gt_bin, averaged
/// over bins and valid pixels. gt_bin is [h * w] with -1 marking invalid pixels.
template <typename T>
LossGrad<T> depth_bce(const Tensor<T>& depth_dist, std::span<const int> gt_bin);

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Per-pixel SSIM over 3x3 reflection-padded windows, averaged over channels.
template <typename T>
Tensor<T> ssim_map(const Tensor<T>& a, const Tensor<T>& b);

/// lambda * clamp((1 - SSIM) / 2, 0, 1) + (1 - lambda) * mean_c |a - b|, [h, w].
template <typename T>
Tensor<T> photometric_error(const Tensor<T>& target, const Tensor<T>& warped, double lambda_ssim = 0.85);

/// Edge-aware first-order smoothness: mean |dx d| exp(-|dx I|) plus
/// mean |dy d| exp(-|dy I|) with forward differences.
template <typename T>
double smoothness(const Tensor<T>& depth, const Tensor<T>& image);

struct LossTerm {
  std::string name;
  double value = 0;
  double lambda = 1;
};

struct LossBreakdown {
  std::vector<LossTerm> terms;
  double total = 0;
};

LossBreakdown total_loss(const std::vector<LossTerm>& terms);

}  // namespace htcl
