// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "htcl/camera.hpp"
#include "htcl/tensor.hpp"

namespace htcl {

enum class VolumeKind { current, historical, combined };

enum class HistoryFusion { mean, per_frame_concat };

/// Feature volume [C, D, h, w] over a set of depth planes.
template <typename T>
struct TemporalVolume {
  Tensor<T> data;
  DepthHypotheses hyp;
  VolumeKind kind = VolumeKind::current;
  std::size_t current_channels = 0;  // set for combined volumes

  std::size_t channels() const { return data.dim(0); }
};

/// One historical frame after plane-sweep warping into the current view.
template <typename T>
struct WarpedFrame {
  int frame_index = 0;
  Tensor<T> features;  // [C, D, h, w]
  Mask mask;           // [D, h, w]
};

template <typename T>
struct HistoryVolume {
  TemporalVolume<T> volume;
  Tensor<std::uint32_t> coverage;  // valid-frame count per [D, h, w] cell
};

/// Replicates F_t [C, h, w] over every depth plane.
template <typename T>
TemporalVolume<T> lift_current(const Tensor<T>& features, const DepthHypotheses& hyp);

/// Fuses warped history frames. `mean` averages the frames valid at each
/// cell (0 where none is valid), accumulating in ascending frame_index order;
/// `per_frame_concat` stacks the masked frames on the channel axis in the
/// same order.
template <typename T>
HistoryVolume<T> aggregate_history(const std::vector<WarpedFrame<T>>& warped, const DepthHypotheses& hyp,
                                   HistoryFusion fusion = HistoryFusion::mean);

/// Channel concatenation, current channels first.
template <typename T>
TemporalVolume<T> concat_temporal(const TemporalVolume<T>& cur, const TemporalVolume<T>& his);

}  // namespace htcl
