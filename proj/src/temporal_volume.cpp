// SPDX-License-Identifier: Apache-2.0
#include "htcl/temporal_volume.hpp"

#include <algorithm>
#include <numeric>

#include "htcl/ops.hpp"
#include "htcl/parallel.hpp"

namespace htcl {

template <typename T>
TemporalVolume<T> lift_current(const Tensor<T>& features, const DepthHypotheses& hyp) {
  if (features.ndim() != 3) throw ShapeError("lift_current: features must be [C, h, w]");
  const std::size_t C = features.dim(0), h = features.dim(1), w = features.dim(2), D = hyp.count();
  Tensor<T> data({C, D, h, w});
  const std::size_t plane = h * w;
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = features.raw() + c * plane;
    for (std::size_t j = 0; j < D; ++j) std::copy_n(src, plane, data.raw() + (c * D + j) * plane);
  }
  return {std::move(data), hyp, VolumeKind::current, 0};
}

template <typename T>
HistoryVolume<T> aggregate_history(const std::vector<WarpedFrame<T>>& warped, const DepthHypotheses& hyp,
                                   HistoryFusion fusion) {
  if (warped.empty()) throw ShapeError("aggregate_history: no history frames");
  const Shape& fs = warped.front().features.shape();
  if (fs.size() != 4 || fs[1] != hyp.count()) {
    throw ShapeError("aggregate_history: features must be [C, D, h, w] with D = hypothesis count");
  }
  for (const auto& f : warped) {
    if (f.features.shape() != fs || f.mask.shape() != Shape{fs[1], fs[2], fs[3]}) {
      throw ShapeError("aggregate_history: frame " + std::to_string(f.frame_index) + " has mismatched shape");
    }
  }
  std::vector<std::size_t> order(warped.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return warped[a].frame_index < warped[b].frame_index; });

  const std::size_t C = fs[0], cells = fs[1] * fs[2] * fs[3];
  Tensor<std::uint32_t> coverage({fs[1], fs[2], fs[3]}, 0u);
  for (std::size_t cell = 0; cell < cells; ++cell) {
    std::uint32_t n = 0;
    for (const auto& f : warped) n += f.mask[cell] ? 1u : 0u;
    coverage[cell] = n;
  }

  if (fusion == HistoryFusion::per_frame_concat) {
    std::vector<Tensor<T>> parts;
    for (std::size_t i : order) {
      Tensor<T> masked = warped[i].features;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t cell = 0; cell < cells; ++cell)
          if (!warped[i].mask[cell]) masked[c * cells + cell] = 0;
      parts.push_back(std::move(masked));
    }
    return {{concat(parts, 0), hyp, VolumeKind::historical, 0}, std::move(coverage)};
  }

  Tensor<T> data(fs);
  parallel_for(cells, [&](std::size_t begin, std::size_t end) {
    for (std::size_t cell = begin; cell < end; ++cell) {
      const std::uint32_t n = coverage[cell];
      if (n == 0) continue;
      for (std::size_t c = 0; c < C; ++c) {
        T acc = 0;
        for (std::size_t i : order) {
          if (warped[i].mask[cell]) acc += warped[i].features[c * cells + cell];
        }
        data[c * cells + cell] = acc / T(n);
      }
    }
  });
  return {{std::move(data), hyp, VolumeKind::historical, 0}, std::move(coverage)};
}

template <typename T>
TemporalVolume<T> concat_temporal(const TemporalVolume<T>& cur, const TemporalVolume<T>& his) {
  if (!(cur.hyp == his.hyp)) throw ShapeError("concat_temporal: depth hypotheses differ");
  const Shape& a = cur.data.shape();
  const Shape& b = his.data.shape();
  if (a.size() != 4 || b.size() != 4 || a[1] != b[1] || a[2] != b[2] || a[3] != b[3]) {
    throw ShapeError("concat_temporal: volumes " + shape_str(a) + " and " + shape_str(b) + " are not aligned");
  }
  return {concat(std::vector<Tensor<T>>{cur.data, his.data}, 0), cur.hyp, VolumeKind::combined, a[0]};
}

#define HTCL_INSTANTIATE_TV(T)                                                                           \
  template TemporalVolume<T> lift_current(const Tensor<T>&, const DepthHypotheses&);                     \
  template HistoryVolume<T> aggregate_history(const std::vector<WarpedFrame<T>>&, const DepthHypotheses&, \
                                              HistoryFusion);                                            \
  template TemporalVolume<T> concat_temporal(const TemporalVolume<T>&, const TemporalVolume<T>&);

HTCL_INSTANTIATE_TV(float)
HTCL_INSTANTIATE_TV(double)

}  // namespace htcl
