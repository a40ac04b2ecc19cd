// SPDX-License-Identifier: Apache-2.0
#include "htcl/dynamic_refinement.hpp"

#include <algorithm>
#include <string>

#include "htcl/parallel.hpp"

namespace htcl {

std::vector<std::array<int, 3>> cubic_footprint(std::size_t kernel) {
  if (kernel % 2 == 0) throw ShapeError("deformable footprint needs an odd kernel");
  const int r = static_cast<int>(kernel / 2);
  std::vector<std::array<int, 3>> grid;
  for (int d = -r; d <= r; ++d)
    for (int h = -r; h <= r; ++h)
      for (int w = -r; w <= r; ++w) grid.push_back({d, h, w});
  return grid;
}

template <typename T>
DeformParams<T> make_deform_params(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                                   std::size_t pred_kernel) {
  DeformParams<T> dp;
  dp.base_grid = cubic_footprint(kernel);
  const std::size_t K = dp.base_grid.size();
  dp.offset_conv = Conv3dParams<T>::same(3 * K, in_ch, pred_kernel);
  dp.weight_conv = Conv3dParams<T>::same(K, in_ch, pred_kernel);
  dp.proj = Conv3dParams<T>::pointwise(out_ch, in_ch);
  return dp;
}

template <typename T>
OffsetsWeights<T> predict_offsets_weights(const Tensor<T>& volume, const DeformParams<T>& dp) {
  const std::size_t K = dp.footprint();
  if (dp.offset_conv.out_channels() != 3 * K || dp.weight_conv.out_channels() != K) {
    throw ShapeError("predict_offsets_weights: predictor channels do not match footprint size " + std::to_string(K));
  }
  if (volume.ndim() != 4 || volume.dim(0) != dp.in_channels()) {
    throw ShapeError("predict_offsets_weights: channel mismatch for input " + shape_str(volume.shape()));
  }
  Tensor<T> off = conv3d(volume, dp.offset_conv);
  Tensor<T> wts = sigmoid(conv3d(volume, dp.weight_conv));
  const std::size_t D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
  if (off.shape() != Shape{3 * K, D, H, W}) throw ShapeError("predict_offsets_weights: predictors must keep size");
  return {off.reshaped({K, 3, D, H, W}), std::move(wts)};
}

namespace {

template <typename T>
void check_deform_inputs(const Tensor<T>& volume, const Tensor<T>& offsets, const Tensor<T>& weights,
                         const Tensor<T>& affinity, std::size_t K) {
  if (volume.ndim() != 4) throw ShapeError("deformable_sample: volume must be [C, D, h, w]");
  const std::size_t D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
  if (offsets.shape() != Shape{K, 3, D, H, W}) {
    throw ShapeError("deformable_sample: offsets must be [K, 3, D, h, w], got " + shape_str(offsets.shape()));
  }
  if (weights.shape() != Shape{K, D, H, W}) throw ShapeError("deformable_sample: weights must be [K, D, h, w]");
  if (affinity.shape() != Shape{D, H, W}) throw ShapeError("deformable_sample: affinity must be [D, h, w]");
}

// Accumulation order over footprint points: lexicographic in p_k, so the
// result does not depend on how the footprint is enumerated.
std::vector<std::size_t> footprint_order(const std::vector<std::array<int, 3>>& grid) {
  std::vector<std::size_t> order(grid.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return grid[a] < grid[b]; });
  return order;
}

template <typename T>
struct SamplePoint {
  T cd, ch, cw;
};

template <typename T>
inline SamplePoint<T> sample_point(const Tensor<T>& offsets, const std::array<int, 3>& base, std::size_t k,
                                   std::size_t cell, std::size_t cells, std::size_t d, std::size_t h, std::size_t w) {
  const T* o = offsets.raw() + k * 3 * cells + cell;
  return {T(long(d) + base[0]) + o[0], T(long(h) + base[1]) + o[cells], T(long(w) + base[2]) + o[2 * cells]};
}

}  // namespace

template <typename T>
Tensor<T> deformable_gather(const Tensor<T>& volume, const Tensor<T>& offsets, const Tensor<T>& weights,
                            const Tensor<T>& affinity, const std::vector<std::array<int, 3>>& base_grid) {
  const std::size_t K = base_grid.size();
  check_deform_inputs(volume, offsets, weights, affinity, K);
  const std::size_t C = volume.dim(0), D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
  const std::size_t cells = D * H * W;
  const auto order = footprint_order(base_grid);
  Tensor<T> out({C, D, H, W});
  parallel_for(cells, [&](std::size_t begin, std::size_t end) {
    std::vector<T> acc(C);
    for (std::size_t cell = begin; cell < end; ++cell) {
      const std::size_t d = cell / (H * W), h = (cell / W) % H, w = cell % W;
      std::fill(acc.begin(), acc.end(), T(0));
      for (std::size_t k : order) {
        const auto sp = sample_point(offsets, base_grid[k], k, cell, cells, d, h, w);
        const auto s = TrilinearStencil<T>::at(sp.cd, sp.ch, sp.cw, D, H, W);
        if (!s.valid) continue;
        T a = 0;
        for (int q = 0; q < 8; ++q) a += s.weight[q] * affinity[s.offset[q]];
        const T gate = weights[k * cells + cell] * a;
        for (std::size_t c = 0; c < C; ++c) {
          const T* v = volume.raw() + c * cells;
          T sample = 0;
          for (int q = 0; q < 8; ++q) sample += s.weight[q] * v[s.offset[q]];
          acc[c] += sample * gate;
        }
      }
      for (std::size_t c = 0; c < C; ++c) out[c * cells + cell] = acc[c];
    }
  });
  return out;
}

template <typename T>
Tensor<T> deformable_sample(const Tensor<T>& volume, const Tensor<T>& offsets, const Tensor<T>& weights,
                            const Tensor<T>& affinity, const DeformParams<T>& dp) {
  if (dp.proj.in_channels() != volume.dim(0) || dp.proj.kernel() != 1) {
    throw ShapeError("deformable_sample: proj must be 1x1x1 with input channels = volume channels");
  }
  return conv3d(deformable_gather(volume, offsets, weights, affinity, dp.base_grid), dp.proj);
}

template <typename T>
DeformGrads<T> deformable_sample_backward(const Tensor<T>& grad_out, const Tensor<T>& volume, const Tensor<T>& offsets,
                                          const Tensor<T>& weights, const Tensor<T>& affinity,
                                          const DeformParams<T>& dp) {
  const std::size_t K = dp.footprint();
  check_deform_inputs(volume, offsets, weights, affinity, K);
  const std::size_t C = volume.dim(0), D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
  const std::size_t cells = D * H * W;

  const Tensor<T> gathered = deformable_gather(volume, offsets, weights, affinity, dp.base_grid);
  const Conv3dGrads<T> pg = conv3d_backward(gathered, dp.proj, grad_out);
  const Tensor<T>& gs = pg.input;  // d loss / d gathered, [C, D, h, w]

  DeformGrads<T> g{Tensor<T>::zeros_like(volume), Tensor<T>::zeros_like(offsets), Tensor<T>::zeros_like(weights),
                   Tensor<T>::zeros_like(affinity), pg.weights, pg.bias};

  // Per-point terms: offsets, weights, and the affinity contribution scalar.
  Tensor<T> gate_grad({K, cells});  // sum_c gs * sample, used for the affinity scatter
  parallel_for(cells, [&](std::size_t begin, std::size_t end) {
    for (std::size_t cell = begin; cell < end; ++cell) {
      const std::size_t d = cell / (H * W), h = (cell / W) % H, w = cell % W;
      for (std::size_t k = 0; k < K; ++k) {
        const auto sp = sample_point(offsets, dp.base_grid[k], k, cell, cells, d, h, w);
        const auto s = TrilinearStencil<T>::at(sp.cd, sp.ch, sp.cw, D, H, W);
        if (!s.valid) continue;
        T a = 0;
        std::array<T, 3> da{};
        for (int q = 0; q < 8; ++q) {
          const T av = affinity[s.offset[q]];
          a += s.weight[q] * av;
          for (int ax = 0; ax < 3; ++ax) da[ax] += s.dweight[ax][q] * av;
        }
        const T wk = weights[k * cells + cell];
        T gv = 0;  // sum_c gs * sample
        std::array<T, 3> gdv{};
        for (std::size_t c = 0; c < C; ++c) {
          const T* v = volume.raw() + c * cells;
          const T up = gs[c * cells + cell];
          T sample = 0;
          std::array<T, 3> dv{};
          for (int q = 0; q < 8; ++q) {
            const T x = v[s.offset[q]];
            sample += s.weight[q] * x;
            for (int ax = 0; ax < 3; ++ax) dv[ax] += s.dweight[ax][q] * x;
          }
          gv += up * sample;
          for (int ax = 0; ax < 3; ++ax) gdv[ax] += up * dv[ax];
        }
        g.weights[k * cells + cell] = gv * a;
        gate_grad[k * cells + cell] = gv * wk;
        for (int ax = 0; ax < 3; ++ax) {
          g.offsets[(k * 3 + ax) * cells + cell] = wk * (gdv[ax] * a + gv * da[ax]);
        }
      }
    }
  });

  const auto order = footprint_order(dp.base_grid);

  // Scatter into the volume, one channel per worker, in (cell, k) order.
  parallel_for(C, [&](std::size_t begin, std::size_t end) {
    for (std::size_t c = begin; c < end; ++c) {
      T* gvol = g.volume.raw() + c * cells;
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const T up = gs[c * cells + cell];
        if (up == T(0)) continue;
        const std::size_t d = cell / (H * W), h = (cell / W) % H, w = cell % W;
        for (std::size_t k : order) {
          const auto sp = sample_point(offsets, dp.base_grid[k], k, cell, cells, d, h, w);
          const auto s = TrilinearStencil<T>::at(sp.cd, sp.ch, sp.cw, D, H, W);
          if (!s.valid) continue;
          T a = 0;
          for (int q = 0; q < 8; ++q) a += s.weight[q] * affinity[s.offset[q]];
          const T scale = up * weights[k * cells + cell] * a;
          for (int q = 0; q < 8; ++q) gvol[s.offset[q]] += s.weight[q] * scale;
        }
      }
    }
  });

  for (std::size_t cell = 0; cell < cells; ++cell) {
    const std::size_t d = cell / (H * W), h = (cell / W) % H, w = cell % W;
    for (std::size_t k : order) {
      const T gg = gate_grad[k * cells + cell];
      if (gg == T(0)) continue;
      const auto sp = sample_point(offsets, dp.base_grid[k], k, cell, cells, d, h, w);
      const auto s = TrilinearStencil<T>::at(sp.cd, sp.ch, sp.cw, D, H, W);
      if (!s.valid) continue;
      for (int q = 0; q < 8; ++q) g.affinity[s.offset[q]] += s.weight[q] * gg;
    }
  }
  return g;
}

template <typename T>
BlockOutput<T> multi_level_block(const Tensor<T>& volume, const Tensor<T>& affinity,
                                 const std::vector<DeformParams<T>>& levels, const Conv3dParams<T>& fuse,
                                 const BlockOptions& opts) {
  if (levels.empty()) throw ShapeError("multi_level_block: no levels");
  BlockOutput<T> out;
  std::size_t stacked_ch = 0;
  for (const auto& l : levels) stacked_ch += l.out_channels();
  if (fuse.in_channels() != stacked_ch || fuse.kernel() != 1) {
    throw ShapeError("multi_level_block: fuse must be 1x1x1 with " + std::to_string(stacked_ch) + " input channels");
  }
  const Tensor<T>* input = &volume;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (input->dim(0) != levels[l].in_channels()) {
      throw ShapeError("multi_level_block: level " + std::to_string(l) + " expects " +
                       std::to_string(levels[l].in_channels()) + " channels, got " + std::to_string(input->dim(0)));
    }
    OffsetsWeights<T> ow = predict_offsets_weights(*input, levels[l]);
    if (!opts.deformable) ow.offsets.fill(T(0));
    out.levels.push_back(deformable_sample(*input, ow.offsets, ow.weights, affinity, levels[l]));
    if (!opts.parallel_levels) input = &out.levels.back();
  }
  out.stacked = concat(out.levels, 0);
  out.refined = conv3d(out.stacked, fuse);
  return out;
}

#define HTCL_INSTANTIATE_DR(T)                                                                                     \
  template DeformParams<T> make_deform_params(std::size_t, std::size_t, std::size_t, std::size_t);                 \
  template OffsetsWeights<T> predict_offsets_weights(const Tensor<T>&, const DeformParams<T>&);                    \
  template Tensor<T> deformable_gather(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                       const std::vector<std::array<int, 3>>&);                                    \
  template Tensor<T> deformable_sample(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                       const DeformParams<T>&);                                                    \
  template DeformGrads<T> deformable_sample_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                                     const Tensor<T>&, const Tensor<T>&, const DeformParams<T>&);  \
  template BlockOutput<T> multi_level_block(const Tensor<T>&, const Tensor<T>&, const std::vector<DeformParams<T>>&, \
                                            const Conv3dParams<T>&, const BlockOptions&);

HTCL_INSTANTIATE_DR(float)
HTCL_INSTANTIATE_DR(double)

}  // namespace htcl
