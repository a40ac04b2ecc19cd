// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "htcl/tensor.hpp"

namespace htcl {

enum class ElementwiseOp { add, sub, mul, scale };

/// a (op) b for equally shaped tensors. `scale` is treated as `mul`.
template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b);

/// a (op) s with a scalar right-hand side. `scale` and `mul` both multiply.
template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, T s);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& tensors, std::size_t axis);

/// Inverse of concat: cuts `t` along `axis` into pieces of the given sizes.
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& t, std::size_t axis, const std::vector<std::size_t>& sizes);

/// Contiguous slice [begin, end) along axis 0.
template <typename T>
Tensor<T> slice0(const Tensor<T>& t, std::size_t begin, std::size_t end);

/// Max-subtracted softmax along `axis`. Throws ValueError on NaN input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// Exact GELU, x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Group normalization of a single sample laid out [C, ...]. Statistics are
/// taken over each group of C / num_groups channels and all trailing axes.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t num_groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));

template <typename T>
struct Conv3dParams {
  Tensor<T> weights;  // [out_ch, in_ch, k, k, k]
  Tensor<T> bias;     // [out_ch]
  std::size_t dilation = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t kernel() const { return weights.dim(2); }

  /// Zero-initialized parameters with "same" padding dilation * (k - 1) / 2.
  static Conv3dParams same(std::size_t out_ch, std::size_t in_ch, std::size_t k, std::size_t dilation = 1) {
    if (k % 2 == 0) throw ShapeError("same padding requires an odd kernel size");
    Conv3dParams p;
    p.weights = Tensor<T>::zeros({out_ch, in_ch, k, k, k});
    p.bias = Tensor<T>::zeros({out_ch});
    p.dilation = dilation;
    p.padding = dilation * (k - 1) / 2;
    return p;
  }

  /// Pointwise (1x1x1) channel mixing.
  static Conv3dParams pointwise(std::size_t out_ch, std::size_t in_ch) { return same(out_ch, in_ch, 1, 1); }

  /// Throws unless padding yields same-size output.
  void require_same_padding() const;
};

/// Stride-1 cross-correlation with zero padding and dilation.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Conv3dParams<T>& p);

template <typename T>
struct Conv3dGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
Conv3dGrads<T> conv3d_backward(const Tensor<T>& x, const Conv3dParams<T>& p, const Tensor<T>& grad_out);

/// Corner offsets and blend weights of one trilinear lookup into a
/// [D, H, W] grid under the zero border policy.
template <typename T>
struct TrilinearStencil {
  bool valid = false;
  std::array<std::size_t, 8> offset{};
  std::array<T, 8> weight{};
  // d weight / d coordinate, per axis (d, h, w).
  std::array<std::array<T, 8>, 3> dweight{};

  /// Coordinates outside [0, size - 1] on any axis produce an invalid stencil.
  static TrilinearStencil at(T cd, T ch, T cw, std::size_t D, std::size_t H, std::size_t W);
};

/// Samples vol [C, D, H, W] at continuous (d, h, w) coordinates coords [..., 3].
/// Output is [C, ...].
template <typename T>
Tensor<T> trilinear_sample(const Tensor<T>& vol, const Tensor<T>& coords);

template <typename T>
struct TrilinearGrads {
  Tensor<T> volume;  // [C, D, H, W]
  Tensor<T> coords;  // [..., 3]
};

template <typename T>
TrilinearGrads<T> trilinear_sample_backward(const Tensor<T>& vol, const Tensor<T>& coords, const Tensor<T>& grad_out);

/// Trilinear upsampling of [C, X, Y, Z] by an integer factor per axis, with
/// half-pixel alignment and edge clamping.
template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, std::size_t factor);

template <typename T>
Tensor<T> upsample_trilinear_backward(const Shape& input_shape, std::size_t factor, const Tensor<T>& grad_out);

template <typename T>
T sum(const Tensor<T>& x);

/// Max |a - b| over elements divided by max(max |b|, floor).
template <typename T>
double max_rel_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12);

}  // namespace htcl
