// SPDX-License-Identifier: Apache-2.0
#include "htcl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "htcl/parallel.hpp"

namespace htcl {

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_spatial4(const Shape& s, const char* what) {
  if (s.size() != 4) throw ShapeError(std::string(what) + ": expected [C, D, H, W], got " + shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "elementwise");
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    switch (op) {
      case ElementwiseOp::add: out[i] = a[i] + b[i]; break;
      case ElementwiseOp::sub: out[i] = a[i] - b[i]; break;
      case ElementwiseOp::mul:
      case ElementwiseOp::scale: out[i] = a[i] * b[i]; break;
    }
  }
  return out;
}

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    switch (op) {
      case ElementwiseOp::add: out[i] = a[i] + s; break;
      case ElementwiseOp::sub: out[i] = a[i] - s; break;
      case ElementwiseOp::mul:
      case ElementwiseOp::scale: out[i] = a[i] * s; break;
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& tensors, std::size_t axis) {
  if (tensors.empty()) throw ShapeError("concat: empty tensor list");
  const Shape& ref = tensors.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& t : tensors) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t a = 0; ok && a < s.size(); ++a) ok = (a == axis) || s[a] == ref[a];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  Tensor<T> out(out_shape);
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= ref[a];
  const std::size_t inner = out.stride(axis);
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t col = 0;
  for (const auto& t : tensors) {
    const std::size_t row = t.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.raw() + o * row, row, out.raw() + o * out_row + col);
    }
    col += row;
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& t, std::size_t axis, const std::vector<std::size_t>& sizes) {
  if (axis >= t.ndim()) throw ShapeError("split: axis out of range");
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (total != t.dim(axis)) throw ShapeError("split: sizes do not sum to axis length");
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= t.dim(a);
  const std::size_t inner = t.stride(axis);
  const std::size_t in_row = t.dim(axis) * inner;
  std::vector<Tensor<T>> out;
  std::size_t col = 0;
  for (auto s : sizes) {
    Shape shape = t.shape();
    shape[axis] = s;
    Tensor<T> piece(shape);
    const std::size_t row = s * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.raw() + o * in_row + col, row, piece.raw() + o * row);
    }
    col += row;
    out.push_back(std::move(piece));
  }
  return out;
}

template <typename T>
Tensor<T> slice0(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  if (begin >= end || end > t.dim(0)) throw ShapeError("slice0: bad range");
  Shape shape = t.shape();
  shape[0] = end - begin;
  const std::size_t inner = t.stride(0);
  std::vector<T> data(t.raw() + begin * inner, t.raw() + end * inner);
  return Tensor<T>(shape, std::move(data));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.ndim()) throw ShapeError("softmax: axis out of range");
  for (T v : x.data()) {
    if (std::isnan(v)) throw ValueError("softmax: NaN input");
  }
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  const std::size_t n = x.dim(axis);
  const std::size_t inner = x.stride(axis);
  Tensor<T> out(x.shape());
  parallel_for(outer * inner, [&](std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx) {
      const std::size_t base = (idx / inner) * n * inner + idx % inner;
      T m = x[base];
      for (std::size_t k = 1; k < n; ++k) m = std::max(m, x[base + k * inner]);
      T s = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(x[base + k * inner] - m);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= s;
    }
  });
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
  return out;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t num_groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps) {
  if (x.ndim() < 1) throw ShapeError("group_norm: scalar input");
  const std::size_t C = x.dim(0);
  if (num_groups == 0 || C % num_groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible by " +
                     std::to_string(num_groups) + " groups");
  }
  if (gamma.size() != C || beta.size() != C) throw ShapeError("group_norm: gamma/beta must have C entries");
  const std::size_t per_channel = x.stride(0);
  const std::size_t group_ch = C / num_groups;
  const std::size_t group_len = group_ch * per_channel;
  Tensor<T> out(x.shape());
  for (std::size_t g = 0; g < num_groups; ++g) {
    const T* src = x.raw() + g * group_len;
    // Welford in double.
    double mean = 0, m2 = 0;
    for (std::size_t i = 0; i < group_len; ++i) {
      const double v = src[i];
      const double delta = v - mean;
      mean += delta / double(i + 1);
      m2 += delta * (v - mean);
    }
    const double var = m2 / double(group_len);
    const double inv_std = 1.0 / std::sqrt(var + double(eps));
    for (std::size_t c = g * group_ch; c < (g + 1) * group_ch; ++c) {
      const double ga = gamma[c], be = beta[c];
      const T* in = x.raw() + c * per_channel;
      T* o = out.raw() + c * per_channel;
      for (std::size_t i = 0; i < per_channel; ++i) o[i] = T((in[i] - mean) * inv_std * ga + be);
    }
  }
  return out;
}

template <typename T>
void Conv3dParams<T>::require_same_padding() const {
  const std::size_t k = kernel();
  if (k % 2 == 0 || padding != dilation * (k - 1) / 2) {
    throw ShapeError("conv3d: padding " + std::to_string(padding) + " is not same-size for kernel " +
                     std::to_string(k) + " and dilation " + std::to_string(dilation));
  }
}

namespace {

struct ConvGeometry {
  std::size_t cin, cout, k, D, H, W, OD, OH, OW;
  long pad, dil;
};

template <typename T>
ConvGeometry conv_geometry(const Shape& xs, const Conv3dParams<T>& p) {
  require_spatial4(xs, "conv3d");
  const Shape& ws = p.weights.shape();
  if (ws.size() != 5 || ws[2] != ws[3] || ws[2] != ws[4]) {
    throw ShapeError("conv3d: weights must be [out, in, k, k, k], got " + shape_str(ws));
  }
  if (ws[1] != xs[0]) {
    throw ShapeError("conv3d: input has " + std::to_string(xs[0]) + " channels, weights expect " +
                     std::to_string(ws[1]));
  }
  if (p.bias.size() != ws[0]) throw ShapeError("conv3d: bias length must equal out channels");
  if (p.dilation == 0) throw ShapeError("conv3d: dilation must be positive");
  ConvGeometry g{};
  g.cin = ws[1];
  g.cout = ws[0];
  g.k = ws[2];
  g.D = xs[1];
  g.H = xs[2];
  g.W = xs[3];
  g.pad = static_cast<long>(p.padding);
  g.dil = static_cast<long>(p.dilation);
  const long span = g.dil * static_cast<long>(g.k - 1);
  const long od = static_cast<long>(g.D) + 2 * g.pad - span;
  const long oh = static_cast<long>(g.H) + 2 * g.pad - span;
  const long ow = static_cast<long>(g.W) + 2 * g.pad - span;
  if (od <= 0 || oh <= 0 || ow <= 0) throw ShapeError("conv3d: kernel does not fit the input (dimension underflow)");
  g.OD = static_cast<std::size_t>(od);
  g.OH = static_cast<std::size_t>(oh);
  g.OW = static_cast<std::size_t>(ow);
  return g;
}

// Output range [lo, hi) along one axis for which input = o - pad + tap stays inside [0, n).
inline void valid_range(long tap, long pad, std::size_t n, std::size_t on, std::size_t& lo, std::size_t& hi) {
  const long shift = tap - pad;
  const long l = std::max<long>(0, -shift);
  const long h = std::min<long>(static_cast<long>(on), static_cast<long>(n) - shift);
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(std::max(l, h));
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Conv3dParams<T>& p) {
  const ConvGeometry g = conv_geometry(x.shape(), p);
  Tensor<T> out({g.cout, g.OD, g.OH, g.OW});
  const std::size_t in_vol = g.D * g.H * g.W;
  const std::size_t out_vol = g.OD * g.OH * g.OW;
  parallel_for(g.cout, [&](std::size_t begin, std::size_t end) {
    for (std::size_t co = begin; co < end; ++co) {
      T* o = out.raw() + co * out_vol;
      std::fill_n(o, out_vol, p.bias[co]);
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const T* in = x.raw() + ci * in_vol;
        for (std::size_t kd = 0; kd < g.k; ++kd) {
          std::size_t d0, d1;
          valid_range(static_cast<long>(kd) * g.dil, g.pad, g.D, g.OD, d0, d1);
          for (std::size_t kh = 0; kh < g.k; ++kh) {
            std::size_t h0, h1;
            valid_range(static_cast<long>(kh) * g.dil, g.pad, g.H, g.OH, h0, h1);
            for (std::size_t kw = 0; kw < g.k; ++kw) {
              std::size_t w0, w1;
              valid_range(static_cast<long>(kw) * g.dil, g.pad, g.W, g.OW, w0, w1);
              const T wv = p.weights(co, ci, kd, kh, kw);
              if (wv == T(0)) continue;
              const long sd = static_cast<long>(kd) * g.dil - g.pad;
              const long sh = static_cast<long>(kh) * g.dil - g.pad;
              const long sw = static_cast<long>(kw) * g.dil - g.pad;
              for (std::size_t od = d0; od < d1; ++od) {
                const std::size_t id = static_cast<std::size_t>(static_cast<long>(od) + sd);
                for (std::size_t oh = h0; oh < h1; ++oh) {
                  const std::size_t ih = static_cast<std::size_t>(static_cast<long>(oh) + sh);
                  T* orow = o + (od * g.OH + oh) * g.OW;
                  const T* irow = in + (id * g.H + ih) * g.W + sw;
                  for (std::size_t ow = w0; ow < w1; ++ow) orow[ow] += wv * irow[ow];
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Conv3dGrads<T> conv3d_backward(const Tensor<T>& x, const Conv3dParams<T>& p, const Tensor<T>& grad_out) {
  const ConvGeometry g = conv_geometry(x.shape(), p);
  require_same_shape(grad_out.shape(), Shape{g.cout, g.OD, g.OH, g.OW}, "conv3d_backward");
  Conv3dGrads<T> grads{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(p.weights), Tensor<T>::zeros_like(p.bias)};
  const std::size_t in_vol = g.D * g.H * g.W;
  const std::size_t out_vol = g.OD * g.OH * g.OW;

  // Bias and weight gradients; each output channel owns its slice.
  parallel_for(g.cout, [&](std::size_t begin, std::size_t end) {
    for (std::size_t co = begin; co < end; ++co) {
      const T* go = grad_out.raw() + co * out_vol;
      T b = 0;
      for (std::size_t i = 0; i < out_vol; ++i) b += go[i];
      grads.bias[co] = b;
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const T* in = x.raw() + ci * in_vol;
        for (std::size_t kd = 0; kd < g.k; ++kd) {
          std::size_t d0, d1;
          valid_range(static_cast<long>(kd) * g.dil, g.pad, g.D, g.OD, d0, d1);
          for (std::size_t kh = 0; kh < g.k; ++kh) {
            std::size_t h0, h1;
            valid_range(static_cast<long>(kh) * g.dil, g.pad, g.H, g.OH, h0, h1);
            for (std::size_t kw = 0; kw < g.k; ++kw) {
              std::size_t w0, w1;
              valid_range(static_cast<long>(kw) * g.dil, g.pad, g.W, g.OW, w0, w1);
              const long sd = static_cast<long>(kd) * g.dil - g.pad;
              const long sh = static_cast<long>(kh) * g.dil - g.pad;
              const long sw = static_cast<long>(kw) * g.dil - g.pad;
              T acc = 0;
              for (std::size_t od = d0; od < d1; ++od) {
                const std::size_t id = static_cast<std::size_t>(static_cast<long>(od) + sd);
                for (std::size_t oh = h0; oh < h1; ++oh) {
                  const std::size_t ih = static_cast<std::size_t>(static_cast<long>(oh) + sh);
                  const T* grow = go + (od * g.OH + oh) * g.OW;
                  const T* irow = in + (id * g.H + ih) * g.W + sw;
                  for (std::size_t ow = w0; ow < w1; ++ow) acc += grow[ow] * irow[ow];
                }
              }
              grads.weights(co, ci, kd, kh, kw) = acc;
            }
          }
        }
      }
    }
  });

  // Input gradient; each input channel owns its slice.
  parallel_for(g.cin, [&](std::size_t begin, std::size_t end) {
    for (std::size_t ci = begin; ci < end; ++ci) {
      T* gi = grads.input.raw() + ci * in_vol;
      for (std::size_t co = 0; co < g.cout; ++co) {
        const T* go = grad_out.raw() + co * out_vol;
        for (std::size_t kd = 0; kd < g.k; ++kd) {
          std::size_t d0, d1;
          valid_range(static_cast<long>(kd) * g.dil, g.pad, g.D, g.OD, d0, d1);
          for (std::size_t kh = 0; kh < g.k; ++kh) {
            std::size_t h0, h1;
            valid_range(static_cast<long>(kh) * g.dil, g.pad, g.H, g.OH, h0, h1);
            for (std::size_t kw = 0; kw < g.k; ++kw) {
              std::size_t w0, w1;
              valid_range(static_cast<long>(kw) * g.dil, g.pad, g.W, g.OW, w0, w1);
              const T wv = p.weights(co, ci, kd, kh, kw);
              if (wv == T(0)) continue;
              const long sd = static_cast<long>(kd) * g.dil - g.pad;
              const long sh = static_cast<long>(kh) * g.dil - g.pad;
              const long sw = static_cast<long>(kw) * g.dil - g.pad;
              for (std::size_t od = d0; od < d1; ++od) {
                const std::size_t id = static_cast<std::size_t>(static_cast<long>(od) + sd);
                for (std::size_t oh = h0; oh < h1; ++oh) {
                  const std::size_t ih = static_cast<std::size_t>(static_cast<long>(oh) + sh);
                  const T* grow = go + (od * g.OH + oh) * g.OW;
                  T* irow = gi + (id * g.H + ih) * g.W + sw;
                  for (std::size_t ow = w0; ow < w1; ++ow) irow[ow] += wv * grow[ow];
                }
              }
            }
          }
        }
      }
    }
  });
  return grads;
}

template <typename T>
TrilinearStencil<T> TrilinearStencil<T>::at(T cd, T ch, T cw, std::size_t D, std::size_t H, std::size_t W) {
  TrilinearStencil s;
  const T c[3] = {cd, ch, cw};
  const std::size_t n[3] = {D, H, W};
  std::size_t lo[3], hi[3];
  T w_lo[3], w_hi[3];
  for (int a = 0; a < 3; ++a) {
    // Negated comparison also rejects NaN.
    if (!(c[a] >= T(0) && c[a] <= T(n[a] - 1))) return s;
    std::size_t i0 = static_cast<std::size_t>(std::floor(c[a]));
    if (i0 > n[a] - 1) i0 = n[a] - 1;
    const T frac = c[a] - T(i0);
    lo[a] = i0;
    hi[a] = std::min(i0 + 1, n[a] - 1);
    w_lo[a] = T(1) - frac;
    w_hi[a] = frac;
  }
  s.valid = true;
  for (int k = 0; k < 8; ++k) {
    const int a = (k >> 2) & 1, b = (k >> 1) & 1, e = k & 1;
    const std::size_t id = a ? hi[0] : lo[0];
    const std::size_t ih = b ? hi[1] : lo[1];
    const std::size_t iw = e ? hi[2] : lo[2];
    const T wd = a ? w_hi[0] : w_lo[0];
    const T wh = b ? w_hi[1] : w_lo[1];
    const T ww = e ? w_hi[2] : w_lo[2];
    const T sd = a ? T(1) : T(-1);
    const T sh = b ? T(1) : T(-1);
    const T sw = e ? T(1) : T(-1);
    s.offset[k] = (id * H + ih) * W + iw;
    s.weight[k] = wd * wh * ww;
    s.dweight[0][k] = sd * wh * ww;
    s.dweight[1][k] = wd * sh * ww;
    s.dweight[2][k] = wd * wh * sw;
  }
  return s;
}

namespace {

template <typename T>
Shape sample_out_shape(const Tensor<T>& vol, const Tensor<T>& coords) {
  require_spatial4(vol.shape(), "trilinear_sample");
  if (coords.ndim() < 1 || coords.shape().back() != 3) {
    throw ShapeError("trilinear_sample: coords must be [..., 3], got " + shape_str(coords.shape()));
  }
  Shape out{vol.dim(0)};
  out.insert(out.end(), coords.shape().begin(), coords.shape().end() - 1);
  if (out.size() == 1) out.push_back(1);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> trilinear_sample(const Tensor<T>& vol, const Tensor<T>& coords) {
  const Shape out_shape = sample_out_shape(vol, coords);
  const std::size_t C = vol.dim(0), D = vol.dim(1), H = vol.dim(2), W = vol.dim(3);
  const std::size_t N = coords.size() / 3;
  const std::size_t vol_sz = D * H * W;
  Tensor<T> out(out_shape);
  parallel_for(N, [&](std::size_t begin, std::size_t end) {
    for (std::size_t n = begin; n < end; ++n) {
      const auto s = TrilinearStencil<T>::at(coords[3 * n], coords[3 * n + 1], coords[3 * n + 2], D, H, W);
      if (!s.valid) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const T* v = vol.raw() + c * vol_sz;
        T acc = 0;
        for (int k = 0; k < 8; ++k) acc += s.weight[k] * v[s.offset[k]];
        out[c * N + n] = acc;
      }
    }
  });
  return out;
}

template <typename T>
TrilinearGrads<T> trilinear_sample_backward(const Tensor<T>& vol, const Tensor<T>& coords, const Tensor<T>& grad_out) {
  const Shape out_shape = sample_out_shape(vol, coords);
  require_same_shape(grad_out.shape(), out_shape, "trilinear_sample_backward");
  const std::size_t C = vol.dim(0), D = vol.dim(1), H = vol.dim(2), W = vol.dim(3);
  const std::size_t N = coords.size() / 3;
  const std::size_t vol_sz = D * H * W;
  TrilinearGrads<T> g{Tensor<T>::zeros_like(vol), Tensor<T>::zeros_like(coords)};
  parallel_for(C, [&](std::size_t begin, std::size_t end) {
    for (std::size_t c = begin; c < end; ++c) {
      T* gv = g.volume.raw() + c * vol_sz;
      for (std::size_t n = 0; n < N; ++n) {
        const T up = grad_out[c * N + n];
        if (up == T(0)) continue;
        const auto s = TrilinearStencil<T>::at(coords[3 * n], coords[3 * n + 1], coords[3 * n + 2], D, H, W);
        if (!s.valid) continue;
        for (int k = 0; k < 8; ++k) gv[s.offset[k]] += s.weight[k] * up;
      }
    }
  });
  parallel_for(N, [&](std::size_t begin, std::size_t end) {
    for (std::size_t n = begin; n < end; ++n) {
      const auto s = TrilinearStencil<T>::at(coords[3 * n], coords[3 * n + 1], coords[3 * n + 2], D, H, W);
      if (!s.valid) continue;
      for (int a = 0; a < 3; ++a) {
        T acc = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const T* v = vol.raw() + c * vol_sz;
          T dv = 0;
          for (int k = 0; k < 8; ++k) dv += s.dweight[a][k] * v[s.offset[k]];
          acc += grad_out[c * N + n] * dv;
        }
        g.coords[3 * n + a] = acc;
      }
    }
  });
  return g;
}

namespace {

template <typename T>
struct UpsampleAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<T> t;
};

template <typename T>
UpsampleAxis<T> upsample_axis(std::size_t n, std::size_t factor) {
  UpsampleAxis<T> ax;
  const std::size_t on = n * factor;
  ax.lo.resize(on);
  ax.hi.resize(on);
  ax.t.resize(on);
  for (std::size_t o = 0; o < on; ++o) {
    double src = (double(o) + 0.5) / double(factor) - 0.5;
    src = std::clamp(src, 0.0, double(n - 1));
    const std::size_t i0 = std::min(static_cast<std::size_t>(std::floor(src)), n - 1);
    ax.lo[o] = i0;
    ax.hi[o] = std::min(i0 + 1, n - 1);
    ax.t[o] = T(src - double(i0));
  }
  return ax;
}

}  // namespace

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, std::size_t factor) {
  require_spatial4(x.shape(), "upsample_trilinear");
  if (factor == 0) throw ShapeError("upsample_trilinear: factor must be >= 1");
  if (factor == 1) return x;
  const std::size_t C = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
  const auto ax = upsample_axis<T>(X, factor), ay = upsample_axis<T>(Y, factor), az = upsample_axis<T>(Z, factor);
  const std::size_t OX = X * factor, OY = Y * factor, OZ = Z * factor;
  Tensor<T> out({C, OX, OY, OZ});
  parallel_for(C * OX, [&](std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx) {
      const std::size_t c = idx / OX, ox = idx % OX;
      const T* in = x.raw() + c * X * Y * Z;
      for (std::size_t oy = 0; oy < OY; ++oy) {
        for (std::size_t oz = 0; oz < OZ; ++oz) {
          const std::size_t xs[2] = {ax.lo[ox], ax.hi[ox]};
          const std::size_t ys[2] = {ay.lo[oy], ay.hi[oy]};
          const std::size_t zs[2] = {az.lo[oz], az.hi[oz]};
          const T wx[2] = {T(1) - ax.t[ox], ax.t[ox]};
          const T wy[2] = {T(1) - ay.t[oy], ay.t[oy]};
          const T wz[2] = {T(1) - az.t[oz], az.t[oz]};
          T acc = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) acc += wx[a] * wy[b] * wz[e] * in[(xs[a] * Y + ys[b]) * Z + zs[e]];
          out(c, ox, oy, oz) = acc;
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> upsample_trilinear_backward(const Shape& input_shape, std::size_t factor, const Tensor<T>& grad_out) {
  require_spatial4(input_shape, "upsample_trilinear_backward");
  if (factor == 1) return grad_out;
  const std::size_t C = input_shape[0], X = input_shape[1], Y = input_shape[2], Z = input_shape[3];
  const std::size_t OX = X * factor, OY = Y * factor, OZ = Z * factor;
  require_same_shape(grad_out.shape(), Shape{C, OX, OY, OZ}, "upsample_trilinear_backward");
  const auto ax = upsample_axis<T>(X, factor), ay = upsample_axis<T>(Y, factor), az = upsample_axis<T>(Z, factor);
  Tensor<T> grad(input_shape);
  parallel_for(C, [&](std::size_t begin, std::size_t end) {
    for (std::size_t c = begin; c < end; ++c) {
      T* gi = grad.raw() + c * X * Y * Z;
      for (std::size_t ox = 0; ox < OX; ++ox)
        for (std::size_t oy = 0; oy < OY; ++oy)
          for (std::size_t oz = 0; oz < OZ; ++oz) {
            const T up = grad_out(c, ox, oy, oz);
            const std::size_t xs[2] = {ax.lo[ox], ax.hi[ox]};
            const std::size_t ys[2] = {ay.lo[oy], ay.hi[oy]};
            const std::size_t zs[2] = {az.lo[oz], az.hi[oz]};
            const T wx[2] = {T(1) - ax.t[ox], ax.t[ox]};
            const T wy[2] = {T(1) - ay.t[oy], ay.t[oy]};
            const T wz[2] = {T(1) - az.t[oz], az.t[oz]};
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e) gi[(xs[a] * Y + ys[b]) * Z + zs[e]] += wx[a] * wy[b] * wz[e] * up;
          }
    }
  });
  return grad;
}

template <typename T>
T sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return s;
}

template <typename T>
double max_rel_error(const Tensor<T>& a, const Tensor<T>& b, double floor) {
  require_same_shape(a.shape(), b.shape(), "max_rel_error");
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(double(a[i]) - double(b[i])));
    scale = std::max(scale, std::abs(double(b[i])));
  }
  return diff / std::max(scale, floor);
}

#define HTCL_INSTANTIATE_OPS(T)                                                                               \
  template Tensor<T> elementwise(ElementwiseOp, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> elementwise(ElementwiseOp, const Tensor<T>&, T);                                         \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                      \
  template std::vector<Tensor<T>> split(const Tensor<T>&, std::size_t, const std::vector<std::size_t>&);      \
  template Tensor<T> slice0(const Tensor<T>&, std::size_t, std::size_t);                                      \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                                                  \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                               \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&, T);        \
  template struct Conv3dParams<T>;                                                                            \
  template Tensor<T> conv3d(const Tensor<T>&, const Conv3dParams<T>&);                                        \
  template Conv3dGrads<T> conv3d_backward(const Tensor<T>&, const Conv3dParams<T>&, const Tensor<T>&);        \
  template struct TrilinearStencil<T>;                                                                        \
  template Tensor<T> trilinear_sample(const Tensor<T>&, const Tensor<T>&);                                    \
  template TrilinearGrads<T> trilinear_sample_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> upsample_trilinear(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> upsample_trilinear_backward(const Shape&, std::size_t, const Tensor<T>&);                \
  template T sum(const Tensor<T>&);                                                                           \
  template double max_rel_error(const Tensor<T>&, const Tensor<T>&, double);

HTCL_INSTANTIATE_OPS(float)
HTCL_INSTANTIATE_OPS(double)

}  // namespace htcl
