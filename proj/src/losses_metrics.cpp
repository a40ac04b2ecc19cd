// SPDX-License-Identifier: Apache-2.0
#include "htcl/losses_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace htcl {

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["iou"] = iou;
  j["miou"] = miou;
  j["per_class"] = per_class_iou;
  return j.dump();
}

MetricReport compute_iou(const VoxelGrid& pred, const VoxelGrid& gt) {
  if (pred.spec.dims != gt.spec.dims) throw ShapeError("compute_iou: grid dims differ");
  if (pred.spec.num_classes != gt.spec.num_classes) throw ValueError("compute_iou: class sets differ");
  const std::size_t K = gt.spec.num_classes;
  const std::uint8_t ignore = gt.spec.ignore_label;
  MetricReport r;
  r.counts.assign(K > 1 ? K - 1 : 0, {});
  std::size_t otp = 0, ofp = 0, ofn = 0;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const std::uint8_t g = gt.labels[i];
    if (g == ignore) continue;
    const std::uint8_t p = pred.labels[i];
    if (g >= K) throw ValueError("compute_iou: ground-truth label out of range");
    if (p >= K) throw ValueError("compute_iou: predicted label out of range");
    const bool go = g != 0, po = p != 0;
    otp += go && po;
    ofp += po && !go;
    ofn += go && !po;
    if (p == g) {
      if (g) ++r.counts[g - 1].tp;
    } else {
      if (p) ++r.counts[p - 1].fp;
      if (g) ++r.counts[g - 1].fn;
    }
  }
  const std::size_t ounion = otp + ofp + ofn;
  r.iou = ounion == 0 ? 1.0 : double(otp) / double(ounion);
  double acc = 0;
  std::size_t n = 0;
  for (const auto& c : r.counts) {
    const std::size_t u = c.tp + c.fp + c.fn;
    r.present.push_back(u > 0);
    r.per_class_iou.push_back(u ? double(c.tp) / double(u) : 0.0);
    if (u) {
      acc += r.per_class_iou.back();
      ++n;
    }
  }
  r.miou = n ? acc / double(n) : 1.0;
  return r;
}

namespace {

template <typename T>
void check_probs(const Tensor<T>& probs, std::size_t labels) {
  if (probs.ndim() < 2) throw ShapeError("loss: probabilities must be [K, ...]");
  if (probs.stride(0) != labels) throw ShapeError("loss: label count does not match probabilities");
}

double clamped_log(double p) { return std::log(std::max(p, kLogClamp)); }

// Softmax Jacobian applied to dL/dp, column n of a [K, N] layout.
template <typename T>
void softmax_backward_column(const Tensor<T>& probs, const std::vector<double>& dp, std::size_t n, std::size_t N,
                             Tensor<T>& grad) {
  const std::size_t K = probs.dim(0);
  double inner = 0;
  for (std::size_t c = 0; c < K; ++c) inner += dp[c] * double(probs[c * N + n]);
  for (std::size_t c = 0; c < K; ++c) {
    const double p = probs[c * N + n];
    grad[c * N + n] = T(p * (dp[c] - inner));
  }
}

}  // namespace

template <typename T>
LossGrad<T> weighted_ce(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                        std::span<const double> class_weights, std::uint8_t ignore_label) {
  check_probs(probs, labels.size());
  const std::size_t K = probs.dim(0), N = labels.size();
  if (class_weights.size() != K) throw ShapeError("weighted_ce: one weight per class required");
  std::size_t valid = 0;
  for (auto l : labels)
    if (l != ignore_label) ++valid;
  if (valid == 0) throw ValueError("weighted_ce: every position is ignored");
  LossGrad<T> out;
  out.grad = Tensor<T>::zeros_like(probs);
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const std::uint8_t y = labels[n];
    if (y == ignore_label) continue;
    if (y >= K) throw ValueError("weighted_ce: label out of range");
    const double w = class_weights[y];
    acc += -w * clamped_log(probs[y * N + n]);
    for (std::size_t c = 0; c < K; ++c) {
      const double p = probs[c * N + n];
      out.grad[c * N + n] = T(w * (p - (c == y ? 1.0 : 0.0)) / double(valid));
    }
  }
  out.value = acc / double(valid);
  return out;
}

template <typename T>
LossGrad<T> cross_entropy(const Tensor<T>& probs, std::span<const std::uint8_t> labels, std::uint8_t ignore_label) {
  check_probs(probs, labels.size());
  const std::size_t K = probs.dim(0), N = labels.size();
  std::size_t valid = 0;
  for (auto l : labels)
    if (l != ignore_label) ++valid;
  if (valid == 0) throw ValueError("cross_entropy: every position is ignored");
  LossGrad<T> out;
  out.grad = Tensor<T>::zeros_like(probs);
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const std::uint8_t y = labels[n];
    if (y == ignore_label) continue;
    if (y >= K) throw ValueError("cross_entropy: label out of range");
    acc += -clamped_log(probs[y * N + n]);
    for (std::size_t c = 0; c < K; ++c) {
      const double p = probs[c * N + n];
      out.grad[c * N + n] = T((p - (c == y ? 1.0 : 0.0)) / double(valid));
    }
  }
  out.value = acc / double(valid);
  return out;
}

template <typename T>
LossGrad<T> occupancy_bce(const Tensor<T>& probs, std::span<const std::uint8_t> labels, std::uint8_t ignore_label) {
  check_probs(probs, labels.size());
  const std::size_t K = probs.dim(0), N = labels.size();
  std::size_t valid = 0;
  for (auto l : labels)
    if (l != ignore_label) ++valid;
  if (valid == 0) throw ValueError("occupancy_bce: every position is ignored");
  LossGrad<T> out;
  out.grad = Tensor<T>::zeros_like(probs);
  std::vector<double> dp(K, 0.0);
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const std::uint8_t y = labels[n];
    if (y == ignore_label) continue;
    const double p0 = std::clamp<double>(probs[n], kLogClamp, 1 - kLogClamp);
    const bool occ = y != 0;
    acc += occ ? -std::log(1 - p0) : -std::log(p0);
    dp[0] = (occ ? 1 / (1 - p0) : -1 / p0) / double(valid);
    softmax_backward_column(probs, dp, n, N, out.grad);
  }
  out.value = acc / double(valid);
  return out;
}

template <typename T>
LossGrad<T> depth_bce(const Tensor<T>& depth_dist, std::span<const int> gt_bin) {
  check_probs(depth_dist, gt_bin.size());
  const std::size_t D = depth_dist.dim(0), N = gt_bin.size();
  std::size_t valid = 0;
  for (int b : gt_bin) {
    if (b >= int(D)) throw ValueError("depth_bce: ground-truth bin out of range");
    if (b >= 0) ++valid;
  }
  if (valid == 0) throw ValueError("depth_bce: no valid pixels");
  LossGrad<T> out;
  out.grad = Tensor<T>::zeros_like(depth_dist);
  const double norm = double(D) * double(valid);
  std::vector<double> dp(D);
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const int y = gt_bin[n];
    if (y < 0) continue;
    double px = 0;
    for (std::size_t j = 0; j < D; ++j) {
      const double p = std::clamp<double>(depth_dist[j * N + n], kLogClamp, 1 - kLogClamp);
      const bool pos = int(j) == y;
      px += pos ? -std::log(p) : -std::log(1 - p);
      dp[j] = (pos ? -1 / p : 1 / (1 - p)) / norm;
    }
    acc += px;
    softmax_backward_column(depth_dist, dp, n, N, out.grad);
  }
  out.value = acc / norm;
  return out;
}

namespace {

std::size_t reflect(long i, std::size_t n) {
  if (i < 0) return static_cast<std::size_t>(-i);
  if (i >= long(n)) return static_cast<std::size_t>(2 * long(n) - 2 - i);
  return static_cast<std::size_t>(i);
}

void check_image(const Shape& a, const Shape& b) {
  if (a.size() != 3 || a != b) throw ShapeError("photometric: images must be equally shaped [C, h, w]");
  if (a[1] < 2 || a[2] < 2) throw ShapeError("photometric: reflection padding needs h, w >= 2");
}

// 3x3 box mean of f(a, b) with reflection padding, for one channel.
template <typename F>
std::vector<double> box_mean(std::size_t h, std::size_t w, F f) {
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) acc += f(reflect(long(y) + dy, h) * w + reflect(long(x) + dx, w));
      out[y * w + x] = acc / 9.0;
    }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> ssim_map(const Tensor<T>& a, const Tensor<T>& b) {
  check_image(a.shape(), b.shape());
  const std::size_t C = a.dim(0), h = a.dim(1), w = a.dim(2), n = h * w;
  Tensor<T> out({h, w});
  std::vector<double> acc(n, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const T* pa = a.raw() + c * n;
    const T* pb = b.raw() + c * n;
    const auto mx = box_mean(h, w, [&](std::size_t i) { return double(pa[i]); });
    const auto my = box_mean(h, w, [&](std::size_t i) { return double(pb[i]); });
    const auto sxx = box_mean(h, w, [&](std::size_t i) { return double(pa[i]) * pa[i]; });
    const auto syy = box_mean(h, w, [&](std::size_t i) { return double(pb[i]) * pb[i]; });
    const auto sxy = box_mean(h, w, [&](std::size_t i) { return double(pa[i]) * pb[i]; });
    for (std::size_t i = 0; i < n; ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      const double num = (2 * mx[i] * my[i] + kSsimC1) * (2 * cxy + kSsimC2);
      const double den = (mx[i] * mx[i] + my[i] * my[i] + kSsimC1) * (vx + vy + kSsimC2);
      acc[i] += num / den;
    }
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = T(acc[i] / double(C));
  return out;
}

template <typename T>
Tensor<T> photometric_error(const Tensor<T>& target, const Tensor<T>& warped, double lambda_ssim) {
  check_image(target.shape(), warped.shape());
  if (lambda_ssim < 0 || lambda_ssim > 1) throw ValueError("photometric_error: lambda_ssim must lie in [0, 1]");
  const std::size_t C = target.dim(0), n = target.dim(1) * target.dim(2);
  const Tensor<T> ssim = ssim_map(target, warped);
  Tensor<T> out({target.dim(1), target.dim(2)});
  for (std::size_t i = 0; i < n; ++i) {
    double l1 = 0;
    for (std::size_t c = 0; c < C; ++c) l1 += std::abs(double(target[c * n + i]) - double(warped[c * n + i]));
    const double dssim = std::clamp((1 - double(ssim[i])) / 2, 0.0, 1.0);
    out[i] = T(lambda_ssim * dssim + (1 - lambda_ssim) * l1 / double(C));
  }
  return out;
}

template <typename T>
double smoothness(const Tensor<T>& depth, const Tensor<T>& image) {
  if (depth.ndim() != 2 || image.ndim() != 3 || image.dim(1) != depth.dim(0) || image.dim(2) != depth.dim(1)) {
    throw ShapeError("smoothness: depth [h, w] and image [C, h, w] must agree");
  }
  const std::size_t C = image.dim(0), h = depth.dim(0), w = depth.dim(1), n = h * w;
  auto edge = [&](std::size_t i, std::size_t j) {
    double g = 0;
    for (std::size_t c = 0; c < C; ++c) g += std::abs(double(image[c * n + i]) - double(image[c * n + j]));
    return std::exp(-g / double(C));
  };
  double sx = 0, sy = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x + 1 < w; ++x) {
      const std::size_t i = y * w + x;
      sx += std::abs(double(depth[i + 1]) - double(depth[i])) * edge(i + 1, i);
    }
  for (std::size_t y = 0; y + 1 < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      sy += std::abs(double(depth[i + w]) - double(depth[i])) * edge(i + w, i);
    }
  const double mx = w > 1 ? sx / double(h * (w - 1)) : 0.0;
  const double my = h > 1 ? sy / double((h - 1) * w) : 0.0;
  return mx + my;
}

LossBreakdown total_loss(const std::vector<LossTerm>& terms) {
  LossBreakdown out;
  out.terms = terms;
  for (const auto& t : terms) {
    if (!(t.lambda >= 0)) throw ValueError("total_loss: weight for " + t.name + " must be non-negative");
    out.total += t.lambda * t.value;
  }
  return out;
}

#define HTCL_INSTANTIATE_LOSSES(T)                                                                             \
  template LossGrad<T> weighted_ce(const Tensor<T>&, std::span<const std::uint8_t>, std::span<const double>,   \
                                   std::uint8_t);                                                              \
  template LossGrad<T> cross_entropy(const Tensor<T>&, std::span<const std::uint8_t>, std::uint8_t);           \
  template LossGrad<T> occupancy_bce(const Tensor<T>&, std::span<const std::uint8_t>, std::uint8_t);           \
  template LossGrad<T> depth_bce(const Tensor<T>&, std::span<const int>);                                      \
  template Tensor<T> ssim_map(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> photometric_error(const Tensor<T>&, const Tensor<T>&, double);                            \
  template double smoothness(const Tensor<T>&, const Tensor<T>&);

HTCL_INSTANTIATE_LOSSES(float)
HTCL_INSTANTIATE_LOSSES(double)

}  // namespace htcl
