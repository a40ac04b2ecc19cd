// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "htcl/verify.hpp"

namespace htcl::naive {

TensorD conv3d(const TensorD& x, const Conv3dParams<double>& p) {
  const std::size_t Ci = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = p.weights.dim(0), k = p.weights.dim(2);
  const long pad = long(p.padding), dil = long(p.dilation), span = dil * (long(k) - 1);
  const long Do = long(D) + 2 * pad - span, Ho = long(H) + 2 * pad - span, Wo = long(W) + 2 * pad - span;
  TensorD out({Co, std::size_t(Do), std::size_t(Ho), std::size_t(Wo)});
  for (std::size_t o = 0; o < Co; ++o)
    for (long z = 0; z < Do; ++z)
      for (long y = 0; y < Ho; ++y)
        for (long xx = 0; xx < Wo; ++xx) {
          double acc = p.bias[o];
          for (std::size_t i = 0; i < Ci; ++i)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b)
                for (std::size_t c = 0; c < k; ++c) {
                  const long sz = z - pad + long(a) * dil, sy = y - pad + long(b) * dil, sx = xx - pad + long(c) * dil;
                  if (sz < 0 || sy < 0 || sx < 0 || sz >= long(D) || sy >= long(H) || sx >= long(W)) continue;
                  acc += p.weights(o, i, a, b, c) * x(i, sz, sy, sx);
                }
          out(o, z, y, xx) = acc;
        }
  return out;
}

namespace {

// Value of channel c of vol [C, D, H, W] at one continuous point, zero border.
double sample_one(const TensorD& vol, std::size_t c, double pd, double ph, double pw) {
  const double p[3] = {pd, ph, pw};
  const std::size_t n[3] = {vol.dim(1), vol.dim(2), vol.dim(3)};
  for (int a = 0; a < 3; ++a) {
    if (!(p[a] >= 0 && p[a] <= double(n[a] - 1))) return 0;
  }
  const double f[3] = {std::floor(pd), std::floor(ph), std::floor(pw)};
  double acc = 0;
  for (int dd = 0; dd <= 1; ++dd)
    for (int dh = 0; dh <= 1; ++dh)
      for (int dw = 0; dw <= 1; ++dw) {
        const double corner[3] = {f[0] + dd, f[1] + dh, f[2] + dw};
        const int on[3] = {dd, dh, dw};
        double weight = 1;
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
          const double t = p[a] - f[a];
          weight *= on[a] ? t : 1 - t;
          if (corner[a] > double(n[a] - 1)) inside = false;
        }
        if (!inside || weight == 0) continue;
        acc += weight * vol(c, std::size_t(corner[0]), std::size_t(corner[1]), std::size_t(corner[2]));
      }
  return acc;
}

}  // namespace

TensorD trilinear_sample(const TensorD& vol, const TensorD& coords) {
  const std::size_t C = vol.dim(0), n = coords.size() / 3;
  Shape shape{C};
  for (std::size_t a = 0; a + 1 < coords.ndim(); ++a) shape.push_back(coords.dim(a));
  TensorD out(shape);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i) out[c * n + i] = sample_one(vol, c, coords[3 * i], coords[3 * i + 1], coords[3 * i + 2]);
  return out;
}

TensorD group_affinity(const TensorD& ci, const TensorD& hi) {
  const std::size_t C = ci.dim(0), n = ci.stride(0);
  TensorD out(Shape(ci.shape().begin() + 1, ci.shape().end()));
  for (std::size_t i = 0; i < n; ++i) {
    double ma = 0, mb = 0;
    for (std::size_t c = 0; c < C; ++c) {
      ma += ci[c * n + i];
      mb += hi[c * n + i];
    }
    ma /= double(C);
    mb /= double(C);
    double dot = 0, va = 0, vb = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const double x = ci[c * n + i] - ma, y = hi[c * n + i] - mb;
      dot += x * y;
      va += x * x;
      vb += y * y;
    }
    if (va / double(C) <= kAffinityEps || vb / double(C) <= kAffinityEps) {
      out[i] = 0;
      continue;
    }
    out[i] = std::clamp(dot / std::sqrt(va * vb), -1.0, 1.0);
  }
  return out;
}

TensorD deformable_sample(const TensorD& volume, const TensorD& offsets, const TensorD& weights,
                          const TensorD& affinity, const DeformParams<double>& dp) {
  const std::size_t C = volume.dim(0), D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
  const std::size_t K = dp.base_grid.size(), Co = dp.proj.out_channels();
  const TensorD aff = affinity.reshaped({1, D, H, W});
  TensorD out({Co, D, H, W});
  std::vector<double> acc(C);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < K; ++k) {
          const auto& b = dp.base_grid[k];
          const double pd = double(d) + b[0] + offsets(k, 0, d, h, w);
          const double ph = double(h) + b[1] + offsets(k, 1, d, h, w);
          const double pw = double(w) + b[2] + offsets(k, 2, d, h, w);
          const double gate = weights(k, d, h, w) * sample_one(aff, 0, pd, ph, pw);
          for (std::size_t c = 0; c < C; ++c) acc[c] += gate * sample_one(volume, c, pd, ph, pw);
        }
        for (std::size_t o = 0; o < Co; ++o) {
          double v = dp.proj.bias[o];
          for (std::size_t c = 0; c < C; ++c) v += dp.proj.weights(o, c, 0, 0, 0) * acc[c];
          out(o, d, h, w) = v;
        }
      }
  return out;
}

TensorD lift_splat(const TensorD& context, const TensorD& depth_dist, const CameraFrame& cam,
                   const DepthHypotheses& hyp, const VoxelGridSpec& spec) {
  const std::size_t C = context.dim(0), h = context.dim(1), w = context.dim(2);
  const auto [X, Y, Z] = spec.dims;
  TensorD sum({C, X, Y, Z});
  std::vector<std::size_t> count(spec.count(), 0);
  const Eigen::Matrix3d Kinv = cam.K.inverse();
  for (std::size_t j = 0; j < hyp.count(); ++j)
    for (std::size_t v = 0; v < h; ++v)
      for (std::size_t u = 0; u < w; ++u) {
        const Eigen::Vector3d px((u + 0.5) * double(cam.width) / double(w), (v + 0.5) * double(cam.height) / double(h),
                                 1.0);
        const Eigen::Vector3d p = cam.R.transpose() * (Kinv * px * hyp[j] - cam.t);
        long idx[3];
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
          idx[a] = long(std::floor((p[a] - spec.origin[a]) / spec.voxel_size));
          if (idx[a] < 0 || idx[a] >= long(spec.dims[a])) inside = false;
        }
        if (!inside) continue;
        const std::size_t vox = spec.flat(idx[0], idx[1], idx[2]);
        ++count[vox];
        for (std::size_t c = 0; c < C; ++c) sum[c * spec.count() + vox] += context(c, v, u) * depth_dist(j, v, u);
      }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < spec.count(); ++i)
      if (count[i]) sum[c * spec.count() + i] /= double(count[i]);
  return sum;
}

TensorD cross_attention(const TensorD& vox, const TensorD& rel, const AttentionParams<double>& ap,
                        const PositionalEncoding<double>& pe) {
  const std::size_t C = vox.dim(0), Cr = rel.dim(0), nq = vox.stride(0), nk = rel.stride(0);
  const std::size_t P = pe.channels(), dim = ap.dim(), dh = dim / ap.heads;
  auto q_in = [&](std::size_t c, std::size_t i) { return c < C ? vox[c * nq + i] : pe.query[(c - C) * nq + i]; };
  auto k_in = [&](std::size_t c, std::size_t i) { return c < Cr ? rel[c * nk + i] : pe.key[(c - Cr) * nk + i]; };
  std::vector<double> q(dim * nq), k(dim * nk), v(dim * nk);
  for (std::size_t r = 0; r < dim; ++r) {
    for (std::size_t i = 0; i < nq; ++i) {
      double s = ap.q_b[r];
      for (std::size_t c = 0; c < C + P; ++c) s += ap.q_w(r, c) * q_in(c, i);
      q[r * nq + i] = s;
    }
    for (std::size_t i = 0; i < nk; ++i) {
      double s = ap.k_b[r], t = ap.v_b[r];
      for (std::size_t c = 0; c < Cr + P; ++c) s += ap.k_w(r, c) * k_in(c, i);
      for (std::size_t c = 0; c < Cr; ++c) t += ap.v_w(r, c) * rel[c * nk + i];
      k[r * nk + i] = s;
      v[r * nk + i] = t;
    }
  }
  TensorD out(vox.shape());
  std::vector<double> score(nk), ctx(dim);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t hd = 0; hd < ap.heads; ++hd) {
      double best = -INFINITY;
      for (std::size_t j = 0; j < nk; ++j) {
        double s = 0;
        for (std::size_t r = hd * dh; r < (hd + 1) * dh; ++r) s += q[r * nq + i] * k[r * nk + j];
        score[j] = s / std::sqrt(double(dh));
        best = std::max(best, score[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < nk; ++j) z += std::exp(score[j] - best);
      for (std::size_t r = hd * dh; r < (hd + 1) * dh; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < nk; ++j) s += std::exp(score[j] - best) / z * v[r * nk + j];
        ctx[r] = s;
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      double s = ap.out_b[c];
      for (std::size_t r = 0; r < dim; ++r) s += ap.out_w(c, r) * ctx[r];
      out[c * nq + i] = ap.alpha * s + vox[c * nq + i];
    }
  }
  return out;
}

TensorD ssim_map(const TensorD& a, const TensorD& b) {
  const std::size_t C = a.dim(0), h = a.dim(1), w = a.dim(2);
  auto refl = [](long i, long n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  TensorD out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double total = 0;
      for (std::size_t c = 0; c < C; ++c) {
        double xs[9], ys[9];
        int n = 0;
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx, ++n) {
            const std::size_t yy = refl(long(y) + dy, long(h)), xx = refl(long(x) + dx, long(w));
            xs[n] = a(c, yy, xx);
            ys[n] = b(c, yy, xx);
          }
        double mx = 0, my = 0;
        for (int i = 0; i < 9; ++i) {
          mx += xs[i] / 9;
          my += ys[i] / 9;
        }
        double vx = 0, vy = 0, cxy = 0;
        for (int i = 0; i < 9; ++i) {
          vx += (xs[i] - mx) * (xs[i] - mx) / 9;
          vy += (ys[i] - my) * (ys[i] - my) / 9;
          cxy += (xs[i] - mx) * (ys[i] - my) / 9;
        }
        total += (2 * mx * my + kSsimC1) * (2 * cxy + kSsimC2) / ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
      }
      out(y, x) = total / double(C);
    }
  return out;
}

TensorD warp_feature(const TensorD& src, const WarpGrid& grid) {
  const std::size_t C = src.dim(0), h = src.dim(1), w = src.dim(2), D = grid.mask.dim(0);
  const TensorD vol = src.reshaped({C, 1, h, w});
  TensorD out({C, D, h, w});
  for (std::size_t j = 0; j < D; ++j)
    for (std::size_t v = 0; v < h; ++v)
      for (std::size_t u = 0; u < w; ++u) {
        if (!grid.mask(j, v, u)) continue;
        for (std::size_t c = 0; c < C; ++c) {
          out(c, j, v, u) = sample_one(vol, c, 0, std::clamp(grid.coords(j, v, u, 1) - 0.5, 0.0, h - 1.0),
                                       std::clamp(grid.coords(j, v, u, 0) - 0.5, 0.0, w - 1.0));
        }
      }
  return out;
}

WarpGrid warp_grid(const CameraFrame& cur, const CameraFrame& his, const DepthHypotheses& hyp, std::size_t feat_h,
                   std::size_t feat_w) {
  const std::size_t D = hyp.count();
  WarpGrid g{TensorD({D, feat_h, feat_w, 2}), Mask({D, feat_h, feat_w})};
  const Eigen::Vector3d n(0, 0, 1);
  for (std::size_t j = 0; j < D; ++j) {
    const Eigen::Matrix3d Hm = his.K * (his.R + his.t * n.transpose() / hyp[j]) * cur.K.inverse();
    for (std::size_t v = 0; v < feat_h; ++v)
      for (std::size_t u = 0; u < feat_w; ++u) {
        const Eigen::Vector3d p((u + 0.5) * double(cur.width) / double(feat_w),
                                (v + 0.5) * double(cur.height) / double(feat_h), 1.0);
        const Eigen::Vector3d q = Hm * p;
        if (!(q.z() * hyp[j] > 1e-6)) continue;
        const double x = q.x() / q.z() * double(feat_w) / double(his.width);
        const double y = q.y() / q.z() * double(feat_h) / double(his.height);
        g.coords(j, v, u, 0) = x;
        g.coords(j, v, u, 1) = y;
        g.mask(j, v, u) = x >= 0.5 - 1e-9 && x <= feat_w - 0.5 + 1e-9 && y >= 0.5 - 1e-9 && y <= feat_h - 0.5 + 1e-9;
      }
  }
  return g;
}

}  // namespace htcl::naive
