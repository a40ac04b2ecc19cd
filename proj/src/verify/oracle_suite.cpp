// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cmath>

#include "htcl/temporal_volume.hpp"
#include "htcl/verify.hpp"
#include "verify/check_runner.hpp"

namespace htcl {

using verify_detail::compare;
using verify_detail::Outcome;
using verify_detail::run_check;

namespace {

constexpr double kOracleTol = 1e-6;

Conv3dParams<double> random_conv(RandomSource& r, std::size_t co, std::size_t ci, std::size_t k, std::size_t dil,
                                 std::size_t pad) {
  Conv3dParams<double> p;
  p.weights = r.tensor({co, ci, k, k, k});
  p.bias = r.tensor({co});
  p.dilation = dil;
  p.padding = pad;
  return p;
}

DeformParams<double> random_deform(RandomSource& r, std::size_t c, std::size_t co, std::size_t kernel) {
  auto dp = make_deform_params<double>(c, co, kernel, 1);
  dp.proj.weights = r.tensor(dp.proj.weights.shape());
  dp.proj.bias = r.tensor(dp.proj.bias.shape());
  return dp;
}

AttentionParams<double> random_attention(RandomSource& r, std::size_t c, std::size_t cr, std::size_t heads,
                                         std::size_t dh, std::size_t pos) {
  auto ap = make_attention_params<double>(c, cr, heads * dh, heads, pos);
  for (Tensor<double>* t : {&ap.q_w, &ap.q_b, &ap.k_w, &ap.k_b, &ap.v_w, &ap.v_b, &ap.out_w, &ap.out_b}) {
    *t = r.tensor(t->shape());
  }
  ap.alpha = r.uniform(-1.5, 1.5);
  return ap;
}

// Grid in front of the camera so that most of the frustum is covered.
VoxelGridSpec random_grid(RandomSource& r) {
  VoxelGridSpec g;
  g.dims = {r.integer(3, 6), r.integer(2, 5), r.integer(3, 6)};
  g.voxel_size = r.uniform(0.3, 0.7);
  g.origin = {-double(g.dims[0]) * g.voxel_size / 2 + r.uniform(-0.1, 0.1),
              -double(g.dims[1]) * g.voxel_size / 2 + r.uniform(-0.1, 0.1), r.uniform(0.7, 1.2)};
  return g;
}

CheckResult conv_check(const VerifyOptions& o) {
  const ConvFn impl = o.conv ? o.conv : ConvFn([](const TensorD& x, const Conv3dParams<double>& p) {
    return htcl::conv3d(x, p);
  });
  return run_check("tensor_core", "conv3d_vs_nested_loops", kOracleTol, o.seeds, o.base_seed, [&](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t k = r.integer(0, 1) ? 3 : 1, dil = r.integer(1, 2);
    const std::size_t span = dil * (k - 1);
    const std::size_t pad = r.integer(0, 1) ? span / 2 : r.integer(0, span);
    const std::size_t lo = span > 2 * pad ? span - 2 * pad + 1 : 1;
    const TensorD x = r.tensor({r.integer(1, 3), r.integer(std::max<std::size_t>(lo, 2), 5),
                                r.integer(std::max<std::size_t>(lo, 2), 5), r.integer(std::max<std::size_t>(lo, 2), 5)});
    const auto p = random_conv(r, r.integer(1, 3), x.dim(0), k, dil, pad);
    return compare(impl(x, p), naive::conv3d(x, p));
  });
}

CheckResult trilinear_check(const VerifyOptions& o) {
  return run_check("tensor_core", "trilinear_vs_corner_blend", kOracleTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const TensorD vol = r.tensor({r.integer(1, 3), r.integer(1, 5), r.integer(1, 5), r.integer(1, 5)});
    TensorD coords({r.integer(5, 30), 3});
    for (std::size_t i = 0; i < coords.dim(0); ++i)
      for (std::size_t a = 0; a < 3; ++a) {
        const double n = double(vol.dim(a + 1));
        // A quarter of the lookups land exactly on lattice nodes.
        coords(i, a) = r.integer(0, 3) == 0 ? double(r.integer(0, vol.dim(a + 1) - 1)) : r.uniform(-0.5, n - 0.5);
      }
    return compare(trilinear_sample(vol, coords), naive::trilinear_sample(vol, coords));
  });
}

CheckResult softmax_check(const VerifyOptions& o) {
  return run_check("tensor_core", "softmax_vs_direct_formula", 1e-12, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const TensorD x = r.tensor({r.integer(2, 6), r.integer(1, 4)}, -5, 5);
    TensorD want(x.shape());
    for (std::size_t j = 0; j < x.dim(1); ++j) {
      double z = 0;
      for (std::size_t i = 0; i < x.dim(0); ++i) z += std::exp(x(i, j));
      for (std::size_t i = 0; i < x.dim(0); ++i) want(i, j) = std::exp(x(i, j)) / z;
    }
    return compare(softmax(x, 0), want);
  });
}

CheckResult group_norm_check(const VerifyOptions& o) {
  return run_check("tensor_core", "group_norm_vs_two_pass", kOracleTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t groups = r.integer(1, 3), C = groups * r.integer(1, 3);
    const TensorD x = r.tensor({C, r.integer(1, 4), r.integer(1, 4)}, -3, 3);
    const TensorD gamma = r.tensor({C}), beta = r.tensor({C});
    const std::size_t n = x.stride(0), gc = C / groups;
    TensorD want(x.shape());
    for (std::size_t g = 0; g < groups; ++g) {
      double mean = 0, var = 0;
      for (std::size_t i = g * gc * n; i < (g + 1) * gc * n; ++i) mean += x[i];
      mean /= double(gc * n);
      for (std::size_t i = g * gc * n; i < (g + 1) * gc * n; ++i) var += (x[i] - mean) * (x[i] - mean);
      var /= double(gc * n);
      for (std::size_t i = g * gc * n; i < (g + 1) * gc * n; ++i) {
        const std::size_t c = i / n;
        want[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * gamma[c] + beta[c];
      }
    }
    return compare(group_norm(x, groups, gamma, beta, 1e-5), want);
  });
}

CheckResult affinity_oracle_check(const VerifyOptions& o) {
  return run_check("pattern_affinity", "group_affinity_vs_pearson", kOracleTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const Shape shape{r.integer(2, 6), r.integer(1, 3), r.integer(1, 4), r.integer(1, 4)};
    TensorD a = r.tensor(shape), b = r.tensor(shape);
    // A constant-pattern location exercises the variance cut.
    for (std::size_t c = 0; c < shape[0]; ++c) a[c * a.stride(0)] = 0.25;
    return compare(group_affinity(a, b), naive::group_affinity(a, b));
  });
}

// sign(scale) wherever both a and scale * a clear the variance cut, else 0.
TensorD expected_affinity(const TensorD& a, double scale) {
  TensorD want(Shape(a.shape().begin() + 1, a.shape().end()), scale > 0 ? 1.0 : -1.0);
  const std::size_t C = a.dim(0), n = want.size();
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < C; ++c) m += a[c * n + i] / double(C);
    for (std::size_t c = 0; c < C; ++c) v += (a[c * n + i] - m) * (a[c * n + i] - m) / double(C);
    if (std::min(v, v * scale * scale) <= kAffinityEps) want[i] = 0;
  }
  return want;
}

// Affinity properties: range, self-affinity, affine invariance, cosine contrast.
std::vector<CheckResult> affinity_property_checks(const VerifyOptions& o) {
  std::vector<CheckResult> out;
  auto volume = [](RandomSource& r) {
    return r.tensor({r.integer(2, 8), r.integer(1, 3), r.integer(2, 4), r.integer(2, 4)}, -2, 2);
  };
  out.push_back(run_check("pattern_affinity", "range_within_unit", 1e-6, o.seeds, o.base_seed, [&](std::uint64_t s) {
    RandomSource r(s);
    const TensorD a = volume(r), b = r.tensor(a.shape(), -2, 2);
    Outcome w;
    const TensorD m = group_affinity(a, b);
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double e = std::max(0.0, std::abs(m[i]) - 1);
      if (!(e <= w.error)) w = {e, verify_detail::index_str(m.shape(), i)};
    }
    return w;
  }));
  out.push_back(run_check("pattern_affinity", "self_affinity_is_one", 1e-6, o.seeds, o.base_seed, [&](std::uint64_t s) {
    RandomSource r(s);
    const TensorD a = volume(r);
    return compare(group_affinity(a, a), expected_affinity(a, 1.0));
  }));
  out.push_back(run_check("pattern_affinity", "affine_invariance", 1e-6, o.seeds, o.base_seed, [&](std::uint64_t s) {
    RandomSource r(s);
    const TensorD a = volume(r);
    const double scale = (r.integer(0, 1) ? 1 : -1) * std::exp(r.uniform(std::log(0.1), std::log(10.0)));
    const double shift = r.uniform(-5, 5);
    TensorD b(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) b[i] = scale * a[i] + shift;
    return compare(group_affinity(a, b), expected_affinity(a, scale));
  }));
  out.push_back(run_check("pattern_affinity", "cosine_contrast_under_shift", 1e-6, o.seeds, o.base_seed,
                          [&](std::uint64_t s) {
                            RandomSource r(s);
                            const TensorD a = volume(r);
                            TensorD b(a.shape());
                            const double shift = r.uniform(0.5, 3);
                            for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] + shift;
                            Outcome w = compare(group_affinity(a, b), expected_affinity(a, 1.0), "cpa");
                            const TensorD cos = cosine_baseline(a, b);
                            double mean = 0;
                            for (double v : cos.data()) mean += v / double(cos.size());
                            if (!(mean < 1 - 1e-6)) {
                              w.ok = false;
                              w.location = "cosine baseline mean " + std::to_string(mean) + " not below 1";
                            }
                            return w;
                          }));
  return out;
}

CheckResult deformable_check(const VerifyOptions& o) {
  return run_check("dynamic_refinement", "deformable_sample_vs_loops", kOracleTol, o.seeds, o.base_seed,
                   [](std::uint64_t s) {
                     RandomSource r(s);
                     const std::size_t C = r.integer(1, 3), kernel = r.integer(0, 1) ? 3 : 1;
                     const TensorD vol = r.tensor({C, r.integer(1, 4), r.integer(1, 4), r.integer(1, 4)});
                     const std::size_t D = vol.dim(1), H = vol.dim(2), W = vol.dim(3);
                     const auto dp = random_deform(r, C, r.integer(1, 3), kernel);
                     const std::size_t K = dp.footprint();
                     const TensorD off = r.tensor({K, 3, D, H, W}, -1.5, 1.5);
                     const TensorD wts = r.tensor({K, D, H, W}, 0.01, 0.99);
                     const TensorD aff = r.tensor({D, H, W});
                     return compare(deformable_sample(vol, off, wts, aff, dp),
                                    naive::deformable_sample(vol, off, wts, aff, dp));
                   });
}

CheckResult lift_splat_check(const VerifyOptions& o) {
  return run_check("voxel_aggregation", "lift_splat_vs_scatter", kOracleTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t fw = r.integer(3, 8), fh = r.integer(3, 6), scale = r.integer(1, 4);
    CameraFrame cam = r.camera(fw * scale, fh * scale);
    cam.R = r.rotation(0.1);
    cam.t = {r.uniform(-0.2, 0.2), r.uniform(-0.2, 0.2), r.uniform(-0.2, 0.2)};
    const auto hyp = DepthHypotheses::inverse_depth(r.uniform(0.8, 1.5), r.uniform(2.5, 5), r.integer(2, 6));
    const auto grid = random_grid(r);
    const TensorD ctx = r.tensor({r.integer(1, 3), fh, fw});
    const TensorD dist = depth_distribution(r.tensor({hyp.count(), fh, fw}, -2, 2));
    return compare(lift_splat(ctx, dist, cam, hyp, grid), naive::lift_splat(ctx, dist, cam, hyp, grid));
  });
}

CheckResult attention_check(const VerifyOptions& o) {
  return run_check("voxel_aggregation", "cross_attention_vs_loops", kOracleTol, o.seeds, o.base_seed,
                   [](std::uint64_t s) {
                     RandomSource r(s);
                     const std::size_t C = r.integer(1, 4), Cr = r.integer(1, 4), P = r.integer(0, 1) ? 4 : 0;
                     const TensorD vox = r.tensor({C, r.integer(1, 3), r.integer(1, 3), r.integer(1, 3)});
                     const TensorD rel = r.tensor({Cr, r.integer(1, 3), r.integer(1, 3), r.integer(1, 4)});
                     const auto ap = random_attention(r, C, Cr, r.integer(1, 2), r.integer(1, 3), P);
                     PositionalEncoding<double> pe;
                     if (P) {
                       pe.query = r.tensor({P, vox.dim(1), vox.dim(2), vox.dim(3)});
                       pe.key = r.tensor({P, rel.dim(1), rel.dim(2), rel.dim(3)});
                     }
                     return compare(weighted_cross_attention(vox, rel, ap, pe), naive::cross_attention(vox, rel, ap, pe));
                   });
}

CheckResult ssim_check(const VerifyOptions& o) {
  return run_check("losses_metrics", "ssim_vs_window_loops", kOracleTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const Shape shape{r.integer(1, 3), r.integer(2, 6), r.integer(2, 6)};
    const TensorD a = r.tensor(shape, 0, 1), b = r.tensor(shape, 0, 1);
    return compare(ssim_map(a, b), naive::ssim_map(a, b));
  });
}

CheckResult warp_feature_check(const VerifyOptions& o) {
  return run_check("camera_geometry", "warp_feature_vs_bilinear", kOracleTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t fw = r.integer(3, 8), fh = r.integer(3, 6), scale = r.integer(1, 4);
    const CameraFrame cur = r.camera(fw * scale, fh * scale);
    CameraFrame his = cur;
    his.R = r.rotation(0.08);
    his.t = {r.uniform(-0.3, 0.3), r.uniform(-0.1, 0.1), r.uniform(-0.3, 0.3)};
    const auto hyp = DepthHypotheses::inverse_depth(1, r.uniform(3, 8), r.integer(1, 5));
    const auto grid = build_warp_grid(cur, his, hyp, fh, fw);
    const TensorD src = r.tensor({r.integer(1, 3), fh, fw});
    return compare(warp_feature(src, grid), naive::warp_feature(src, grid));
  });
}

}  // namespace

SuiteReport oracle_suite(const VerifyOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport rep;
  rep.suite = "oracle";
  rep.checks.push_back(conv_check(opts));
  rep.checks.push_back(trilinear_check(opts));
  rep.checks.push_back(softmax_check(opts));
  rep.checks.push_back(group_norm_check(opts));
  rep.checks.push_back(affinity_oracle_check(opts));
  for (auto& c : affinity_property_checks(opts)) rep.checks.push_back(std::move(c));
  rep.checks.push_back(deformable_check(opts));
  rep.checks.push_back(lift_splat_check(opts));
  rep.checks.push_back(attention_check(opts));
  rep.checks.push_back(ssim_check(opts));
  rep.checks.push_back(warp_feature_check(opts));
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace htcl
