// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cmath>
#include <algorithm>
#include <numeric>
#include <random>

#include "htcl/verify.hpp"
#include "verify/check_runner.hpp"

namespace htcl {

using verify_detail::Outcome;
using verify_detail::run_check;

namespace {

constexpr double kExact = 1e-9;

CameraFrame moved(RandomSource& r, const CameraFrame& cam) {
  CameraFrame c = cam;
  c.R = r.rotation(0.1);
  c.t = {r.uniform(-0.4, 0.4), r.uniform(-0.2, 0.2), r.uniform(-0.4, 0.4)};
  return c;
}

std::string pixel_at(std::size_t j, std::size_t v, std::size_t u) {
  return "plane " + std::to_string(j) + " pixel (" + std::to_string(u) + "," + std::to_string(v) + ")";
}

CheckResult identity_warp(const VerifyOptions& o) {
  return run_check("camera_geometry", "identity_pose_grid_is_pixel_centers", kExact, o.seeds, o.base_seed,
                   [](std::uint64_t s) {
                     RandomSource r(s);
                     const std::size_t fw = r.integer(2, 16), fh = r.integer(2, 12), scale = r.integer(1, 4);
                     const CameraFrame cam = r.camera(fw * scale, fh * scale);
                     const auto hyp = DepthHypotheses::inverse_depth(r.uniform(0.5, 2), r.uniform(3, 20), r.integer(1, 8));
                     const auto g = build_warp_grid(cam, cam, hyp, fh, fw);
                     Outcome w;
                     for (std::size_t j = 0; j < hyp.count(); ++j)
                       for (std::size_t v = 0; v < fh; ++v)
                         for (std::size_t u = 0; u < fw; ++u) {
                           const double e = std::max(std::abs(g.coords(j, v, u, 0) - (u + 0.5)),
                                                     std::abs(g.coords(j, v, u, 1) - (v + 0.5)));
                           if (!(e <= w.error)) w = {e, pixel_at(j, v, u)};
                           if (!g.mask(j, v, u)) w = {w.error, pixel_at(j, v, u) + " masked out", false};
                         }
                     return w;
                   });
}

CheckResult round_trip(const VerifyOptions& o) {
  return run_check("camera_geometry", "project_backproject_round_trip", kExact, o.seeds, o.base_seed,
                   [](std::uint64_t s) {
                     RandomSource r(s);
                     const CameraFrame cam = r.camera(std::size_t(r.uniform(32, 640)), std::size_t(r.uniform(24, 480)));
                     Outcome w;
                     for (int i = 0; i < 20; ++i) {
                       const Eigen::Vector3d p(r.uniform(0, double(cam.width)), r.uniform(0, double(cam.height)), 1);
                       const double d = r.uniform(0.2, 50);
                       const Eigen::Vector3d back = project(backproject(p, d, cam.K), cam.K);
                       const double e = (back - p).head<2>().cwiseAbs().maxCoeff();
                       if (!(e <= w.error)) w = {e, "pixel (" + std::to_string(p.x()) + "," + std::to_string(p.y()) + ")"};
                       const Eigen::Vector3d X = backproject(p, d, cam.K);
                       const double ez = std::abs(X.z() - d) / d;
                       if (!(ez <= w.error)) w = {ez, "depth " + std::to_string(d)};
                     }
                     return w;
                   });
}

CheckResult two_view(const VerifyOptions& o) {
  return run_check("camera_geometry", "two_view_warp_at_true_depth", 1e-6, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const CameraFrame cur = r.camera(128, 96);
    const CameraFrame his = moved(r, r.camera(128, 96));
    Outcome w;
    for (int i = 0; i < 20; ++i) {
      const Eigen::Vector3d X(r.uniform(-2, 2), r.uniform(-1, 1), r.uniform(2, 12));
      const Eigen::Vector3d Xh = his.R * X + his.t;
      if (Xh.z() < 0.5) continue;
      const Eigen::Vector3d p0 = project(X, cur.K);
      const WarpResult wr = warp_pixel(p0, X.z(), cur.K, his.K, his.R, his.t);
      const double e = (wr.pixel - project(Xh, his.K).head<2>()).norm();
      if (!(e <= w.error)) w = {e, "point (" + std::to_string(X.x()) + "," + std::to_string(X.y()) + "," + std::to_string(X.z()) + ")"};
      if (!wr.valid) w = {w.error, "valid point rejected", false};
    }
    return w;
  });
}

CheckResult homography(const VerifyOptions& o) {
  return run_check("camera_geometry", "warp_grid_vs_plane_homography", kExact, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t fw = r.integer(2, 16), fh = r.integer(2, 12), scale = r.integer(1, 4);
    const CameraFrame cur = r.camera(fw * scale, fh * scale);
    const CameraFrame his = moved(r, r.camera(fw * scale, fh * scale));
    const auto hyp = DepthHypotheses::inverse_depth(r.uniform(0.5, 2), r.uniform(3, 20), r.integer(1, 8));
    const auto got = build_warp_grid(cur, his, hyp, fh, fw);
    const auto want = naive::warp_grid(cur, his, hyp, fh, fw);
    Outcome w;
    for (std::size_t j = 0; j < hyp.count(); ++j)
      for (std::size_t v = 0; v < fh; ++v)
        for (std::size_t u = 0; u < fw; ++u) {
          if (!want.mask(j, v, u)) continue;
          // Pixel-scale relative error, since far-off warps have large coordinates.
          const double mag = std::max(1.0, std::abs(want.coords(j, v, u, 0)) + std::abs(want.coords(j, v, u, 1)));
          const double e = std::max(std::abs(got.coords(j, v, u, 0) - want.coords(j, v, u, 0)),
                                    std::abs(got.coords(j, v, u, 1) - want.coords(j, v, u, 1))) / mag;
          if (!(e <= w.error)) w = {e, pixel_at(j, v, u)};
          if (!got.mask(j, v, u)) w = {w.error, pixel_at(j, v, u) + " mask disagrees", false};
        }
    return w;
  });
}

CheckResult relative(const VerifyOptions& o) {
  return run_check("camera_geometry", "relative_pose_composition", kExact, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const CameraFrame a = moved(r, r.camera(64, 48)), b = moved(r, r.camera(64, 48));
    const RelativePose ab = relative_pose(a, b);
    Outcome w;
    for (int i = 0; i < 10; ++i) {
      const Eigen::Vector3d X(r.uniform(-3, 3), r.uniform(-3, 3), r.uniform(-3, 3));
      const double e = ((ab.R * (a.R * X + a.t) + ab.t) - (b.R * X + b.t)).cwiseAbs().maxCoeff();
      if (!(e <= w.error)) w = {e, "point " + std::to_string(i)};
    }
    return w;
  });
}

CheckResult epipolar(const VerifyOptions&) {
  return run_check("camera_geometry", "epipolar_consistency_default_scene", 1e-3, 1, 0, [](std::uint64_t) {
    const Scene scene = gen_scene(default_scene_spec());
    Outcome w;
    for (std::size_t n = 1; n < scene.frames.size(); ++n) {
      const auto st = epipolar_consistency(scene, n);
      if (!(st.mean_abs_error <= w.error)) w = {st.mean_abs_error, "history frame " + std::to_string(n)};
      if (st.pixels == 0) w = {w.error, "history frame " + std::to_string(n) + " has no interior pixels", false};
    }
    return w;
  });
}

bool same_feature(const TensorF& f, std::size_t v0, std::size_t u0, std::size_t v1, std::size_t u1) {
  for (std::size_t c = 0; c < f.dim(0); ++c)
    if (f(c, v0, u0) != f(c, v1, u1)) return false;
  return true;
}

}  // namespace

EpipolarStats epipolar_consistency(const Scene& scene, std::size_t history_frame) {
  const SceneFrame& cur = scene.frames.at(0);
  const SceneFrame& his = scene.frames.at(history_frame);
  const std::size_t h = scene.feat_h(), w = scene.feat_w(), C = scene.feature_channels();
  const WarpGrid grid = build_depth_warp_grid(cur.camera, his.camera, cur.depth);
  const TensorF warped = warp_feature(his.features, grid);
  EpipolarStats st;
  double total = 0;
  for (std::size_t v = 1; v + 1 < h; ++v)
    for (std::size_t u = 1; u + 1 < w; ++u) {
      if (!grid.mask(0, v, u)) continue;
      bool interior = true;
      for (int dv = -1; dv <= 1 && interior; ++dv)
        for (int du = -1; du <= 1 && interior; ++du) interior = same_feature(cur.features, v, u, v + dv, u + du);
      if (!interior) continue;
      const double sx = grid.coords(0, v, u, 0) - 0.5, sy = grid.coords(0, v, u, 1) - 0.5;
      const auto x0 = std::size_t(std::floor(sx)), y0 = std::size_t(std::floor(sy));
      if (x0 + 1 >= w || y0 + 1 >= h) continue;
      for (std::size_t b = 0; b < 4 && interior; ++b) interior = same_feature(his.features, y0, x0, y0 + b / 2, x0 + b % 2);
      if (!interior) continue;
      // Visibility: the warped point must be the first hit in the history view.
      const Eigen::Vector3d X =
          backproject(feature_pixel_center(cur.camera, h, w, u, v), cur.depth(v, u), cur.camera.K);
      const double z = (his.camera.R * X + his.camera.t).z();
      const double seen = his.depth(std::size_t(std::lround(sy)), std::size_t(std::lround(sx)));
      if (!(std::abs(seen - z) <= 0.02 * z)) continue;
      double e = 0;
      for (std::size_t c = 0; c < C; ++c) e += std::abs(double(warped(c, 0, v, u)) - double(cur.features(c, v, u)));
      e /= double(C);
      total += e;
      st.max_abs_error = std::max(st.max_abs_error, e);
      ++st.pixels;
    }
  st.mean_abs_error = st.pixels ? total / double(st.pixels) : 0;
  return st;
}

AffinitySignal affinity_signal(const PipelineConfig& cfg, const Scene& scene, const ModelParams& params,
                               std::uint64_t seed) {
  const Stage s = prepare_stage(cfg, scene, params);
  const std::size_t D = s.affinity.dim(0), h = s.affinity.dim(1), w = s.affinity.dim(2);
  std::vector<std::size_t> cells;
  for (std::size_t v = 0; v < h; ++v)
    for (std::size_t u = 0; u < w; ++u) {
      const int b = s.depth_bins[v * w + u];
      if (b >= 0 && s.coverage(std::size_t(b), v, u) > 0) cells.push_back((std::size_t(b) * h + v) * w + u);
    }
  MultiGroupParams<float> pc = params.context, ph = params.history_context();
  if (!cfg.ablation.multi_group) {
    pc.branches.resize(1);
    ph.branches.resize(1);
  }
  const auto mc = multi_group_context(s.v_cur, pc);
  auto mh = multi_group_context(s.v_his, ph);
  std::vector<std::size_t> perm(h * w);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(seed));
  for (auto& g : mh.groups) {
    const TensorF src = g;
    const std::size_t planes = g.dim(0) * D;
    for (std::size_t q = 0; q < planes; ++q)
      for (std::size_t p = 0; p < h * w; ++p) g[q * h * w + p] = src[q * h * w + perm[p]];
  }
  const TensorF permuted = affinity_reduce(cross_frame_affinity(mc, mh, cfg.ablation.scale_aware_isolation),
                                           cfg.affinity_reduce);
  AffinitySignal sig;
  sig.cells = cells.size();
  for (std::size_t c : cells) {
    sig.true_mean += s.affinity[c];
    sig.permuted_mean += permuted[c];
  }
  if (!cells.empty()) {
    sig.true_mean /= double(cells.size());
    sig.permuted_mean /= double(cells.size());
  }
  return sig;
}

SuiteReport geometry_suite(const VerifyOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport rep;
  rep.suite = "geometry";
  rep.checks.push_back(identity_warp(opts));
  rep.checks.push_back(round_trip(opts));
  rep.checks.push_back(two_view(opts));
  rep.checks.push_back(homography(opts));
  rep.checks.push_back(relative(opts));
  rep.checks.push_back(epipolar(opts));
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace htcl
