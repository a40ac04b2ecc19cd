// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, tolerances and time
// budgets pinned below. Exit status 1 if any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "htcl/parallel.hpp"
#include "htcl/pipeline.hpp"
#include "htcl/verify.hpp"

using namespace htcl;

namespace {

constexpr std::size_t kSeeds = 100;
constexpr double kGridTol = 1e-9;       // identity grid and projective round trip
constexpr double kTwoViewTol = 1e-6;    // pixels
constexpr double kEpipolarTol = 1e-3;   // mean abs feature error
constexpr double kAffinityTol = 1e-6;
constexpr double kSignalMargin = 0.2;
constexpr double kOracleTol = 1e-6;     // relative
constexpr double kGradTol = 1e-4;       // relative
constexpr double kSoftmaxTol = 1e-6;

struct Verdict {
  bool ok = true;
  std::string detail;
  double seconds = -1;  // when set, replaces the wall-clock time of the body

  void require(bool cond, const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
    if (!cond) {
      ok = false;
      detail += " [violated]";
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int failures = 0;

void criterion(int id, const char* title, double budget_s, const std::function<Verdict()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v.ok = false;
    v.detail = std::string("exception: ") + e.what();
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (v.seconds >= 0) secs = v.seconds;
  const bool in_time = secs < budget_s;
  const bool pass = v.ok && in_time;
  failures += !pass;
  std::printf("%s %2d %s: %s (%.2fs, budget %.0fs%s)\n", pass ? "PASS" : "FAIL", id, title, v.detail.c_str(), secs,
              budget_s, in_time ? "" : ", over budget");
  std::fflush(stdout);
}

// Requires a suite check to exist, pass, run enough cases and use at most `tol`.
void suite_check(Verdict& v, double& seconds, const SuiteReport& rep, const std::string& module,
                 const std::string& name, double tol, std::size_t min_cases) {
  const CheckResult* c = rep.find(module, name);
  if (!c) {
    v.require(false, name + " missing");
    return;
  }
  seconds += c->seconds;
  std::string what = name + " " + fmt("%.1e", c->max_error) + " <= " + fmt("%.0e", tol);
  if (!c->passed()) what += " (seed " + std::to_string(c->worst_seed) + " at " + c->location + ")";
  v.require(c->passed() && c->tolerance <= tol && c->cases >= min_cases, what);
}

bool any_intermediate_differs(const PipelineResult& a, const PipelineResult& b) {
  const auto ia = intermediates(a), ib = intermediates(b);
  if (ia.size() != ib.size()) return true;
  for (std::size_t i = 0; i < ia.size(); ++i) {
    if (!(*ia[i].second == *ib[i].second)) return true;
  }
  return false;
}

VoxelGrid line_grid(std::vector<std::uint8_t> labels) {
  VoxelGridSpec s;
  s.dims = {1, 1, labels.size()};
  s.num_classes = 3;
  VoxelGrid g(s);
  g.labels = std::move(labels);
  return g;
}

}  // namespace

int main() {
  set_num_threads(1);
  VerifyOptions opts;
  opts.seeds = kSeeds;
  const SuiteReport geometry = geometry_suite(opts);
  const SuiteReport oracle = oracle_suite(opts);
  const SuiteReport grad = grad_suite(opts);
  const Scene scene = gen_scene(default_scene_spec());
  const PipelineConfig base;
  const ModelParams params = init_model(base, scene.feature_channels(), scene.grid.spec.num_classes);

  criterion(1, "geometry identities", 5, [&] {
    Verdict v;
    double s = 0;
    suite_check(v, s, geometry, "camera_geometry", "identity_pose_grid_is_pixel_centers", kGridTol, kSeeds);
    suite_check(v, s, geometry, "camera_geometry", "project_backproject_round_trip", kGridTol, kSeeds);
    suite_check(v, s, geometry, "camera_geometry", "two_view_warp_at_true_depth", kTwoViewTol, kSeeds);
    v.seconds = s;
    return v;
  });

  criterion(2, "epipolar consistency", 10, [&] {
    Verdict v;
    for (std::size_t n = 1; n < scene.frames.size(); ++n) {
      const auto e = epipolar_consistency(scene, n);
      v.require(e.pixels > 0 && e.mean_abs_error <= kEpipolarTol,
                "frame " + std::to_string(n) + " " + std::to_string(e.pixels) + " px mean " +
                    fmt("%.1e", e.mean_abs_error));
    }
    return v;
  });

  criterion(3, "CPA correctness", 10, [&] {
    Verdict v;
    double s = 0;
    suite_check(v, s, oracle, "pattern_affinity", "range_within_unit", kAffinityTol, kSeeds);
    suite_check(v, s, oracle, "pattern_affinity", "self_affinity_is_one", kAffinityTol, kSeeds);
    suite_check(v, s, oracle, "pattern_affinity", "affine_invariance", kAffinityTol, kSeeds);
    suite_check(v, s, oracle, "pattern_affinity", "cosine_contrast_under_shift", kAffinityTol, kSeeds);
    v.seconds = s;
    return v;
  });

  criterion(4, "CPA signal", 10, [&] {
    Verdict v;
    const auto a = affinity_signal(base, scene, params, 1);
    v.require(a.cells > 0 && a.margin() >= kSignalMargin,
              std::to_string(a.cells) + " cells, true " + fmt("%.4f", a.true_mean) + " vs permuted " +
                  fmt("%.4f", a.permuted_mean) + ", margin " + fmt("%.4f", a.margin()) + " >= " +
                  fmt("%.1f", kSignalMargin));
    return v;
  });

  criterion(5, "oracle equivalence", 60, [&] {
    Verdict v;
    double s = 0;
    suite_check(v, s, oracle, "tensor_core", "conv3d_vs_nested_loops", kOracleTol, kSeeds);
    suite_check(v, s, oracle, "tensor_core", "trilinear_vs_corner_blend", kOracleTol, kSeeds);
    suite_check(v, s, oracle, "pattern_affinity", "group_affinity_vs_pearson", kOracleTol, kSeeds);
    suite_check(v, s, oracle, "dynamic_refinement", "deformable_sample_vs_loops", kOracleTol, kSeeds);
    suite_check(v, s, oracle, "voxel_aggregation", "lift_splat_vs_scatter", kOracleTol, kSeeds);
    suite_check(v, s, oracle, "voxel_aggregation", "cross_attention_vs_loops", kOracleTol, kSeeds);
    v.seconds = s;
    return v;
  });

  criterion(6, "gradient checks", 60, [&] {
    Verdict v;
    double s = 0;
    suite_check(v, s, grad, "dynamic_refinement", "deformable_sample_backward", kGradTol, kSeeds);
    suite_check(v, s, grad, "voxel_aggregation", "attention_backward", kGradTol, kSeeds);
    suite_check(v, s, grad, "losses_metrics", "weighted_ce_backward", kGradTol, kSeeds);
    suite_check(v, s, grad, "losses_metrics", "depth_bce_backward", kGradTol, kSeeds);
    v.seconds = s;
    return v;
  });

  criterion(7, "gates and identities", 5, [&] {
    Verdict v;
    std::size_t gate_ok = 0, id_ok = 0;
    double worst_sum = 0;
    for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
      RandomSource r(seed);
      const std::size_t C = r.integer(1, 4), Cr = r.integer(1, 4), dim = 2 * r.integer(1, 4);
      auto ap = make_attention_params<float>(C, Cr, dim, 1, 0);
      for (TensorF* t : {&ap.q_w, &ap.q_b, &ap.k_w, &ap.k_b, &ap.v_w, &ap.v_b, &ap.out_w, &ap.out_b}) {
        *t = r.tensor(t->shape(), -2, 2).cast<float>();
      }
      const TensorF vox = r.tensor({C, r.integer(1, 4), r.integer(1, 4), r.integer(1, 4)}).cast<float>();
      const TensorF rel = r.tensor({Cr, r.integer(1, 4), r.integer(1, 4), r.integer(1, 4)}).cast<float>();
      gate_ok += weighted_cross_attention(vox, rel, ap) == vox;

      const TensorF vol = r.tensor({C, r.integer(1, 5), r.integer(1, 5), r.integer(1, 5)}).cast<float>();
      auto dp = make_deform_params<float>(C, C, 1, 1);
      for (std::size_t c = 0; c < C; ++c) dp.proj.weights(c, c, 0, 0, 0) = 1;
      const Shape sp{vol.dim(1), vol.dim(2), vol.dim(3)};
      const TensorF off({1, 3, sp[0], sp[1], sp[2]}), w = TensorF::ones({1, sp[0], sp[1], sp[2]});
      id_ok += deformable_sample(vol, off, w, TensorF::ones(sp), dp) == vol;

      auto head = Conv3dParams<float>::pointwise(r.integer(2, 6), C);
      head.weights = r.tensor(head.weights.shape(), -3, 3).cast<float>();
      const auto probs = ssc_head(vox, head, r.integer(1, 2)).probs;
      const std::size_t n = probs.stride(0);
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0;
        for (std::size_t k = 0; k < probs.dim(0); ++k) sum += probs[k * n + i];
        worst_sum = std::max(worst_sum, std::abs(sum - 1));
      }
    }
    PipelineConfig frozen = base;
    frozen.ablation.alpha_coefficient = false;
    frozen.ablation.fixed_alpha = 0.0;
    const auto r = run_pipeline(frozen, scene, params);
    v.require(gate_ok == kSeeds, "alpha=0 gives V_ret == V_vox bitwise in " + std::to_string(gate_ok) + "/" +
                                     std::to_string(kSeeds) + " random cases");
    v.require(r.tail.v_ret == r.stage.v_vox, "and on the default scene");
    v.require(id_ok == kSeeds, "identity deformable config exact in " + std::to_string(id_ok) + "/" +
                                   std::to_string(kSeeds));
    v.require(worst_sum <= kSoftmaxTol, "head softmax |sum-1| " + fmt("%.1e", worst_sum));
    return v;
  });

  criterion(8, "metrics", 2, [&] {
    Verdict v;
    const auto a = line_grid({0, 1, 2, 1});
    const auto same = compute_iou(a, a);
    v.require(same.iou == 1.0 && same.miou == 1.0, "identical grids IoU " + fmt("%.4f", same.iou));
    const auto dis = compute_iou(line_grid({1, 0, 0, 0}), line_grid({0, 1, 0, 0}));
    v.require(dis.iou == 0.0, "disjoint IoU " + fmt("%.4f", dis.iou));
    const auto third = compute_iou(line_grid({1, 1, 0, 0}), line_grid({0, 1, 1, 0}));
    v.require(third.iou == 1.0 / 3 && third.counts[0].tp == 1 && third.counts[0].fp == 1 && third.counts[0].fn == 1,
              "TP=FP=FN=1 IoU " + fmt("%.6f", third.iou));
    // every possible prediction under the ignored voxels leaves the report unchanged
    const auto gt = line_grid({1, 255, 2, 255});
    const auto ref = compute_iou(line_grid({1, 0, 2, 0}), gt);
    bool invariant = true;
    for (std::uint8_t x = 0; x < 3; ++x)
      for (std::uint8_t y = 0; y < 3; ++y) {
        const auto r = compute_iou(line_grid({1, x, 2, y}), gt);
        invariant = invariant && r.iou == ref.iou && r.miou == ref.miou && r.per_class_iou == ref.per_class_iou;
      }
    v.require(invariant && ref.iou == 1.0, "ignore-label voxels excluded");
    return v;
  });

  criterion(9, "temporal benefit after training", 300, [&] {
    Verdict v;
    const TrainResult full = train_desk(base, scene, params);
    PipelineConfig frozen = base;
    frozen.ablation.alpha_coefficient = false;
    frozen.ablation.fixed_alpha = 0.0;
    const TrainResult baseline = train_desk(frozen, scene, params);
    v.require(full.final.miou > baseline.final.miou,
              "mIoU " + fmt("%.4f", full.final.miou) + " (alpha " + fmt("%.4f", full.params.attention.alpha) +
                  ") > frozen-gate " + fmt("%.4f", baseline.final.miou) + " after " +
                  std::to_string(base.training.steps) + " steps");
    v.require(full.loss_curve.back() < full.loss_curve.front(),
              "loss " + fmt("%.3f", full.loss_curve.front()) + " -> " + fmt("%.3f", full.loss_curve.back()));
    return v;
  });

  criterion(10, "determinism across threads", 30, [&] {
    Verdict v;
    const int n = std::max(2, int(std::thread::hardware_concurrency()));
    set_num_threads(1);
    const auto a = run_pipeline(base, scene, params);
    set_num_threads(n);
    const auto b = run_pipeline(base, scene, params);
    set_num_threads(1);
    v.require(a.prediction.labels == b.prediction.labels && !any_intermediate_differs(a, b),
              "1 vs " + std::to_string(n) + " threads: predictions and intermediates bitwise equal");
    return v;
  });

  criterion(11, "ablation liveness", 60, [&] {
    Verdict v;
    SceneSpec spec = default_scene_spec();
    spec.feature_mode = FeatureMode::onehot_noise;
    spec.noise_sigma = 0.05;
    spec.seed = 3;
    const Scene noisy = gen_scene(spec);
    const auto full = run_pipeline(base, noisy, params);
    const std::pair<const char*, bool AblationFlags::*> flags[] = {
        {"scale_aware_isolation", &AblationFlags::scale_aware_isolation},
        {"multi_group", &AblationFlags::multi_group},
        {"affinity_weights", &AblationFlags::affinity_weights},
        {"deformable", &AblationFlags::deformable},
        {"alpha_coefficient", &AblationFlags::alpha_coefficient},
        {"cross_attention", &AblationFlags::cross_attention}};
    for (const auto& [name, flag] : flags) {
      PipelineConfig cfg = base;
      cfg.ablation.*flag = false;
      v.require(any_intermediate_differs(full, run_pipeline(cfg, noisy, params)), std::string(name) + " live");
    }
    return v;
  });

  std::printf("%s: %d of 11 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
