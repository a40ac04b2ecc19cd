// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "htcl/camera.hpp"
#include "htcl/dynamic_refinement.hpp"
#include "htcl/ops.hpp"
#include "htcl/pattern_affinity.hpp"
#include "htcl/pipeline.hpp"
#include "htcl/scene.hpp"
#include "htcl/voxel_aggregation.hpp"

namespace htcl {

/// Deliberately slow reference implementations, written straight from the
/// defining formulas.
namespace naive {

TensorD conv3d(const TensorD& x, const Conv3dParams<double>& p);
TensorD trilinear_sample(const TensorD& vol, const TensorD& coords);
TensorD group_affinity(const TensorD& ci, const TensorD& hi);
TensorD deformable_sample(const TensorD& volume, const TensorD& offsets, const TensorD& weights,
                          const TensorD& affinity, const DeformParams<double>& dp);
TensorD lift_splat(const TensorD& context, const TensorD& depth_dist, const CameraFrame& cam,
                   const DepthHypotheses& hyp, const VoxelGridSpec& spec);
TensorD cross_attention(const TensorD& vox, const TensorD& rel, const AttentionParams<double>& ap,
                        const PositionalEncoding<double>& pe);
TensorD ssim_map(const TensorD& a, const TensorD& b);
TensorD warp_feature(const TensorD& src, const WarpGrid& grid);
/// Plane-induced homography Ki (R + t n^T / d) K0^-1 with n = (0, 0, 1).
WarpGrid warp_grid(const CameraFrame& cur, const CameraFrame& his, const DepthHypotheses& hyp, std::size_t feat_h,
                   std::size_t feat_w);

}  // namespace naive

/// Outcome of one check over many random instances.
struct CheckResult {
  std::string module;
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double tolerance = 0;
  double max_error = 0;
  std::uint64_t worst_seed = 0;
  std::string location;  // where the worst error occurred
  double seconds = 0;

  bool passed() const { return failures == 0 && cases > 0; }
  /// "PASS module/name cases=... max_err=..." plus seed and location on failure.
  std::string line() const;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;
  double seconds = 0;

  bool passed() const;
  const CheckResult* find(const std::string& module, const std::string& name) const;
  std::string to_text() const;
  std::string to_json() const;
};

using ConvFn = std::function<TensorD(const TensorD&, const Conv3dParams<double>&)>;

struct VerifyOptions {
  std::size_t seeds = 100;
  std::uint64_t base_seed = 1;
  /// Implementation under test for conv3d; defaults to htcl::conv3d.
  ConvFn conv;
};

SuiteReport oracle_suite(const VerifyOptions& opts = {});
SuiteReport grad_suite(const VerifyOptions& opts = {});
SuiteReport geometry_suite(const VerifyOptions& opts = {});
SuiteReport merge_reports(const std::string& name, const std::vector<SuiteReport>& parts);

/// Warped history features at the true-depth cell versus current features,
/// over interior pixels: the pixel and its warp targets sit inside a
/// constant-feature region and the target is visible in the history frame.
struct EpipolarStats {
  std::size_t pixels = 0;
  double mean_abs_error = 0;
  double max_abs_error = 0;
};

EpipolarStats epipolar_consistency(const Scene& scene, std::size_t history_frame);

/// Mean reduced affinity at the true-depth cell of every covered pixel,
/// against the same cells after randomly permuting the pixel positions of
/// the history context volumes.
struct AffinitySignal {
  std::size_t cells = 0;
  double true_mean = 0;
  double permuted_mean = 0;
  double margin() const { return true_mean - permuted_mean; }
};

AffinitySignal affinity_signal(const PipelineConfig& cfg, const Scene& scene, const ModelParams& params,
                               std::uint64_t seed);

/// Seeded helpers shared by the suites and the tests.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::size_t integer(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  TensorD tensor(const Shape& shape, double lo = -1, double hi = 1);
  /// Rotation from an axis-angle with angle up to max_angle radians.
  Eigen::Matrix3d rotation(double max_angle);
  CameraFrame camera(std::size_t width, std::size_t height);
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace htcl
