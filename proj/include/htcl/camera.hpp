// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <vector>

#include "htcl/tensor.hpp"

namespace htcl {

/// Pinhole camera. R and t map current-frame camera coordinates into this
/// frame's camera coordinates: X_this = R * X_cur + t.
struct CameraFrame {
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  std::size_t width = 0;
  std::size_t height = 0;

  /// Throws ValueError unless K is upper triangular with positive focals and
  /// R is a rotation (orthonormal, det 1) within 1e-6.
  void validate() const;

  /// Camera center of this frame expressed in current-frame coordinates.
  Eigen::Vector3d center_in_current() const { return -R.transpose() * t; }
};

/// Pose mapping coordinates of frame a into coordinates of frame b, where both
/// frames store their current -> frame extrinsics.
struct RelativePose {
  Eigen::Matrix3d R;
  Eigen::Vector3d t;
};
RelativePose relative_pose(const CameraFrame& a, const CameraFrame& b);

/// Strictly positive, strictly ascending metric depths.
class DepthHypotheses {
 public:
  DepthHypotheses() = default;
  explicit DepthHypotheses(std::vector<double> values);

  /// Planes evenly spaced in 1 / depth between min and max (inclusive).
  static DepthHypotheses inverse_depth(double min_depth, double max_depth, std::size_t count);
  static DepthHypotheses uniform(double min_depth, double max_depth, std::size_t count);

  const std::vector<double>& values() const noexcept { return values_; }
  std::size_t count() const noexcept { return values_.size(); }
  double operator[](std::size_t j) const { return values_[j]; }

  /// Fractional plane index of a metric depth, piecewise linear between
  /// planes; -1 when the depth lies outside [front, back].
  double continuous_index(double depth) const;

  /// Index of the plane closest to `depth`.
  std::size_t nearest(double depth) const;

  friend bool operator==(const DepthHypotheses&, const DepthHypotheses&) = default;

 private:
  std::vector<double> values_;
};

/// K^-1 * p * d for a homogeneous pixel p.
Eigen::Vector3d backproject(const Eigen::Vector3d& pixel, double depth, const Eigen::Matrix3d& K);

/// Homogeneous pixel (x / z, y / z, 1) of a camera-frame point.
Eigen::Vector3d project(const Eigen::Vector3d& point, const Eigen::Matrix3d& K);

struct WarpResult {
  Eigen::Vector2d pixel;  // dehomogenized source-image pixel
  double depth = 0;       // third homogeneous coordinate
  bool valid = false;     // false when depth <= 1e-6
};

/// Ki * (R * (K0^-1 * p * d) + t).
WarpResult warp_pixel(const Eigen::Vector3d& pixel, double depth, const Eigen::Matrix3d& K0,
                      const Eigen::Matrix3d& Ki, const Eigen::Matrix3d& R, const Eigen::Vector3d& t);

/// Per-plane sampling locations in a source feature map. coords is
/// [D, h, w, 2] holding (x, y) in source feature-pixel units where pixel u's
/// center sits at u + 0.5; mask is [D, h, w].
struct WarpGrid {
  TensorD coords;
  Mask mask;
};

/// Plane-sweep grid from the current view into `his` over every hypothesis.
WarpGrid build_warp_grid(const CameraFrame& cur, const CameraFrame& his, const DepthHypotheses& hyp,
                         std::size_t feat_h, std::size_t feat_w);

/// Same as build_warp_grid but with one per-pixel depth (depth_map [h, w]);
/// the result has D = 1. Non-positive depths are masked out.
WarpGrid build_depth_warp_grid(const CameraFrame& cur, const CameraFrame& his, const TensorD& depth_map);

/// Bilinearly samples F_src [C, h, w] at every grid location. Masked cells are 0.
template <typename T>
Tensor<T> warp_feature(const Tensor<T>& src, const WarpGrid& grid);

/// Image-pixel coordinates of feature pixel (u, v)'s center.
Eigen::Vector3d feature_pixel_center(const CameraFrame& cam, std::size_t feat_h, std::size_t feat_w, std::size_t u,
                                     std::size_t v);

struct CalibrationEntry {
  int id = 0;
  CameraFrame frame;
};

/// One frame per line:
///   frame <id> K <9 floats> R <9 floats> t <3 floats> size <w> <h>
/// '#' starts a comment.
std::vector<CalibrationEntry> read_calibration(const std::filesystem::path& path);
void write_calibration(const std::filesystem::path& path, const std::vector<CalibrationEntry>& frames);

}  // namespace htcl
