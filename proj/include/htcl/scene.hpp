// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "htcl/camera.hpp"
#include "htcl/tensor.hpp"
#include "htcl/voxel_aggregation.hpp"

namespace htcl {

struct Box {
  std::uint8_t cls = 1;
  Eigen::Vector3d min = Eigen::Vector3d::Zero();
  Eigen::Vector3d max = Eigen::Vector3d::Zero();
};

enum class FeatureMode { onehot, onehot_noise };

/// Synthetic scene in current-camera coordinates (x right, y down, z forward).
/// trajectory[0] is the current frame t, trajectory[n] is frame t - n.
struct SceneSpec {
  VoxelGridSpec grid;
  std::vector<Box> objects;
  std::uint8_t ground_class = 1;
  double ground_height = 0.9;  // plane y = ground_height
  std::vector<CameraFrame> trajectory;
  std::size_t feat_h = 24, feat_w = 32;
  FeatureMode feature_mode = FeatureMode::onehot;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Desk-scale default: 32 x 8 x 32 grid of 0.2 m voxels, five boxes on a
/// ground plane, 128 x 96 images with 32 x 24 feature maps, six frames.
SceneSpec default_scene_spec();

SceneSpec scene_spec_from_json(const std::string& text);
std::string scene_spec_to_json(const SceneSpec& spec);

struct SceneFrame {
  CameraFrame camera;
  TensorF features;  // [num_classes - 1, h, w] class one-hots
  TensorD depth;     // [h, w] first-hit depth along the optical axis, 0 for no hit
};

struct Scene {
  VoxelGrid grid;
  std::vector<SceneFrame> frames;

  std::size_t feature_channels() const { return frames.at(0).features.dim(0); }
  std::size_t feat_h() const { return frames.at(0).features.dim(1); }
  std::size_t feat_w() const { return frames.at(0).features.dim(2); }
};

/// First-hit depth (as z in the frame's camera) and class of a ray cast
/// through image pixel `pixel` of `cam`. Returns depth 0 when nothing is hit.
struct RayHit {
  double depth = 0;
  std::uint8_t cls = 0;
};
RayHit cast_ray(const SceneSpec& spec, const CameraFrame& cam, const Eigen::Vector3d& pixel);

/// Ray-cast rendering of every frame plus the ground-truth voxel labels.
/// Throws ValueError when the current frustum does not overlap the grid.
Scene gen_scene(const SceneSpec& spec);

/// grid.htvg, calib.txt, features_<i>.htcv and depth_<i>.htcv per frame.
void write_scene(const std::filesystem::path& dir, const Scene& scene);
Scene read_scene(const std::filesystem::path& dir);

}  // namespace htcl
