// SPDX-License-Identifier: Apache-2.0
#include "htcl/scene.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include "htcl/tensor_io.hpp"
#include "json_reader.hpp"

namespace htcl {

void SceneSpec::validate() const {
  grid.validate();
  if (trajectory.empty()) throw ValueError("scene: trajectory must contain at least the current frame");
  for (const auto& cam : trajectory) cam.validate();
  if (feat_h == 0 || feat_w == 0) throw ValueError("scene: feature map dims must be positive");
  if (ground_class == 0 || ground_class >= grid.num_classes) throw ValueError("scene: ground class out of range");
  if (noise_sigma < 0) throw ValueError("scene: noise sigma must be non-negative");
  const Eigen::Vector3d lo = grid.origin;
  const Eigen::Vector3d hi =
      grid.origin + grid.voxel_size * Eigen::Vector3d(double(grid.dims[0]), double(grid.dims[1]), double(grid.dims[2]));
  for (const auto& b : objects) {
    if (b.cls == 0 || b.cls >= grid.num_classes) throw ValueError("scene: box class out of range");
    for (int a = 0; a < 3; ++a) {
      if (!(b.min[a] < b.max[a])) throw ValueError("scene: box min corner must be below its max corner");
      if (b.min[a] < lo[a] - 1e-9 || b.max[a] > hi[a] + 1e-9) throw ValueError("scene: box leaves the grid bounds");
    }
  }
}

namespace {

Eigen::Matrix3d yaw(double deg) {
  return Eigen::AngleAxisd(deg * std::numbers::pi / 180.0, Eigen::Vector3d::UnitY()).toRotationMatrix();
}

CameraFrame make_camera(const Eigen::Matrix3d& K, std::size_t w, std::size_t h, double yaw_deg,
                        const Eigen::Vector3d& center) {
  CameraFrame cam;
  cam.K = K;
  cam.R = yaw(yaw_deg);
  cam.t = -cam.R * center;
  cam.width = w;
  cam.height = h;
  return cam;
}

}  // namespace

SceneSpec default_scene_spec() {
  SceneSpec s;
  s.grid.dims = {32, 8, 32};
  s.grid.voxel_size = 0.2;
  s.grid.origin = Eigen::Vector3d(-3.2, -0.6, 1.0);
  s.grid.num_classes = 5;
  s.ground_class = 1;
  s.ground_height = 0.9;
  s.objects = {
      {2, {-2.0, 0.1, 3.0}, {-1.0, 0.9, 4.0}}, {3, {0.4, -0.3, 4.2}, {1.6, 0.9, 5.0}},
      {4, {-0.6, 0.3, 2.2}, {0.2, 0.9, 2.8}},  {2, {1.8, 0.0, 2.4}, {2.6, 0.9, 3.4}},
      {3, {-2.8, 0.2, 5.6}, {-1.6, 0.9, 6.8}},
  };
  Eigen::Matrix3d K;
  K << 64, 0, 64, 0, 64, 48, 0, 0, 1;
  for (int n = 0; n < 6; ++n) {
    s.trajectory.push_back(make_camera(K, 128, 96, 1.5 * n, Eigen::Vector3d(0.08 * n, 0.0, -0.5 * n)));
  }
  s.feat_h = 24;
  s.feat_w = 32;
  return s;
}

SceneSpec scene_spec_from_json(const std::string& text) {
  const auto root_json = detail::parse_json(text);
  detail::JsonObject root(root_json, "");
  SceneSpec s;
  {
    auto g = root.object("grid");
    const auto dims = g.get<std::vector<std::size_t>>("dims", {32, 8, 32});
    if (dims.size() != 3) throw ConfigError(g.path_of("dims") + ": expected 3 integers");
    s.grid.dims = {dims[0], dims[1], dims[2]};
    s.grid.voxel_size = g.get<double>("voxel_size", 0.2);
    s.grid.origin = g.vec3("origin", Eigen::Vector3d(-3.2, -0.6, 1.0));
    s.grid.num_classes = static_cast<std::uint8_t>(g.get<unsigned>("num_classes", 5));
    s.grid.ignore_label = static_cast<std::uint8_t>(g.get<unsigned>("ignore_label", 255));
    g.finish();
  }
  {
    auto g = root.object("ground");
    s.ground_class = static_cast<std::uint8_t>(g.get<unsigned>("class", 1));
    s.ground_height = g.get<double>("height", 0.9);
    g.finish();
  }
  if (root.has("objects")) {
    const auto& arr = root.raw("objects");
    if (!arr.is_array()) throw ConfigError("objects: expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      detail::JsonObject o(arr[i], "objects[" + std::to_string(i) + "]");
      Box b;
      b.cls = static_cast<std::uint8_t>(o.require<unsigned>("class"));
      if (!o.has("min") || !o.has("max")) throw ConfigError(o.path_of("min") + ": boxes need min and max corners");
      b.min = o.vec3("min", {});
      b.max = o.vec3("max", {});
      o.finish();
      s.objects.push_back(b);
    }
  }
  auto cam = root.object("camera");
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  K(0, 0) = cam.get<double>("fx", 64);
  K(1, 1) = cam.get<double>("fy", 64);
  K(0, 2) = cam.get<double>("cx", 64);
  K(1, 2) = cam.get<double>("cy", 48);
  const auto width = cam.get<std::size_t>("width", 128);
  const auto height = cam.get<std::size_t>("height", 96);
  cam.finish();
  if (root.has("trajectory")) {
    const auto& arr = root.raw("trajectory");
    if (!arr.is_array()) throw ConfigError("trajectory: expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      detail::JsonObject f(arr[i], "trajectory[" + std::to_string(i) + "]");
      CameraFrame c;
      if (f.has("R") || f.has("t")) {
        const auto r = f.require<std::vector<double>>("R");
        if (r.size() != 9) throw ConfigError(f.path_of("R") + ": expected 9 numbers");
        c.K = K;
        c.R = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(r.data());
        c.t = f.vec3("t", Eigen::Vector3d::Zero());
        c.width = width;
        c.height = height;
      } else {
        c = make_camera(K, width, height, f.get<double>("yaw_deg", 0.0), f.vec3("center", Eigen::Vector3d::Zero()));
      }
      f.finish();
      s.trajectory.push_back(c);
    }
  } else {
    s.trajectory = default_scene_spec().trajectory;
    for (auto& c : s.trajectory) {
      c.K = K;
      c.width = width;
      c.height = height;
    }
  }
  {
    auto f = root.object("features");
    s.feat_h = f.get<std::size_t>("height", 24);
    s.feat_w = f.get<std::size_t>("width", 32);
    const auto mode = f.get<std::string>("mode", "onehot");
    if (mode == "onehot") {
      s.feature_mode = FeatureMode::onehot;
    } else if (mode == "onehot_noise") {
      s.feature_mode = FeatureMode::onehot_noise;
    } else {
      throw ConfigError(f.path_of("mode") + ": expected \"onehot\" or \"onehot_noise\"");
    }
    s.noise_sigma = f.get<double>("sigma", 0.0);
    f.finish();
  }
  s.seed = root.get<std::uint64_t>("seed", 0);
  root.finish();
  try {
    s.validate();
  } catch (const ValueError& e) {
    throw ConfigError(std::string("<root>: ") + e.what());
  }
  return s;
}

std::string scene_spec_to_json(const SceneSpec& s) {
  nlohmann::json j;
  j["grid"] = {{"dims", s.grid.dims},
               {"voxel_size", s.grid.voxel_size},
               {"origin", {s.grid.origin.x(), s.grid.origin.y(), s.grid.origin.z()}},
               {"num_classes", s.grid.num_classes},
               {"ignore_label", s.grid.ignore_label}};
  j["ground"] = {{"class", s.ground_class}, {"height", s.ground_height}};
  j["objects"] = nlohmann::json::array();
  for (const auto& b : s.objects) {
    j["objects"].push_back({{"class", b.cls},
                            {"min", {b.min.x(), b.min.y(), b.min.z()}},
                            {"max", {b.max.x(), b.max.y(), b.max.z()}}});
  }
  const auto& c0 = s.trajectory.at(0);
  j["camera"] = {{"fx", c0.K(0, 0)}, {"fy", c0.K(1, 1)}, {"cx", c0.K(0, 2)},
                 {"cy", c0.K(1, 2)}, {"width", c0.width}, {"height", c0.height}};
  j["trajectory"] = nlohmann::json::array();
  for (const auto& c : s.trajectory) {
    std::vector<double> r;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) r.push_back(c.R(a, b));
    j["trajectory"].push_back({{"R", r}, {"t", {c.t.x(), c.t.y(), c.t.z()}}});
  }
  j["features"] = {{"height", s.feat_h},
                   {"width", s.feat_w},
                   {"mode", s.feature_mode == FeatureMode::onehot ? "onehot" : "onehot_noise"},
                   {"sigma", s.noise_sigma}};
  j["seed"] = s.seed;
  return j.dump(2);
}

RayHit cast_ray(const SceneSpec& spec, const CameraFrame& cam, const Eigen::Vector3d& pixel) {
  constexpr double kNear = 1e-6;
  const Eigen::Vector3d o = cam.center_in_current();
  const Eigen::Vector3d d = cam.R.transpose() * (cam.K.inverse() * pixel);  // frame depth 1 per unit s
  RayHit best;
  double best_s = std::numeric_limits<double>::infinity();
  for (const auto& b : spec.objects) {
    double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (std::abs(d[a]) < 1e-15) {
        miss = o[a] < b.min[a] || o[a] > b.max[a];
        continue;
      }
      double s1 = (b.min[a] - o[a]) / d[a], s2 = (b.max[a] - o[a]) / d[a];
      if (s1 > s2) std::swap(s1, s2);
      lo = std::max(lo, s1);
      hi = std::min(hi, s2);
    }
    if (miss || lo > hi || lo <= kNear) continue;
    if (lo < best_s) {
      best_s = lo;
      best.cls = b.cls;
    }
  }
  if (d.y() > 1e-15) {
    const double s = (spec.ground_height - o.y()) / d.y();
    if (s > kNear && s < best_s) {
      best_s = s;
      best.cls = spec.ground_class;
    }
  }
  if (best.cls != 0) best.depth = best_s;
  return best;
}

Scene gen_scene(const SceneSpec& spec) {
  spec.validate();
  const auto& g = spec.grid;
  Scene scene;
  scene.grid = VoxelGrid(g);
  std::size_t visible = 0;
  const auto& cur = spec.trajectory[0];
  for (std::size_t i = 0; i < g.dims[0]; ++i)
    for (std::size_t j = 0; j < g.dims[1]; ++j)
      for (std::size_t k = 0; k < g.dims[2]; ++k) {
        const Eigen::Vector3d c = g.center(i, j, k);
        std::uint8_t label = 0;
        for (const auto& b : spec.objects) {
          if ((c.array() >= b.min.array()).all() && (c.array() <= b.max.array()).all()) {
            label = b.cls;
            break;
          }
        }
        if (label == 0 && c.y() + g.voxel_size / 2 > spec.ground_height) label = spec.ground_class;
        scene.grid.at(i, j, k) = label;
        const Eigen::Vector3d x = cur.R * c + cur.t;
        if (x.z() > 1e-6) {
          const Eigen::Vector3d p = project(x, cur.K);
          if (p.x() >= 0 && p.x() < double(cur.width) && p.y() >= 0 && p.y() < double(cur.height)) ++visible;
        }
      }
  if (visible == 0) throw ValueError("scene: the current camera frustum does not overlap the voxel grid");

  const std::size_t C = g.num_classes - 1;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0 ? spec.noise_sigma : 1.0);
  for (const auto& cam : spec.trajectory) {
    SceneFrame f;
    f.camera = cam;
    f.features = TensorF::zeros({C, spec.feat_h, spec.feat_w});
    f.depth = TensorD::zeros({spec.feat_h, spec.feat_w});
    for (std::size_t v = 0; v < spec.feat_h; ++v)
      for (std::size_t u = 0; u < spec.feat_w; ++u) {
        const RayHit hit = cast_ray(spec, cam, feature_pixel_center(cam, spec.feat_h, spec.feat_w, u, v));
        f.depth(v, u) = hit.depth;
        if (hit.cls) f.features(hit.cls - 1, v, u) = 1.0f;
      }
    if (spec.feature_mode == FeatureMode::onehot_noise && spec.noise_sigma > 0) {
      for (auto& x : f.features.data()) x += static_cast<float>(noise(rng));
    }
    scene.frames.push_back(std::move(f));
  }
  return scene;
}

void write_scene(const std::filesystem::path& dir, const Scene& scene) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create scene directory " + dir.string());
  write_voxel_grid(dir / "grid.htvg", scene.grid);
  std::vector<CalibrationEntry> calib;
  for (std::size_t i = 0; i < scene.frames.size(); ++i) {
    calib.push_back({int(i), scene.frames[i].camera});
    write_tensor(dir / ("features_" + std::to_string(i) + ".htcv"), scene.frames[i].features);
    write_tensor(dir / ("depth_" + std::to_string(i) + ".htcv"), scene.frames[i].depth);
  }
  write_calibration(dir / "calib.txt", calib);
}

Scene read_scene(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("scene directory not found: " + dir.string());
  Scene scene;
  scene.grid = read_voxel_grid(dir / "grid.htvg");
  const auto calib = read_calibration(dir / "calib.txt");
  if (calib.empty()) throw IoError("calibration file lists no frames");
  for (std::size_t i = 0; i < calib.size(); ++i) {
    if (calib[i].id != int(i)) throw IoError("calibration frames must be numbered 0, 1, ... in order");
    SceneFrame f;
    f.camera = calib[i].frame;
    f.features = read_tensor<float>(dir / ("features_" + std::to_string(i) + ".htcv"));
    f.depth = read_tensor<double>(dir / ("depth_" + std::to_string(i) + ".htcv"));
    if (f.features.ndim() != 3 || f.depth.ndim() != 2 || f.depth.dim(0) != f.features.dim(1) ||
        f.depth.dim(1) != f.features.dim(2)) {
      throw IoError("frame " + std::to_string(i) + ": feature and depth maps do not agree");
    }
    if (i && f.features.shape() != scene.frames[0].features.shape()) {
      throw IoError("frame " + std::to_string(i) + ": feature shape differs from the current frame");
    }
    scene.frames.push_back(std::move(f));
  }
  return scene;
}

}  // namespace htcl
