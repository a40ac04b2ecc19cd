// SPDX-License-Identifier: Apache-2.0
#include "htcl/camera.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "htcl/ops.hpp"
#include "htcl/parallel.hpp"

namespace htcl {

void CameraFrame::validate() const {
  if (K(1, 0) != 0 || K(2, 0) != 0 || K(2, 1) != 0 || K(2, 2) != 1) {
    throw ValueError("camera intrinsics must be upper triangular with K(2,2) = 1");
  }
  if (!(K(0, 0) > 0 && K(1, 1) > 0)) throw ValueError("camera focal lengths must be positive");
  const double ortho = (R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (!(ortho <= 1e-6) || std::abs(R.determinant() - 1.0) > 1e-6) {
    throw ValueError("camera rotation is not orthonormal with det 1");
  }
  if (width == 0 || height == 0) throw ValueError("camera image size must be positive");
}

RelativePose relative_pose(const CameraFrame& a, const CameraFrame& b) {
  const Eigen::Matrix3d R = b.R * a.R.transpose();
  return {R, b.t - R * a.t};
}

DepthHypotheses::DepthHypotheses(std::vector<double> values) : values_(std::move(values)) {
  if (values_.empty()) throw ValueError("depth hypotheses: empty list");
  for (std::size_t j = 0; j < values_.size(); ++j) {
    if (!(values_[j] > 0)) throw ValueError("depth hypotheses must be strictly positive");
    if (j > 0 && !(values_[j] > values_[j - 1])) throw ValueError("depth hypotheses must be strictly ascending");
  }
}

DepthHypotheses DepthHypotheses::inverse_depth(double min_depth, double max_depth, std::size_t count) {
  if (!(min_depth > 0) || count == 0) throw ValueError("depth hypotheses: need min > 0 and count >= 1");
  if (count == 1) return DepthHypotheses({min_depth});
  if (!(max_depth > min_depth)) throw ValueError("depth hypotheses: need max > min");
  std::vector<double> v(count);
  const double inv_near = 1.0 / min_depth, inv_far = 1.0 / max_depth;
  for (std::size_t j = 0; j < count; ++j) {
    // j = 0 is the nearest plane; ascending depth means descending inverse depth.
    const double s = double(j) / double(count - 1);
    v[j] = 1.0 / (inv_near + s * (inv_far - inv_near));
  }
  v.front() = min_depth;
  v.back() = max_depth;
  return DepthHypotheses(std::move(v));
}

DepthHypotheses DepthHypotheses::uniform(double min_depth, double max_depth, std::size_t count) {
  if (!(min_depth > 0) || count == 0 || (count > 1 && !(max_depth > min_depth))) {
    throw ValueError("depth hypotheses: need 0 < min < max and count >= 1");
  }
  if (count == 1) return DepthHypotheses({min_depth});
  std::vector<double> v(count);
  for (std::size_t j = 0; j < count; ++j) v[j] = min_depth + (max_depth - min_depth) * double(j) / double(count - 1);
  return DepthHypotheses(std::move(v));
}

double DepthHypotheses::continuous_index(double depth) const {
  if (!(depth >= values_.front() && depth <= values_.back())) return -1.0;
  if (values_.size() == 1) return 0.0;
  auto it = std::upper_bound(values_.begin(), values_.end(), depth);
  std::size_t hi = static_cast<std::size_t>(it - values_.begin());
  if (hi >= values_.size()) return double(values_.size() - 1);
  const std::size_t lo = hi - 1;
  return double(lo) + (depth - values_[lo]) / (values_[hi] - values_[lo]);
}

std::size_t DepthHypotheses::nearest(double depth) const {
  std::size_t best = 0;
  for (std::size_t j = 1; j < values_.size(); ++j) {
    if (std::abs(values_[j] - depth) < std::abs(values_[best] - depth)) best = j;
  }
  return best;
}

namespace {

Eigen::Matrix3d checked_inverse(const Eigen::Matrix3d& K) {
  const double det = K.determinant();
  if (!(std::abs(det) > 1e-12)) throw ValueError("singular intrinsics matrix");
  return K.inverse();
}

}  // namespace

Eigen::Vector3d backproject(const Eigen::Vector3d& pixel, double depth, const Eigen::Matrix3d& K) {
  if (!(depth > 0)) throw ValueError("backproject: depth must be positive");
  return (checked_inverse(K) * pixel) * depth;
}

Eigen::Vector3d project(const Eigen::Vector3d& point, const Eigen::Matrix3d& K) {
  const Eigen::Vector3d h = K * point;
  return {h.x() / h.z(), h.y() / h.z(), 1.0};
}

namespace {

WarpResult warp_with_inverse(const Eigen::Vector3d& pixel, double depth, const Eigen::Matrix3d& K0inv,
                             const Eigen::Matrix3d& Ki, const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
  const Eigen::Vector3d h = Ki * (R * ((K0inv * pixel) * depth) + t);
  WarpResult r;
  r.depth = h.z();
  r.valid = h.z() > 1e-6;
  r.pixel = {h.x() / h.z(), h.y() / h.z()};
  return r;
}

void require_divisible(const CameraFrame& cam, std::size_t feat_h, std::size_t feat_w) {
  if (feat_h == 0 || feat_w == 0 || cam.width % feat_w != 0 || cam.height % feat_h != 0) {
    throw ShapeError("feature map " + std::to_string(feat_w) + "x" + std::to_string(feat_h) +
                     " does not divide image size " + std::to_string(cam.width) + "x" + std::to_string(cam.height));
  }
}

}  // namespace

WarpResult warp_pixel(const Eigen::Vector3d& pixel, double depth, const Eigen::Matrix3d& K0, const Eigen::Matrix3d& Ki,
                      const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
  if (!(depth > 0)) throw ValueError("warp_pixel: depth must be positive");
  return warp_with_inverse(pixel, depth, checked_inverse(K0), Ki, R, t);
}

Eigen::Vector3d feature_pixel_center(const CameraFrame& cam, std::size_t feat_h, std::size_t feat_w, std::size_t u,
                                     std::size_t v) {
  const double sx = double(cam.width) / double(feat_w);
  const double sy = double(cam.height) / double(feat_h);
  return {(double(u) + 0.5) * sx, (double(v) + 0.5) * sy, 1.0};
}

namespace {

// Fills slice j of the grid for one per-pixel depth source.
template <typename DepthAt>
void fill_grid(WarpGrid& grid, std::size_t j, const CameraFrame& cur, const CameraFrame& his, std::size_t feat_h,
               std::size_t feat_w, DepthAt depth_at) {
  const double sx_src = double(his.width) / double(feat_w);
  const double sy_src = double(his.height) / double(feat_h);
  for (std::size_t v = 0; v < feat_h; ++v) {
    for (std::size_t u = 0; u < feat_w; ++u) {
      const double d = depth_at(v, u);
      const std::size_t cell = (j * feat_h + v) * feat_w + u;
      if (!(d > 0)) {
        grid.coords[2 * cell] = 0;
        grid.coords[2 * cell + 1] = 0;
        grid.mask[cell] = 0;
        continue;
      }
      const WarpResult w = warp_pixel(feature_pixel_center(cur, feat_h, feat_w, u, v), d, cur.K, his.K, his.R, his.t);
      const double x = w.pixel.x() / sx_src;
      const double y = w.pixel.y() / sy_src;
      grid.coords[2 * cell] = x;
      grid.coords[2 * cell + 1] = y;
      // Slack keeps edge pixel centers inside despite round-off.
      constexpr double slack = 1e-9;
      const bool inside = x >= 0.5 - slack && x <= double(feat_w) - 0.5 + slack && y >= 0.5 - slack &&
                          y <= double(feat_h) - 0.5 + slack;
      grid.mask[cell] = (w.valid && inside) ? 1 : 0;
    }
  }
}

}  // namespace

WarpGrid build_warp_grid(const CameraFrame& cur, const CameraFrame& his, const DepthHypotheses& hyp,
                         std::size_t feat_h, std::size_t feat_w) {
  require_divisible(cur, feat_h, feat_w);
  require_divisible(his, feat_h, feat_w);
  const std::size_t D = hyp.count();
  WarpGrid grid{TensorD({D, feat_h, feat_w, 2}), Mask({D, feat_h, feat_w})};
  parallel_for(D, [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      const double d = hyp[j];
      fill_grid(grid, j, cur, his, feat_h, feat_w, [d](std::size_t, std::size_t) { return d; });
    }
  });
  return grid;
}

WarpGrid build_depth_warp_grid(const CameraFrame& cur, const CameraFrame& his, const TensorD& depth_map) {
  if (depth_map.ndim() != 2) throw ShapeError("depth map must be [h, w]");
  const std::size_t feat_h = depth_map.dim(0), feat_w = depth_map.dim(1);
  require_divisible(cur, feat_h, feat_w);
  require_divisible(his, feat_h, feat_w);
  WarpGrid grid{TensorD({1, feat_h, feat_w, 2}), Mask({1, feat_h, feat_w})};
  fill_grid(grid, 0, cur, his, feat_h, feat_w, [&](std::size_t v, std::size_t u) { return depth_map(v, u); });
  return grid;
}

template <typename T>
Tensor<T> warp_feature(const Tensor<T>& src, const WarpGrid& grid) {
  if (src.ndim() != 3) throw ShapeError("warp_feature: source must be [C, h, w]");
  const std::size_t C = src.dim(0), h = src.dim(1), w = src.dim(2);
  const std::size_t D = grid.mask.dim(0);
  if (grid.mask.dim(1) != h || grid.mask.dim(2) != w) {
    throw ShapeError("warp_feature: grid built for a different feature size");
  }
  const std::size_t cells = D * h * w;
  Tensor<T> out({C, D, h, w});
  const std::size_t plane = h * w;
  parallel_for(cells, [&](std::size_t begin, std::size_t end) {
    for (std::size_t cell = begin; cell < end; ++cell) {
      if (!grid.mask[cell]) continue;
      // The mask admits round-off past the edge centers; clamp those back.
      const T sx = T(std::clamp(grid.coords[2 * cell] - 0.5, 0.0, double(w - 1)));
      const T sy = T(std::clamp(grid.coords[2 * cell + 1] - 0.5, 0.0, double(h - 1)));
      const auto s = TrilinearStencil<T>::at(T(0), sy, sx, 1, h, w);
      if (!s.valid) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const T* f = src.raw() + c * plane;
        T acc = 0;
        for (int k = 0; k < 8; ++k) acc += s.weight[k] * f[s.offset[k]];
        out[c * cells + cell] = acc;
      }
    }
  });
  return out;
}

template TensorF warp_feature(const TensorF&, const WarpGrid&);
template TensorD warp_feature(const TensorD&, const WarpGrid&);

namespace {

void strip_comment(std::string& line) {
  if (auto pos = line.find('#'); pos != std::string::npos) line.erase(pos);
}

template <std::size_t N>
void read_floats(std::istringstream& is, const char* key, double (&out)[N], std::size_t line_no) {
  std::string tag;
  if (!(is >> tag) || tag != key) {
    throw IoError("calibration line " + std::to_string(line_no) + ": expected '" + key + "'");
  }
  for (std::size_t i = 0; i < N; ++i) {
    if (!(is >> out[i])) throw IoError("calibration line " + std::to_string(line_no) + ": bad value after " + key);
  }
}

}  // namespace

std::vector<CalibrationEntry> read_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open calibration file " + path.string());
  std::vector<CalibrationEntry> frames;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_comment(line);
    std::istringstream is(line);
    std::string tag;
    if (!(is >> tag)) continue;
    if (tag != "frame") throw IoError("calibration line " + std::to_string(line_no) + ": expected 'frame'");
    CalibrationEntry e;
    if (!(is >> e.id)) throw IoError("calibration line " + std::to_string(line_no) + ": bad frame id");
    double K[9], R[9], t[3], size[2];
    read_floats(is, "K", K, line_no);
    read_floats(is, "R", R, line_no);
    read_floats(is, "t", t, line_no);
    read_floats(is, "size", size, line_no);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        e.frame.K(r, c) = K[3 * r + c];
        e.frame.R(r, c) = R[3 * r + c];
      }
      e.frame.t[r] = t[r];
    }
    if (!(size[0] >= 1 && size[1] >= 1)) throw IoError("calibration line " + std::to_string(line_no) + ": bad size");
    e.frame.width = static_cast<std::size_t>(size[0]);
    e.frame.height = static_cast<std::size_t>(size[1]);
    if (is >> tag) throw IoError("calibration line " + std::to_string(line_no) + ": trailing tokens");
    frames.push_back(e);
  }
  return frames;
}

void write_calibration(const std::filesystem::path& path, const std::vector<CalibrationEntry>& frames) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write calibration file " + path.string());
  out << "# frame <id> K <row-major 3x3> R <row-major 3x3, current -> frame> t <3> size <w> <h>\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& e : frames) {
    out << "frame " << e.id << " K";
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out << ' ' << e.frame.K(r, c);
    out << " R";
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out << ' ' << e.frame.R(r, c);
    out << " t " << e.frame.t.x() << ' ' << e.frame.t.y() << ' ' << e.frame.t.z();
    out << " size " << e.frame.width << ' ' << e.frame.height << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace htcl
