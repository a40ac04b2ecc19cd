// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "htcl/verify.hpp"

namespace htcl {

TensorD RandomSource::tensor(const Shape& shape, double lo, double hi) {
  TensorD t(shape);
  for (auto& v : t.data()) v = uniform(lo, hi);
  return t;
}

Eigen::Matrix3d RandomSource::rotation(double max_angle) {
  Eigen::Vector3d axis(uniform(-1, 1), uniform(-1, 1), uniform(-1, 1));
  if (axis.norm() < 1e-3) axis = Eigen::Vector3d::UnitY();
  return Eigen::AngleAxisd(uniform(-max_angle, max_angle), axis.normalized()).toRotationMatrix();
}

CameraFrame RandomSource::camera(std::size_t width, std::size_t height) {
  CameraFrame c;
  c.width = width;
  c.height = height;
  c.K << uniform(0.6, 1.2) * double(width), 0, uniform(0.4, 0.6) * double(width), 0, uniform(0.6, 1.2) * double(width),
      uniform(0.4, 0.6) * double(height), 0, 0, 1;
  return c;
}

}  // namespace htcl
