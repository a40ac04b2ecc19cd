// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "htcl/camera.hpp"
#include "htcl/verify.hpp"

using namespace htcl;

namespace {

// Copy of the elements; safe to iterate when the tensor is a temporary.
template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return t.storage();
}

Eigen::Matrix3d intrinsics(double fx, double fy, double cx, double cy) {
  Eigen::Matrix3d K;
  K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return K;
}

CameraFrame camera(std::size_t w = 64, std::size_t h = 48) {
  CameraFrame c;
  c.K = intrinsics(50, 52, 32, 24);
  c.width = w;
  c.height = h;
  return c;
}

}  // namespace

TEST_CASE("backproject examples") {
  const auto K = intrinsics(50, 52, 32, 24);
  const auto p = backproject({32, 24, 1}, 3.5, K);
  CHECK((p - Eigen::Vector3d(0, 0, 3.5)).norm() <= 1e-12);
  const auto q = backproject({32 + 50, 24, 1}, 1.0, K);
  CHECK((q - Eigen::Vector3d(1, 0, 1)).norm() <= 1e-12);
  CHECK_THROWS_AS(backproject({1, 1, 1}, 1.0, Eigen::Matrix3d::Zero()), ValueError);
}

TEST_CASE("project inverts backproject") {
  RandomSource rs(3);
  for (int i = 0; i < 200; ++i) {
    const auto cam = rs.camera(64, 48);
    const Eigen::Vector3d p(rs.uniform(0, 64), rs.uniform(0, 48), 1);
    const double d = rs.uniform(0.5, 20);
    CHECK((project(backproject(p, d, cam.K), cam.K) - p).norm() <= 1e-9);
  }
}

TEST_CASE("warp_pixel examples") {
  const auto K = intrinsics(50, 52, 32, 24);
  const Eigen::Matrix3d I = Eigen::Matrix3d::Identity();
  for (double d : {0.5, 2.0, 50.0}) {
    const auto w = warp_pixel({10.25, 7.5, 1}, d, K, K, I, Eigen::Vector3d::Zero());
    CHECK(w.valid);
    CHECK((w.pixel - Eigen::Vector2d(10.25, 7.5)).norm() <= 1e-9);
    CHECK(w.depth == doctest::Approx(d));
  }
  const auto axial = warp_pixel({32, 24, 1}, 5.0, K, K, I, {0, 0, -1});
  CHECK((axial.pixel - Eigen::Vector2d(32, 24)).norm() <= 1e-12);
  CHECK(axial.depth == doctest::Approx(4.0));
  const auto behind = warp_pixel({32, 24, 1}, 5.0, K, K, I, {0, 0, -6});
  CHECK_FALSE(behind.valid);
}

TEST_CASE("warp_pixel is invariant to homogeneous scale") {
  RandomSource rs(5);
  for (int i = 0; i < 100; ++i) {
    const auto a = rs.camera(64, 48), b = rs.camera(64, 48);
    const Eigen::Matrix3d R = rs.rotation(0.2);
    const Eigen::Vector3d t(rs.uniform(-0.3, 0.3), rs.uniform(-0.3, 0.3), rs.uniform(-0.3, 0.3));
    const Eigen::Vector3d p(rs.uniform(0, 64), rs.uniform(0, 48), 1);
    const double d = rs.uniform(2, 10), lambda = rs.uniform(0.2, 5);
    // K0^-1 (lambda p) d / lambda hits the same ray point, so divide the depth accordingly.
    const auto w1 = warp_pixel(p, d, a.K, b.K, R, t);
    const auto w2 = warp_pixel(lambda * p, d / lambda, a.K, b.K, R, t);
    CHECK((w1.pixel - w2.pixel).norm() <= 1e-9);
  }
}

TEST_CASE("warping there and back returns the start pixel") {
  RandomSource rs(9);
  for (int i = 0; i < 100; ++i) {
    CameraFrame cur = rs.camera(64, 48), his = rs.camera(64, 48);
    his.R = rs.rotation(0.1);
    his.t = {rs.uniform(-0.2, 0.2), rs.uniform(-0.2, 0.2), rs.uniform(-0.2, 0.2)};
    const Eigen::Vector3d p(rs.uniform(8, 56), rs.uniform(8, 40), 1);
    const double d = rs.uniform(3, 8);
    const auto there = warp_pixel(p, d, cur.K, his.K, his.R, his.t);
    REQUIRE(there.valid);
    const auto back = relative_pose(his, cur);
    const auto home = warp_pixel({there.pixel.x(), there.pixel.y(), 1}, there.depth, his.K, cur.K, back.R, back.t);
    CHECK((home.pixel - p.head<2>()).norm() <= 1e-6);
    CHECK(home.depth == doctest::Approx(d).epsilon(1e-9));
  }
}

TEST_CASE("identity pose grid is the pixel centers") {
  const auto cam = camera(64, 48);
  const auto hyp = DepthHypotheses::inverse_depth(1, 10, 5);
  const auto g = build_warp_grid(cam, cam, hyp, 12, 16);
  CHECK(g.coords.shape() == Shape{5, 12, 16, 2});
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t v = 0; v < 12; ++v)
      for (std::size_t u = 0; u < 16; ++u) {
        CHECK(std::abs(g.coords(j, v, u, 0) - (u + 0.5)) <= 1e-9);
        CHECK(std::abs(g.coords(j, v, u, 1) - (v + 0.5)) <= 1e-9);
        CHECK(g.mask(j, v, u) == 1);
      }
}

TEST_CASE("grid matches a per-pixel warp_pixel loop exactly") {
  RandomSource rs(21);
  CameraFrame cur = rs.camera(64, 48), his = rs.camera(64, 48);
  his.R = rs.rotation(0.1);
  his.t = {0.1, -0.05, 0.2};
  const auto hyp = DepthHypotheses::uniform(1, 6, 4);
  const auto g = build_warp_grid(cur, his, hyp, 12, 16);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t v = 0; v < 12; ++v)
      for (std::size_t u = 0; u < 16; ++u) {
        const auto w = warp_pixel(feature_pixel_center(cur, 12, 16, u, v), hyp[j], cur.K, his.K, his.R, his.t);
        if (!g.mask(j, v, u)) continue;
        // image pixels to source feature pixels
        CHECK(g.coords(j, v, u, 0) == w.pixel.x() / (64.0 / 16));
        CHECK(g.coords(j, v, u, 1) == w.pixel.y() / (48.0 / 12));
      }
}

TEST_CASE("frustum exit and monotone mask under forward motion") {
  auto cur = camera();
  auto his = cur;
  his.t = {0, 0, -200};  // camera 200 m ahead: every plane lands behind it
  const auto hyp = DepthHypotheses::uniform(1, 10, 6);
  const auto g = build_warp_grid(cur, his, hyp, 12, 16);
  std::size_t valid = 0;
  for (auto m : g.mask.storage()) valid += m;
  CHECK(valid == 0);

  // pure forward translation: along ascending depth a pixel leaves the frustum at most once
  his.t = {0, 0, -0.9};
  const auto f = build_warp_grid(cur, his, hyp, 12, 16);
  for (std::size_t v = 0; v < 12; ++v)
    for (std::size_t u = 0; u < 16; ++u) {
      int changes = 0;
      for (std::size_t j = 1; j < 6; ++j) changes += f.mask(j, v, u) != f.mask(j - 1, v, u);
      CHECK(changes <= 1);
      if (changes) CHECK(f.mask(0, v, u) == 0);
    }
}

TEST_CASE("warp_feature identity and empty masks") {
  RandomSource rs(4);
  const auto cam = camera();
  const auto hyp = DepthHypotheses::uniform(2, 4, 3);
  const auto src = rs.tensor({3, 12, 16}, -1, 1);
  const auto g = build_warp_grid(cam, cam, hyp, 12, 16);
  const auto out = warp_feature(src, g);
  CHECK(out.shape() == Shape{3, 3, 12, 16});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t v = 0; v < 12; ++v)
        for (std::size_t u = 0; u < 16; ++u) CHECK(std::abs(out(c, j, v, u) - src(c, v, u)) <= 1e-9);

  auto empty = g;
  empty.mask.fill(0);
  for (double x : values(warp_feature(src, empty))) CHECK(x == 0.0);
}

TEST_CASE("depth hypotheses") {
  CHECK_THROWS_AS(DepthHypotheses({1.0, 1.0}), ValueError);
  CHECK_THROWS_AS(DepthHypotheses({0.0, 1.0}), ValueError);
  const auto inv = DepthHypotheses::inverse_depth(1, 10, 4);
  CHECK(inv[0] == doctest::Approx(1));
  CHECK(inv[3] == doctest::Approx(10));
  const double step = 1 / inv[0] - 1 / inv[1];
  CHECK(1 / inv[1] - 1 / inv[2] == doctest::Approx(step));
  const auto uni = DepthHypotheses::uniform(1, 4, 4);
  CHECK(uni.values() == std::vector<double>{1, 2, 3, 4});
  CHECK(uni.continuous_index(2.5) == doctest::Approx(1.5));
  CHECK(uni.continuous_index(5) == -1);
  CHECK(uni.nearest(3.4) == 2);
}

TEST_CASE("camera validation") {
  auto c = camera();
  CHECK_NOTHROW(c.validate());
  c.R(0, 1) = 0.1;
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = camera();
  c.K(0, 0) = -1;
  CHECK_THROWS_AS(c.validate(), ValueError);
}

TEST_CASE("calibration file round trip, comments and errors") {
  const auto dir = std::filesystem::temp_directory_path() / "htcl_test_calib";
  std::filesystem::create_directories(dir);
  RandomSource rs(8);
  std::vector<CalibrationEntry> frames;
  for (int i = 0; i < 3; ++i) {
    CalibrationEntry e{i, rs.camera(64, 48)};
    e.frame.R = rs.rotation(0.3);
    e.frame.t = {rs.uniform(-1, 1), rs.uniform(-1, 1), rs.uniform(-1, 1)};
    frames.push_back(e);
  }
  write_calibration(dir / "calib.txt", frames);
  const auto back = read_calibration(dir / "calib.txt");
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back[i].id == i);
    CHECK((back[i].frame.K - frames[i].frame.K).norm() <= 1e-12);
    CHECK((back[i].frame.R - frames[i].frame.R).norm() <= 1e-12);
    CHECK((back[i].frame.t - frames[i].frame.t).norm() <= 1e-12);
    CHECK(back[i].frame.width == 64);
  }

  {
    std::ofstream out(dir / "commented.txt");
    out << "# comment line\n\nframe 4 K 10 0 5 0 10 5 0 0 1 R 1 0 0 0 1 0 0 0 1 t 0 0 0 size 10 10 # tail\n";
  }
  const auto one = read_calibration(dir / "commented.txt");
  REQUIRE(one.size() == 1);
  CHECK(one[0].id == 4);

  {
    std::ofstream out(dir / "bad.txt");
    out << "frame 1 K 1 2 3\n";
  }
  CHECK_THROWS(read_calibration(dir / "bad.txt"));
  CHECK_THROWS_AS(read_calibration(dir / "missing.txt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("geometry suite passes at reduced seeds") {
  VerifyOptions opts;
  opts.seeds = 20;
  const auto rep = geometry_suite(opts);
  INFO(rep.to_text());
  CHECK(rep.passed());
}
