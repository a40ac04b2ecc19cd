// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "htcl/gradcheck.hpp"
#include "htcl/ops.hpp"
#include "htcl/parallel.hpp"
#include "htcl/tensor_io.hpp"

using namespace htcl;

namespace {

TensorD random_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD t(std::move(shape));
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

double max_abs(const TensorD& t) {
  double m = 0;
  for (double v : t.storage()) m = std::max(m, std::abs(v));
  return m;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("htcl_test_" + name);
}

}  // namespace

TEST_CASE("tensor construction checks shapes") {
  CHECK_THROWS_AS(TensorD({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(TensorD({2, 2}, std::vector<double>(3)), ShapeError);
  TensorD t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.offset(1, 2, 3) == 23);
  CHECK(t.stride(0) == 12);
  CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
}

TEST_CASE("elementwise ops") {
  const TensorD a({3}, {1, 2, 3});
  const TensorD b({3}, {4, 5, 6});
  CHECK(elementwise(ElementwiseOp::add, a, b) == TensorD({3}, {5, 7, 9}));
  CHECK(elementwise(ElementwiseOp::sub, b, a) == TensorD({3}, {3, 3, 3}));
  CHECK(elementwise(ElementwiseOp::mul, a, b) == TensorD({3}, {4, 10, 18}));
  CHECK(elementwise(ElementwiseOp::scale, a, 2.0) == TensorD({3}, {2, 4, 6}));
  CHECK_THROWS_AS(elementwise(ElementwiseOp::add, a, TensorD({4})), ShapeError);
}

TEST_CASE("concat then split reproduces the inputs on every axis") {
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Shape sa{2, 3, 4}, sb{2, 3, 4};
    sb[axis] = 5;
    const auto a = random_tensor(sa, 1 + axis), b = random_tensor(sb, 11 + axis);
    const auto cat = concat<double>({a, b}, axis);
    CHECK(cat.dim(axis) == sa[axis] + 5);
    const auto parts = split(cat, axis, {sa[axis], 5});
    REQUIRE(parts.size() == 2);
    CHECK(parts[0] == a);
    CHECK(parts[1] == b);
  }
  CHECK_THROWS_AS(concat<double>({TensorD({2, 3}), TensorD({2, 4})}, 0), ShapeError);
  CHECK_THROWS_AS(split(TensorD({4}), 0, {1, 2}), ShapeError);
}

TEST_CASE("gelu uses the exact Gaussian CDF") {
  const TensorD x({5}, {0.0, 1.0, -1.0, 10.0, -10.0});
  const auto y = gelu(x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(y[2] == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
  CHECK(y[3] == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(std::abs(y[4]) < 1e-12);
}

TEST_CASE("softmax is normalized and shift invariant") {
  const auto x = random_tensor({4, 3, 5}, 3, -5, 5);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const auto p = softmax(x, axis);
    const auto q = softmax(elementwise(ElementwiseOp::add, x, 17.5), axis);
    CHECK(max_rel_error(p, q, 1.0) <= 1e-6);
    // sums along the axis
    const std::size_t n = x.dim(axis), stride = x.stride(axis);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if ((i / stride) % n) continue;
      double s = 0;
      for (std::size_t k = 0; k < n; ++k) s += p[i + k * stride];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  TensorD bad({2}, {0.0, NAN});
  CHECK_THROWS_AS(softmax(bad, 0), ValueError);
}

TEST_CASE("group norm statistics") {
  const TensorD gamma = TensorD::ones({4}), beta = TensorD::zeros({4});
  const auto c = group_norm(TensorD({4, 3, 3}, 2.5), 2, gamma, beta);
  CHECK(max_abs(c) == 0.0);

  const auto x = random_tensor({4, 5, 6}, 5, -3, 7);
  const auto y = group_norm(x, 2, gamma, beta);
  const std::size_t per = 2 * 30;
  for (std::size_t g = 0; g < 2; ++g) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < per; ++i) mean += y[g * per + i];
    mean /= per;
    for (std::size_t i = 0; i < per; ++i) var += (y[g * per + i] - mean) * (y[g * per + i] - mean);
    var /= per;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1) <= 1e-4);
  }
  CHECK_THROWS_AS(group_norm(x, 3, TensorD::ones({4}), TensorD::zeros({4})), ShapeError);
}

TEST_CASE("conv3d identity kernel and dilated impulse response") {
  const auto x = random_tensor({3, 4, 5, 6}, 7);
  auto id = Conv3dParams<double>::pointwise(3, 3);
  for (std::size_t c = 0; c < 3; ++c) id.weights(c, c, 0, 0, 0) = 1;
  CHECK(conv3d(x, id) == x);

  TensorD impulse({1, 9, 9, 9});
  impulse(0, 4, 4, 4) = 1;
  auto p = Conv3dParams<double>::same(1, 1, 3, 2);
  p.weights.fill(1);
  const auto y = conv3d(impulse, p);
  std::size_t hits = 0;
  for (std::size_t d = 0; d < 9; ++d)
    for (std::size_t h = 0; h < 9; ++h)
      for (std::size_t w = 0; w < 9; ++w) {
        const bool tap = (d % 2 == 0 && d >= 2 && d <= 6) && (h % 2 == 0 && h >= 2 && h <= 6) &&
                         (w % 2 == 0 && w >= 2 && w <= 6);
        CHECK(y(0, d, h, w) == (tap ? 1.0 : 0.0));
        hits += tap;
      }
  CHECK(hits == 27);
}

TEST_CASE("conv3d is linear without bias") {
  auto p = Conv3dParams<double>::same(2, 3, 3, 1);
  p.weights = random_tensor(p.weights.shape(), 9);
  const auto x = random_tensor({3, 4, 4, 4}, 10), y = random_tensor({3, 4, 4, 4}, 11);
  const double a = 1.7, b = -0.4;
  const auto lhs = conv3d(elementwise(ElementwiseOp::add, elementwise(ElementwiseOp::scale, x, a),
                                      elementwise(ElementwiseOp::scale, y, b)),
                          p);
  const auto rhs = elementwise(ElementwiseOp::add, elementwise(ElementwiseOp::scale, conv3d(x, p), a),
                               elementwise(ElementwiseOp::scale, conv3d(y, p), b));
  CHECK(max_rel_error(lhs, rhs) <= 1e-5);
}

TEST_CASE("conv3d rejects inconsistent padding") {
  auto p = Conv3dParams<double>::same(1, 1, 3, 2);
  p.padding = 1;
  CHECK_THROWS_AS(p.require_same_padding(), ShapeError);
  auto q = Conv3dParams<double>::same(1, 2, 5, 1);
  q.padding = 0;
  CHECK_THROWS_AS(conv3d(TensorD({2, 3, 3, 3}), q), ShapeError);
}

TEST_CASE("trilinear sampling: nodes, midpoints, border, continuity") {
  const auto vol = random_tensor({2, 3, 4, 5}, 12);
  TensorD nodes({2, 3});
  const double pts[2][3] = {{1, 2, 3}, {2, 3, 4}};
  for (int i = 0; i < 2; ++i)
    for (int a = 0; a < 3; ++a) nodes(i, a) = pts[i][a];
  const auto s = trilinear_sample(vol, nodes);
  CHECK(s(0, 0) == vol(0, 1, 2, 3));
  CHECK(s(1, 1) == vol(1, 2, 3, 4));

  TensorD mid({1, 3}, {1.0, 2.0, 2.5});
  CHECK(trilinear_sample(vol, mid)(0, 0) == doctest::Approx(0.5 * (vol(0, 1, 2, 2) + vol(0, 1, 2, 3))));

  TensorD out({2, 3}, {-0.1, 0, 0, 0, 0, 4.5});
  const auto z = trilinear_sample(vol, out);
  CHECK(z(0, 0) == 0.0);
  CHECK(z(0, 1) == 0.0);

  TensorD near({2, 3}, {1.3, 2.0 - 1e-6, 2.2, 1.3, 2.0 + 1e-6, 2.2});
  const auto n = trilinear_sample(vol, near);
  CHECK(std::abs(n(0, 0) - n(0, 1)) <= 1e-4);
}

TEST_CASE("upsample keeps constants and scales shape") {
  const TensorD x({2, 2, 3, 1}, 4.0);
  const auto y = upsample_trilinear(x, 2);
  CHECK(y.shape() == Shape{2, 4, 6, 2});
  for (double v : y.storage()) CHECK(v == doctest::Approx(4.0));
  CHECK(upsample_trilinear(x, 1) == x);
}

TEST_CASE("finite differences") {
  const TensorD x({2}, {1.0, 2.0});
  const auto g = finite_diff_grad([](const TensorD& t) { return t[0] * t[0] + t[1] * t[1]; }, x);
  CHECK(std::abs(g[0] - 2) <= 1e-8);
  CHECK(std::abs(g[1] - 4) <= 1e-8);
  const auto z = finite_diff_grad([](const TensorD&) { return 3.0; }, x);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
}

TEST_CASE("tensor files round trip and report bad input") {
  const auto t = random_tensor({2, 3, 4}, 13);
  const auto path = temp_path("roundtrip.htcv");
  write_tensor(path, t);
  CHECK(peek_tensor_dtype(path) == DType::f64);
  CHECK(read_tensor<double>(path) == t);
  const auto f = read_tensor<float>(path);
  CHECK(f.shape() == t.shape());

  const TensorF tf = t.cast<float>();
  write_tensor(path, tf);
  CHECK(peek_tensor_dtype(path) == DType::f32);
  CHECK(read_tensor<float>(path) == tf);

  CHECK_THROWS_AS(read_tensor<float>(temp_path("missing.htcv")), IoError);
  {
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    std::fputs("NOPE", fp);
    std::fclose(fp);
  }
  CHECK_THROWS_AS(read_tensor<float>(path), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("parallel_for covers every index once for any worker count") {
  for (int n : {1, 2, 3, 8}) {
    set_num_threads(n);
    std::vector<int> seen(1001, 0);
    parallel_for(seen.size(), [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) ++seen[i];
    });
    for (int v : seen) REQUIRE(v == 1);
  }
  set_num_threads(0);
  CHECK(num_threads() == 1);
}
