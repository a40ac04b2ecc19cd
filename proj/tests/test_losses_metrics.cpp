// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>
#include <cmath>

#include "htcl/losses_metrics.hpp"
#include "htcl/verify.hpp"

using namespace htcl;

namespace {

VoxelGridSpec line_spec(std::size_t n, std::uint8_t classes = 3) {
  VoxelGridSpec s;
  s.dims = {1, 1, n};
  s.num_classes = classes;
  return s;
}

VoxelGrid grid(const VoxelGridSpec& s, std::vector<std::uint8_t> labels) {
  VoxelGrid g(s);
  g.labels = std::move(labels);
  return g;
}

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return t.storage();
}

}  // namespace

TEST_CASE("IoU hand cases") {
  const auto s = line_spec(4);
  const auto a = grid(s, {0, 1, 2, 1});
  const auto same = compute_iou(a, a);
  CHECK(same.iou == 1.0);
  CHECK(same.miou == 1.0);

  const auto disjoint = compute_iou(grid(s, {1, 0, 0, 0}), grid(s, {0, 1, 0, 0}));
  CHECK(disjoint.iou == 0.0);
  CHECK(disjoint.miou == 0.0);

  // TP = 1, FP = 1, FN = 1
  const auto third = compute_iou(grid(s, {1, 1, 0, 0}), grid(s, {0, 1, 1, 0}));
  CHECK(third.iou == 1.0 / 3);
  CHECK(third.per_class_iou[0] == 1.0 / 3);
  CHECK(third.counts[0].tp == 1);
  CHECK(third.counts[0].fp == 1);
  CHECK(third.counts[0].fn == 1);
  CHECK(third.present == std::vector<bool>{true, false});
  CHECK(third.miou == 1.0 / 3);

  CHECK_THROWS_AS(compute_iou(a, grid(line_spec(4, 4), {0, 0, 0, 0})), Error);
  CHECK_THROWS_AS(compute_iou(a, grid(line_spec(3), {0, 0, 0})), Error);
}

TEST_CASE("IoU ignores ignore-labelled voxels whatever the prediction holds there") {
  const auto s = line_spec(5);
  const auto gt = grid(s, {1, 255, 2, 255, 0});
  const auto base = compute_iou(grid(s, {1, 0, 2, 0, 0}), gt);
  CHECK(base.iou == 1.0);
  CHECK(base.miou == 1.0);
  for (std::uint8_t x : {0, 1, 2}) {
    for (std::uint8_t y : {0, 1, 2}) {
      const auto r = compute_iou(grid(s, {1, x, 2, y, 0}), gt);
      CHECK(r.iou == base.iou);
      CHECK(r.miou == base.miou);
      CHECK(r.per_class_iou == base.per_class_iou);
    }
  }
}

TEST_CASE("IoU is symmetric under class relabeling") {
  RandomSource rs(1);
  VoxelGridSpec s;
  s.dims = {4, 3, 5};
  s.num_classes = 5;
  VoxelGrid pred(s), gt(s);
  for (std::size_t i = 0; i < s.count(); ++i) {
    pred.labels[i] = std::uint8_t(rs.integer(0, 4));
    gt.labels[i] = std::uint8_t(rs.integer(0, 4));
  }
  const auto base = compute_iou(pred, gt);
  const std::uint8_t perm[5] = {0, 3, 1, 4, 2};  // free class stays free
  VoxelGrid pp = pred, pg = gt;
  for (auto& l : pp.labels) l = perm[l];
  for (auto& l : pg.labels) l = perm[l];
  const auto r = compute_iou(pp, pg);
  CHECK(r.iou == base.iou);
  CHECK(r.miou == doctest::Approx(base.miou).epsilon(1e-15));
  for (std::size_t c = 1; c < 5; ++c) CHECK(r.per_class_iou[perm[c] - 1] == base.per_class_iou[c - 1]);
}

TEST_CASE("metric report JSON") {
  const auto s = line_spec(2);
  const auto r = compute_iou(grid(s, {1, 2}), grid(s, {1, 0}));
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j.at("iou").get<double>() == doctest::Approx(0.5));
  CHECK(j.at("miou").get<double>() == doctest::Approx(0.5));  // class 2 is a false positive
  CHECK(j.at("per_class").size() == 2);
}

TEST_CASE("cross-entropy values") {
  const TensorD uniform({4, 3}, 0.25);
  const std::vector<std::uint8_t> labels{0, 3, 1};
  const auto ce = cross_entropy(uniform, labels, 255);
  CHECK(ce.value == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  TensorD onehot({4, 3});
  for (std::size_t i = 0; i < 3; ++i) onehot(labels[i], i) = 1;
  CHECK(cross_entropy(onehot, labels, 255).value == doctest::Approx(0.0));
  TensorD wrong({4, 3});
  wrong(2, 0) = wrong(2, 1) = wrong(2, 2) = 1;
  CHECK(cross_entropy(wrong, labels, 255).value == doctest::Approx(-std::log(kLogClamp)));

  const std::vector<std::uint8_t> ignored{255, 255, 255};
  CHECK_THROWS_AS(cross_entropy(uniform, ignored, 255), ValueError);

  const std::vector<double> w{1, 1, 1, 3};
  const std::vector<std::uint8_t> skip{3, 255, 0};
  CHECK(weighted_ce(uniform, skip, w, 255).value == doctest::Approx(2 * std::log(4.0)));
}

TEST_CASE("weighted CE with unit weights equals plain CE bitwise") {
  RandomSource rs(2);
  const auto probs = softmax(rs.tensor({5, 2, 3, 4}, -3, 3), 0);
  std::vector<std::uint8_t> labels(24);
  for (auto& l : labels) l = std::uint8_t(rs.integer(0, 4));
  labels[5] = 255;
  const std::vector<double> ones(5, 1.0);
  const auto a = weighted_ce(probs, labels, ones, 255);
  const auto b = cross_entropy(probs, labels, 255);
  CHECK(a.value == b.value);
  CHECK(a.grad == b.grad);
}

TEST_CASE("depth BCE values") {
  const TensorD half({2, 1, 3}, 0.5);
  const std::vector<int> bins{0, 1, -1};
  CHECK(depth_bce(half, bins).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  TensorD onehot({3, 1, 2});
  onehot(1, 0, 0) = 1;
  onehot(2, 0, 1) = 1;
  CHECK(depth_bce(onehot, std::vector<int>{1, 2}).value == doctest::Approx(0.0));
  CHECK_THROWS_AS(depth_bce(half, std::vector<int>{-1, -1, -1}), ValueError);
}

TEST_CASE("occupancy BCE at its fixed point") {
  TensorD probs({3, 2});
  probs(0, 0) = 1;
  probs(2, 1) = 1;
  const std::vector<std::uint8_t> labels{0, 2};
  CHECK(occupancy_bce(probs, labels, 255).value == doctest::Approx(0.0));
}

TEST_CASE("loss values are non-negative") {
  RandomSource rs(3);
  for (int i = 0; i < 20; ++i) {
    const auto probs = softmax(rs.tensor({4, 6}, -3, 3), 0);
    std::vector<std::uint8_t> labels(6);
    for (auto& l : labels) l = std::uint8_t(rs.integer(0, 3));
    CHECK(cross_entropy(probs, labels, 255).value >= 0);
    CHECK(occupancy_bce(probs, labels, 255).value >= 0);
    const auto dist = softmax(rs.tensor({4, 2, 3}, -3, 3), 0);
    CHECK(depth_bce(dist, std::vector<int>{0, 1, 2, 3, 0, 1}).value >= 0);
  }
}

TEST_CASE("photometric error") {
  RandomSource rs(4);
  const auto img = rs.tensor({3, 6, 7}, 0, 1);
  for (double x : values(photometric_error(img, img))) CHECK(std::abs(x) <= 1e-6);

  // constant 0.5 is its own inverse: the L1 term vanishes
  const TensorD gray({3, 4, 4}, 0.5);
  TensorD inv = gray;
  for (auto& v : inv.storage()) v = 1 - v;
  for (double x : values(photometric_error(gray, inv, 0.0))) CHECK(x == 0.0);

  TensorD flipped = img;
  for (auto& v : flipped.storage()) v = 1 - v;
  const auto l1 = photometric_error(img, flipped, 0.0);
  for (std::size_t p = 0; p < 42; ++p) {
    double want = 0;
    for (std::size_t c = 0; c < 3; ++c) want += std::abs(2 * (img[c * 42 + p] - 0.5)) / 3;
    CHECK(l1[p] == doctest::Approx(want).epsilon(1e-12));
  }
  const auto pe = photometric_error(img, flipped);
  for (double x : pe.storage()) CHECK(x >= 0);
}

TEST_CASE("edge-aware smoothness") {
  const TensorD flat_img({3, 4, 5}, 0.3);
  CHECK(smoothness(TensorD({4, 5}, 2.0), flat_img) == 0.0);
  TensorD ramp({4, 5});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) ramp(y, x) = 0.25 * double(x);
  CHECK(smoothness(ramp, flat_img) == doctest::Approx(0.25));

  TensorD edges = flat_img;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 5; ++x) edges(c, y, x) = (x % 2) ? 1.0 : 0.0;
  CHECK(smoothness(ramp, edges) < smoothness(ramp, flat_img));
}

TEST_CASE("total loss") {
  const auto zero = total_loss({{"depth", 0, 1}, {"ce", 0, 1}});
  CHECK(zero.total == 0.0);
  CHECK(total_loss({{"depth", 0.7, 1}, {"ce", 2.0, 0}}).total == 0.7);
  const double a = total_loss({{"depth", 0.7, 1}, {"ce", 2.0, 1}}).total;
  const double b = total_loss({{"depth", 0.7, 1}, {"ce", 2.0, 3}}).total;
  CHECK(b - a == doctest::Approx(4.0));
  CHECK(total_loss({{"depth", 0.5, 2}}).terms.size() == 1);
  CHECK_THROWS_AS(total_loss({{"depth", 0.5, -1}}), ValueError);
}
