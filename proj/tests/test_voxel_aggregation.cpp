// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "htcl/verify.hpp"
#include "htcl/voxel_aggregation.hpp"

using namespace htcl;

namespace {

// 1 x 1 image whose only pixel center looks straight down the optical axis.
CameraFrame axis_camera() {
  CameraFrame c;
  c.K << 1, 0, 0.5, 0, 1, 0.5, 0, 0, 1;
  c.width = c.height = 1;
  return c;
}

// One column of unit voxels along +z: voxel k spans z in [k, k + 1).
VoxelGridSpec column(std::size_t depth) {
  VoxelGridSpec s;
  s.dims = {1, 1, depth};
  s.voxel_size = 1.0;
  s.origin = {-0.5, -0.5, 0.0};
  return s;
}

AttentionParams<double> random_attention(RandomSource& rs, std::size_t C, std::size_t Cr, std::size_t dim) {
  auto ap = make_attention_params<double>(C, Cr, dim, 1, 0);
  for (TensorD* t : {&ap.q_w, &ap.q_b, &ap.k_w, &ap.k_b, &ap.v_w, &ap.v_b, &ap.out_w, &ap.out_b}) {
    *t = rs.tensor(t->shape(), -1, 1);
  }
  return ap;
}

}  // namespace

TEST_CASE("depth distribution is a softmax over planes") {
  const auto u = depth_distribution(TensorD({4, 2, 3}, 0.3));
  for (double x : u.storage()) CHECK(x == doctest::Approx(0.25));
  TensorD spike({4, 1, 1});
  spike[2] = 60;
  CHECK(depth_distribution(spike)[2] == doctest::Approx(1.0));
  RandomSource rs(1);
  const auto p = depth_distribution(rs.tensor({5, 3, 3}, -4, 4));
  for (std::size_t i = 0; i < 9; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += p[j * 9 + i];
    CHECK(std::abs(s - 1) <= 1e-6);
  }
  CHECK_THROWS_AS(depth_distribution(TensorD({2, 1, 1}, NAN)), ValueError);
}

TEST_CASE("lift-splat single scatter and a two-plane hand case") {
  const auto cam = axis_camera();
  const DepthHypotheses hyp({1.5, 2.5});
  const auto spec = column(4);
  const TensorD ctx({2, 1, 1}, {3.0, -1.0});

  const auto one = lift_splat(ctx, TensorD({2, 1, 1}, {1.0, 0.0}), cam, hyp, spec);
  CHECK(one.shape() == Shape{2, 1, 1, 4});
  CHECK(one == TensorD({2, 1, 1, 4}, {0, 3, 0, 0, 0, -1, 0, 0}));

  const auto two = lift_splat(ctx, TensorD({2, 1, 1}, {0.5, 0.5}), cam, hyp, spec);
  CHECK(two == TensorD({2, 1, 1, 4}, {0, 1.5, 1.5, 0, 0, -0.5, -0.5, 0}));
}

TEST_CASE("lift-splat mean normalizes by hit count") {
  const auto cam = axis_camera();
  const DepthHypotheses hyp({1.2, 1.4, 1.6});  // all three land in voxel 1
  const TensorD ctx({1, 1, 1}, {2.0});
  const auto out = lift_splat(ctx, TensorD({3, 1, 1}, {0.2, 0.3, 0.5}), cam, hyp, column(3));
  CHECK(out[1] == doctest::Approx(2.0 / 3));
  const auto plan = make_splat_plan(cam, hyp, 1, 1, column(3));
  CHECK(plan.hits(1) == 3);
  CHECK(splat_sum(ctx, TensorD({3, 1, 1}, {0.2, 0.3, 0.5}), plan)[1] == doctest::Approx(2.0));
}

TEST_CASE("lift-splat mass accounting drops exactly the out-of-grid mass") {
  RandomSource rs(2);
  CameraFrame cam = rs.camera(32, 24);
  const auto hyp = DepthHypotheses::inverse_depth(0.5, 12, 6);
  VoxelGridSpec spec;
  spec.dims = {6, 4, 8};
  spec.voxel_size = 0.5;
  spec.origin = {-1.5, -1.0, 1.0};
  const auto ctx = rs.tensor({3, 6, 8}, 0, 1);
  const auto dist = depth_distribution(rs.tensor({6, 6, 8}, -2, 2));
  const auto plan = make_splat_plan(cam, hyp, 6, 8, spec);
  const auto sum = splat_sum(ctx, dist, plan);
  double total = 0, kept = 0, dropped = 0;
  for (std::size_t j = 0; j < 6; ++j)
    for (std::size_t p = 0; p < 48; ++p) {
      double mass = 0;
      for (std::size_t c = 0; c < 3; ++c) mass += dist[j * 48 + p] * ctx[c * 48 + p];
      total += mass;
      (plan.voxel_of[j * 48 + p] < 0 ? dropped : kept) += mass;
    }
  CHECK(dropped > 0);
  CHECK(kept > 0);
  double got = 0;
  for (double x : sum.storage()) got += x;
  CHECK(std::abs(got - (total - dropped)) <= 1e-5 * total);
}

TEST_CASE("attention gate at zero returns the voxel volume bitwise") {
  RandomSource rs(3);
  auto ap = random_attention(rs, 3, 4, 8);
  ap.alpha = 0;
  const auto vox = rs.tensor({3, 2, 2, 2}), rel = rs.tensor({4, 2, 1, 3});
  CHECK(weighted_cross_attention(vox, rel, ap) == vox);
  auto apf = make_attention_params<float>(3, 4, 8, 1, 0);
  const TensorF voxf = vox.cast<float>();
  CHECK(weighted_cross_attention(voxf, rel.cast<float>(), apf) == voxf);
}

TEST_CASE("attention with a single key returns that value everywhere") {
  RandomSource rs(4);
  auto ap = random_attention(rs, 3, 4, 8);
  ap.alpha = 1;
  const auto vox = rs.tensor({3, 2, 2, 2}), rel = rs.tensor({4, 1, 1, 1});
  AttentionCache<double> cache;
  weighted_cross_attention(vox, rel, ap, {}, {}, &cache);
  for (std::size_t q = 0; q < 8; ++q) {
    CHECK(cache.probs[0](0, q) == 1.0);
    for (std::size_t c = 0; c < 3; ++c) CHECK(cache.cross[c * 8 + q] == doctest::Approx(cache.cross[c * 8]));
  }
}

TEST_CASE("attention residual, weight normalization and alpha gradient") {
  RandomSource rs(5);
  auto ap = random_attention(rs, 3, 4, 8);
  ap.alpha = 0.37;
  const auto vox = rs.tensor({3, 2, 3, 2}), rel = rs.tensor({4, 3, 2, 2});
  AttentionCache<double> cache;
  const auto ret = weighted_cross_attention(vox, rel, ap, {}, {}, &cache);
  for (std::size_t i = 0; i < ret.size(); ++i) CHECK(ret[i] == ap.alpha * cache.cross[i] + vox[i]);
  const auto& P = cache.probs[0];
  for (Eigen::Index q = 0; q < P.cols(); ++q) CHECK(std::abs(P.col(q).sum() - 1) <= 1e-6);

  const auto up = rs.tensor(ret.shape());
  const auto g = attention_backward(up, vox, rel, ap, cache);
  double want = 0;
  for (std::size_t i = 0; i < up.size(); ++i) want += up[i] * cache.cross[i];
  CHECK(g.alpha == doctest::Approx(want).epsilon(1e-12));

  const auto z = attention_backward(TensorD(ret.shape()), vox, rel, ap, cache);
  CHECK(z.alpha == 0.0);
  for (const TensorD* t : {&z.q_w, &z.k_w, &z.v_w, &z.out_w, &z.vox, &z.rel}) {
    for (double x : t->storage()) CHECK(x == 0.0);
  }
}

TEST_CASE("attention limits") {
  RandomSource rs(6);
  const auto ap = random_attention(rs, 3, 4, 8);
  const auto vox = rs.tensor({3, 2, 2, 2}), rel = rs.tensor({4, 2, 2, 2});
  AttentionLimits cap;
  cap.max_queries = 4;
  CHECK_THROWS_AS(weighted_cross_attention(vox, rel, ap, {}, cap), ValueError);
  AttentionLimits local;
  local.local_window = true;
  CHECK_THROWS_AS(weighted_cross_attention(vox, rel, ap, {}, local), NotImplementedError);
  CHECK_THROWS_AS(weighted_cross_attention(rs.tensor({2, 2, 2, 2}), rel, ap), ShapeError);
}

TEST_CASE("ssc head: normalization, identity projection and upsampling") {
  RandomSource rs(7);
  const auto ret = rs.tensor({3, 2, 2, 2}, -2, 2);
  auto head = Conv3dParams<double>::pointwise(3, 3);
  for (std::size_t c = 0; c < 3; ++c) head.weights(c, c, 0, 0, 0) = 1;
  const auto out1 = ssc_head(ret, head, 1);
  CHECK(max_rel_error(out1.probs, softmax(ret, 0)) <= 1e-12);

  head.weights = rs.tensor(head.weights.shape());
  const auto out2 = ssc_head(ret, head, 2);
  CHECK(out2.probs.shape() == Shape{3, 4, 4, 4});
  const std::size_t n = 64;
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(std::abs(out2.probs[i] + out2.probs[n + i] + out2.probs[2 * n + i] - 1) <= 1e-6);
  }
}

TEST_CASE("argmax labels: one-hot, ties and monotone transforms") {
  VoxelGridSpec spec;
  spec.dims = {1, 1, 3};
  spec.num_classes = 3;
  const TensorD probs({3, 1, 1, 3}, {0, 1.0 / 3, 0.2, 1, 1.0 / 3, 0.5, 0, 1.0 / 3, 0.3});
  const auto g = argmax_labels(probs, spec);
  CHECK(g.labels == std::vector<std::uint8_t>{1, 0, 1});

  RandomSource rs(8);
  spec.dims = {2, 3, 4};
  spec.num_classes = 5;
  const auto logits = rs.tensor({5, 2, 3, 4}, -3, 3);
  const auto base = argmax_labels(softmax(logits, 0), spec);
  CHECK(argmax_labels(logits, spec).labels == base.labels);
  TensorD scaled = logits;
  for (auto& x : scaled.storage()) x = 2.5 * x + 4;
  CHECK(argmax_labels(scaled, spec).labels == base.labels);
  for (std::size_t v = 0; v < 24; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 5; ++c)
      if (logits[c * 24 + v] > logits[best * 24 + v]) best = c;
    CHECK(base.labels[v] == best);
  }
}

TEST_CASE("voxel grid spec and file round trip") {
  VoxelGridSpec spec;
  spec.dims = {4, 2, 3};
  spec.voxel_size = 0.25;
  spec.origin = {-0.5, 0.0, 1.0};
  spec.num_classes = 4;
  CHECK(spec.locate({-0.49, 0.01, 1.01}) == 0);
  CHECK(spec.locate({0.49, 0.49, 1.74}) == long(spec.flat(3, 1, 2)));
  CHECK(spec.locate({0.51, 0.1, 1.1}) == -1);
  CHECK((spec.center(0, 0, 0) - Eigen::Vector3d(-0.375, 0.125, 1.125)).norm() <= 1e-12);
  const auto coarse = spec.coarsened(1);
  CHECK(coarse == spec);

  VoxelGrid g(spec);
  for (std::size_t i = 0; i < g.labels.size(); ++i) g.labels[i] = std::uint8_t(i % 4);
  const auto path = std::filesystem::temp_directory_path() / "htcl_test_grid.htvg";
  write_voxel_grid(path, g);
  const auto back = read_voxel_grid(path);
  CHECK(back.spec == spec);
  CHECK(back.labels == g.labels);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_voxel_grid(path), IoError);

  VoxelGridSpec bad;
  bad.voxel_size = 0;
  CHECK_THROWS(bad.validate());
}
