// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "htcl/pattern_affinity.hpp"
#include "htcl/verify.hpp"

using namespace htcl;

namespace {

// Copy of the elements; safe to iterate when the tensor is a temporary.
template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return t.storage();
}

TensorD affine(const TensorD& x, double a, double b) {
  TensorD y = x;
  for (auto& v : y.storage()) v = a * v + b;
  return y;
}

MultiGroupParams<double> random_params(RandomSource& rs, std::size_t in_ch, const std::vector<std::size_t>& dil) {
  auto p = make_multi_group_params<double>(in_ch, 4, 3, dil, 2);
  for (auto& b : p.branches) {
    b.atrous.weights = rs.tensor(b.atrous.weights.shape(), -0.5, 0.5);
    b.atrous.bias = rs.tensor(b.atrous.bias.shape(), -0.1, 0.1);
    b.gamma = rs.tensor(b.gamma.shape(), 0.5, 1.5);
    b.beta = rs.tensor(b.beta.shape(), -0.2, 0.2);
  }
  return p;
}

}  // namespace

TEST_CASE("multi_group_context shapes and zero input") {
  RandomSource rs(1);
  const auto v = rs.tensor({3, 4, 5, 6}, -1, 1);
  const auto p = random_params(rs, 3, {1, 2, 4});
  const auto ctx = multi_group_context(v, p);
  REQUIRE(ctx.groups.size() == 3);
  CHECK(ctx.dilations == std::vector<std::size_t>{1, 2, 4});
  for (const auto& g : ctx.groups) CHECK(g.shape() == Shape{4, 4, 5, 6});

  auto zero = make_multi_group_params<double>(3, 4, 3, {1, 2, 4}, 2);
  for (auto& b : zero.branches) b.beta.fill(0.25);
  const auto zctx = multi_group_context(TensorD({3, 4, 5, 6}), zero);
  for (const auto& g : zctx.groups) {
    for (double x : values(g)) CHECK(x == 0.25);
  }
}

TEST_CASE("multi_group_context is conv, then GELU, then group norm") {
  RandomSource rs(2);
  const auto v = rs.tensor({3, 4, 5, 6}, -1, 1);
  const auto p = random_params(rs, 3, {1, 2, 4});
  const auto ctx = multi_group_context(v, p);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& b = p.branches[i];
    const auto want = group_norm(gelu(conv3d(v, b.atrous)), p.norm_groups, b.gamma, b.beta, p.norm_eps);
    CHECK(ctx.groups[i] == want);
  }
  auto bad = p;
  bad.branches[1].atrous.padding = 1;
  CHECK_THROWS_AS(multi_group_context(v, bad), ShapeError);
}

TEST_CASE("group_affinity: self, anti, symmetry, range") {
  RandomSource rs(3);
  const auto c = rs.tensor({4, 3, 4, 5}, -1, 1);
  for (double x : values(group_affinity(c, c))) CHECK(std::abs(x - 1) <= 1e-6);
  for (double x : values(group_affinity(c, affine(c, -1, 0)))) CHECK(std::abs(x + 1) <= 1e-6);
  const auto h = rs.tensor({4, 3, 4, 5}, -1, 1);
  CHECK(group_affinity(c, h) == group_affinity(h, c));
  for (double x : values(group_affinity(c, h))) {
    CHECK(x >= -1 - 1e-6);
    CHECK(x <= 1 + 1e-6);
  }
}

TEST_CASE("group_affinity is affine invariant and zero on constant vectors") {
  RandomSource rs(4);
  for (int i = 0; i < 100; ++i) {
    const auto c = rs.tensor({4, 2, 3, 3}, -1, 1);
    const double a = rs.uniform(0.1, 4) * (i % 2 ? -1 : 1), b = rs.uniform(-3, 3);
    for (double x : values(group_affinity(c, affine(c, a, b)))) CHECK(std::abs(x - (a > 0 ? 1 : -1)) <= 1e-6);
  }
  const TensorD flat({4, 1, 1, 1}, 0.7);
  CHECK(group_affinity(flat, flat)[0] == 0.0);
  CHECK(group_affinity(TensorD({4, 1, 1, 1}, {1, 2, 3, 4}), flat)[0] == 0.0);
}

TEST_CASE("cosine baseline drops under a shift while CPA does not") {
  const TensorD a({3, 1, 1, 1}, {1.0, 0.0, 0.0});
  const TensorD b({3, 1, 1, 1}, {0.0, 2.0, 0.0});
  CHECK(cosine_baseline(a, a)[0] == doctest::Approx(1.0));
  CHECK(cosine_baseline(a, b)[0] == doctest::Approx(0.0));

  RandomSource rs(5);
  const auto c = rs.tensor({6, 1, 2, 2}, -1, 1);
  double prev = 1.0 + 1e-12;
  for (double shift : {0.5, 1.0, 2.0, 4.0}) {
    const auto shifted = affine(c, 1, shift);
    const double cos = cosine_baseline(c, shifted)[0];
    CHECK(cos < prev);
    prev = cos;
    CHECK(std::abs(group_affinity(c, shifted)[0] - 1) <= 1e-6);
  }
}

TEST_CASE("cross_frame_affinity stacks per-scale affinities") {
  RandomSource rs(6);
  const auto p = random_params(rs, 3, {1, 2, 4});
  const auto cur = multi_group_context(rs.tensor({3, 4, 5, 6}, -1, 1), p);
  const auto his = multi_group_context(rs.tensor({3, 4, 5, 6}, -1, 1), p);
  const auto av = cross_frame_affinity(cur, his);
  CHECK(av.num_groups() == 3);
  const std::size_t n = 4 * 5 * 6;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto want = group_affinity(cur.groups[k], his.groups[k]);
    CHECK(std::equal(want.raw(), want.raw() + n, av.data.raw() + k * n));
  }
  const auto plain = cross_frame_affinity(cur, his, false);
  const auto want0 = cosine_baseline(cur.groups[0], his.groups[0]);
  CHECK(std::equal(want0.raw(), want0.raw() + n, plain.data.raw()));

  auto short_his = his;
  short_his.groups.pop_back();
  CHECK_THROWS_AS(cross_frame_affinity(cur, short_his), ShapeError);
}

TEST_CASE("affinity_reduce") {
  AffinityVolume<double> one{TensorD({1, 1, 2, 2}, {0.1, 0.2, 0.3, 0.4})};
  CHECK(affinity_reduce(one) == TensorD({1, 2, 2}, {0.1, 0.2, 0.3, 0.4}));
  AffinityVolume<double> three{TensorD({3, 1, 1, 1}, {1.0, 0.0, -1.0})};
  CHECK(affinity_reduce(three)[0] == 0.0);
  CHECK(affinity_reduce(three, AffinityReduce::max)[0] == 1.0);
}

TEST_CASE("heatmap export levels and round trip") {
  CHECK(heatmap_level(1.0) == 255);
  CHECK(heatmap_level(-1.0) == 0);
  CHECK(heatmap_level(5.0) == 255);
  const auto dir = std::filesystem::temp_directory_path() / "htcl_test_heatmap";
  std::filesystem::create_directories(dir);

  export_heatmap(TensorD({3, 4}, 1.0), dir / "ones.pgm");
  for (auto g : values(read_pgm(dir / "ones.pgm"))) CHECK(g == 255);

  RandomSource rs(7);
  const auto slice = rs.tensor({5, 7}, -1, 1);
  export_heatmap(slice, dir / "rand.pgm");
  const auto back = read_pgm(dir / "rand.pgm");
  REQUIRE(back.shape() == Shape{5, 7});
  for (std::size_t i = 0; i < slice.size(); ++i) CHECK(back[i] == heatmap_level(slice[i]));

  CHECK_THROWS_AS(export_heatmap(slice, dir / "no" / "such" / "dir.pgm"), IoError);
  CHECK_THROWS_AS(read_pgm(dir / "missing.pgm"), IoError);
  std::filesystem::remove_all(dir);
}
