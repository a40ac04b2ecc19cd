// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include "htcl/verify.hpp"

using namespace htcl;

TEST_CASE("oracle and gradient suites pass at reduced seeds") {
  VerifyOptions opts;
  opts.seeds = 25;
  opts.base_seed = 1000;
  for (const auto& rep : {oracle_suite(opts), grad_suite(opts)}) {
    INFO(rep.to_text());
    CHECK(rep.passed());
    for (const auto& c : rep.checks) CHECK(c.cases == 25);
  }
}

TEST_CASE("a perturbed conv kernel is reported with seed and location") {
  VerifyOptions opts;
  opts.seeds = 10;
  opts.base_seed = 40;
  opts.conv = [](const TensorD& x, const Conv3dParams<double>& p) {
    auto q = p;
    q.weights[0] += 1e-3;  // the fixture's deliberate defect
    return conv3d(x, q);
  };
  const auto rep = oracle_suite(opts);
  CHECK_FALSE(rep.passed());
  const CheckResult* conv = rep.find("tensor_core", "conv3d_vs_nested_loops");
  REQUIRE(conv != nullptr);
  CHECK_FALSE(conv->passed());
  CHECK(conv->failures > 0);
  CHECK(conv->worst_seed >= 40);
  CHECK(conv->worst_seed < 50);
  CHECK(conv->max_error > conv->tolerance);
  CHECK_FALSE(conv->location.empty());
  CHECK(conv->line().rfind("FAIL", 0) == 0);
  CHECK(conv->line().find("seed=" + std::to_string(conv->worst_seed)) != std::string::npos);
  // nothing else is affected
  for (const auto& c : rep.checks) {
    if (&c != conv) CHECK(c.passed());
  }
}

TEST_CASE("report serialization") {
  VerifyOptions opts;
  opts.seeds = 3;
  const auto rep = merge_reports("all", {geometry_suite(opts)});
  const auto j = nlohmann::json::parse(rep.to_json());
  CHECK(j.at("suite") == "all");
  CHECK(j.at("passed") == true);
  CHECK(j.at("checks").size() == rep.checks.size());
  CHECK(rep.to_text().find("PASS") != std::string::npos);
  CHECK(rep.find("camera_geometry", "no_such_check") == nullptr);
}

TEST_CASE("epipolar consistency and affinity signal on the default scene") {
  const Scene scene = gen_scene(default_scene_spec());
  const auto e = epipolar_consistency(scene, 1);
  CHECK(e.pixels > 50);
  CHECK(e.mean_abs_error <= 1e-3);

  const PipelineConfig cfg;
  const auto params = init_model(cfg, scene.feature_channels(), 5);
  const auto a = affinity_signal(cfg, scene, params, 1);
  CHECK(a.cells > 100);
  CHECK(a.true_mean <= 1 + 1e-6);
  CHECK(a.margin() >= 0.2);
  CHECK(affinity_signal(cfg, scene, params, 1).permuted_mean == a.permuted_mean);
}
