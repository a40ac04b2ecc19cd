// SPDX-License-Identifier: Apache-2.0
// Command-line entry point: scene generation, pipeline runs, training,
// ablations, frame sweeps and the verification suites.
#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "htcl/parallel.hpp"
#include "htcl/pipeline.hpp"
#include "htcl/verify.hpp"

namespace {

using namespace htcl;

constexpr int kOk = 0, kCheckFailed = 1, kConfigError = 2, kIoError = 3;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text << '\n';
  if (!out) throw IoError("write failed: " + path);
}

struct Globals {
  int threads = 1;
  std::optional<std::uint64_t> seed;
};

PipelineConfig load_config(const std::string& path, const Globals& g) {
  PipelineConfig cfg = path.empty() ? PipelineConfig{} : pipeline_config_from_json(read_text(path));
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

void print_metrics(const char* label, const MetricReport& m) {
  std::printf("%s iou=%.4f miou=%.4f per_class=[", label, m.iou, m.miou);
  for (std::size_t i = 0; i < m.per_class_iou.size(); ++i) std::printf("%s%.4f", i ? "," : "", m.per_class_iou[i]);
  std::printf("]\n");
}

// "a..b" or a single number.
std::pair<std::size_t, std::size_t> parse_range(const std::string& text) {
  try {
    const auto dots = text.find("..");
    std::size_t used = 0;
    if (dots == std::string::npos) {
      const auto v = std::stoul(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return {v, v};
    }
    const std::string a = text.substr(0, dots), b = text.substr(dots + 2);
    const auto lo = std::stoul(a, &used);
    if (used != a.size()) throw std::invalid_argument(text);
    const auto hi = std::stoul(b, &used);
    if (used != b.size()) throw std::invalid_argument(text);
    if (lo == 0 || hi < lo) throw std::invalid_argument(text);
    return {lo, hi};
  } catch (const std::logic_error&) {
    throw ConfigError("--frames: expected a range like 1..5, got '" + text + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale temporal semantic scene completion toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
  auto* seed_opt = app.add_option("--seed", seed, "override the scene or model seed");

  std::string spec_path, out_dir, config_path, scene_dir, report_path, affinity_dir, volumes_dir, frames = "1..5";
  std::string suite = "all";
  std::size_t seeds = 100;

  auto* gen = app.add_subcommand("gen", "generate a synthetic scene");
  gen->add_option("--spec", spec_path, "scene spec JSON (default scene when omitted)");
  gen->add_option("--out", out_dir, "output directory")->required();

  auto add_common = [&](CLI::App* sub, bool report_required) {
    sub->add_option("--config", config_path, "pipeline config JSON (defaults when omitted)");
    sub->add_option("--scene", scene_dir, "scene directory written by gen")->required();
    auto* r = sub->add_option("--report", report_path, "JSON report path");
    if (report_required) r->required();
  };
  auto* run = app.add_subcommand("run", "run the pipeline once with seeded initial weights");
  add_common(run, false);
  run->add_option("--dump-affinity", affinity_dir, "write reduced affinity slices as PGM");
  run->add_option("--dump-volumes", volumes_dir, "write every intermediate tensor");
  auto* train = app.add_subcommand("train", "desk-scale gradient descent");
  add_common(train, true);
  auto* abl = app.add_subcommand("ablate", "train the full model and every single-flag ablation");
  add_common(abl, true);
  auto* sweep = app.add_subcommand("sweep-frames", "evaluate a range of history frame counts");
  add_common(sweep, true);
  sweep->add_option("--frames", frames, "frame-count range a..b");
  auto* check = app.add_subcommand("check", "verification suites");
  check->add_option("--suite", suite, "oracle, grad, geometry or all")
      ->check(CLI::IsMember({"oracle", "grad", "geometry", "all"}));
  check->add_option("--seeds", seeds, "random instances per check")->check(CLI::PositiveNumber);
  check->add_option("--report", report_path, "JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }
  if (seed_opt->count()) g.seed = seed;
  set_num_threads(g.threads);

  try {
    if (*gen) {
      SceneSpec spec = spec_path.empty() ? default_scene_spec() : scene_spec_from_json(read_text(spec_path));
      if (g.seed) spec.seed = *g.seed;
      const Scene scene = gen_scene(spec);
      write_scene(out_dir, scene);
      std::printf("wrote %zu frames, grid %zux%zux%zu to %s\n", scene.frames.size(), scene.grid.spec.dims[0],
                  scene.grid.spec.dims[1], scene.grid.spec.dims[2], out_dir.c_str());
      return kOk;
    }
    if (*check) {
      VerifyOptions opts;
      opts.seeds = seeds;
      if (g.seed) opts.base_seed = *g.seed;
      std::vector<SuiteReport> parts;
      if (suite == "oracle" || suite == "all") parts.push_back(oracle_suite(opts));
      if (suite == "grad" || suite == "all") parts.push_back(grad_suite(opts));
      if (suite == "geometry" || suite == "all") parts.push_back(geometry_suite(opts));
      const SuiteReport rep = merge_reports(suite, parts);
      std::fputs(rep.to_text().c_str(), stdout);
      if (!report_path.empty()) write_text(report_path, rep.to_json());
      return rep.passed() ? kOk : kCheckFailed;
    }

    const PipelineConfig cfg = load_config(config_path, g);
    const Scene scene = read_scene(scene_dir);
    if (*run) {
      const ModelParams params = init_model(cfg, scene.feature_channels(), scene.grid.spec.num_classes);
      const PipelineResult r = run_pipeline(cfg, scene, params);
      print_metrics("run", r.report);
      std::printf("loss=%.6f time=%.3fs\n", r.loss.total, r.seconds);
      if (!volumes_dir.empty()) dump_volumes(r, volumes_dir);
      if (!affinity_dir.empty()) dump_affinity(r, affinity_dir);
      if (!report_path.empty()) write_text(report_path, run_json(r));
    } else if (*train) {
      const ModelParams params = init_model(cfg, scene.feature_channels(), scene.grid.spec.num_classes);
      const TrainResult r = train_desk(cfg, scene, params);
      print_metrics("initial", r.initial);
      print_metrics("final", r.final);
      std::printf("loss %.6f -> %.6f over %zu steps, alpha=%.5f\n", r.loss_curve.front(), r.loss_curve.back(),
                  cfg.training.steps, double(r.params.attention.alpha));
      write_text(report_path, train_json(r));
    } else if (*abl) {
      const auto rows = ablate(cfg, scene);
      for (const auto& row : rows) print_metrics(row.name.c_str(), row.report);
      write_text(report_path, ablation_json(rows));
    } else if (*sweep) {
      const auto [lo, hi] = parse_range(frames);
      const auto rows = sweep_frames(cfg, scene, lo, hi);
      for (const auto& row : rows) {
        const std::string label = "frames=" + std::to_string(row.frames);
        print_metrics(label.c_str(), row.report);
      }
      write_text(report_path, sweep_json(rows));
    }
    return kOk;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIoError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kCheckFailed;
  }
}
