// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <sstream>

#include "htcl/verify.hpp"
#include "verify/check_runner.hpp"

namespace htcl {

std::string CheckResult::line() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, " cases=%zu max_err=%.3e tol=%.1e (%.2fs)", cases, max_error, tolerance, seconds);
  std::string s = std::string(passed() ? "PASS " : "FAIL ") + module + "/" + name + buf;
  if (!passed()) {
    s += " failures=" + std::to_string(failures) + " seed=" + std::to_string(worst_seed);
    if (!location.empty()) s += " at " + location;
  }
  return s;
}

bool SuiteReport::passed() const {
  if (checks.empty()) return false;
  for (const auto& c : checks)
    if (!c.passed()) return false;
  return true;
}

const CheckResult* SuiteReport::find(const std::string& module, const std::string& name) const {
  for (const auto& c : checks)
    if (c.module == module && c.name == name) return &c;
  return nullptr;
}

std::string SuiteReport::to_text() const {
  std::ostringstream os;
  std::size_t failed = 0;
  for (const auto& c : checks) {
    os << c.line() << '\n';
    if (!c.passed()) ++failed;
  }
  char buf[120];
  std::snprintf(buf, sizeof buf, "%s: %zu checks, %zu failed, %.2fs\n", suite.c_str(), checks.size(), failed, seconds);
  os << buf;
  return os.str();
}

std::string SuiteReport::to_json() const {
  nlohmann::json j;
  j["suite"] = suite;
  j["passed"] = passed();
  j["seconds"] = seconds;
  j["checks"] = nlohmann::json::array();
  for (const auto& c : checks) {
    j["checks"].push_back({{"module", c.module},
                           {"name", c.name},
                           {"passed", c.passed()},
                           {"cases", c.cases},
                           {"failures", c.failures},
                           {"tolerance", c.tolerance},
                           {"max_error", std::isfinite(c.max_error) ? nlohmann::json(c.max_error) : nlohmann::json()},
                           {"worst_seed", c.worst_seed},
                           {"location", c.location},
                           {"seconds", c.seconds}});
  }
  return j.dump(2);
}

SuiteReport merge_reports(const std::string& name, const std::vector<SuiteReport>& parts) {
  SuiteReport r;
  r.suite = name;
  for (const auto& p : parts) {
    r.checks.insert(r.checks.end(), p.checks.begin(), p.checks.end());
    r.seconds += p.seconds;
  }
  return r;
}

namespace verify_detail {

std::string index_str(const Shape& shape, std::size_t flat) {
  std::vector<std::size_t> idx(shape.size());
  for (std::size_t a = shape.size(); a-- > 0;) {
    idx[a] = flat % shape[a];
    flat /= shape[a];
  }
  return shape_str(idx);
}

Outcome compare(const TensorD& got, const TensorD& want, const std::string& what) {
  if (got.shape() != want.shape()) {
    return {INFINITY, what + " shape " + shape_str(got.shape()) + " vs " + shape_str(want.shape())};
  }
  double scale = 1e-12;
  for (double v : want.data()) scale = std::max(scale, std::abs(v));
  Outcome o;
  std::size_t worst = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double e = std::abs(got[i] - want[i]) / scale;
    if (!(e <= o.error)) {
      o.error = std::isnan(e) ? INFINITY : e;
      worst = i;
      if (std::isnan(e)) break;
    }
  }
  o.location = what + index_str(got.shape(), worst);
  return o;
}

void keep_worst(Outcome& acc, const Outcome& o) {
  if (!(o.error <= acc.error)) acc = o;
}

CheckResult run_check(const std::string& module, const std::string& name, double tol, std::size_t seeds,
                      std::uint64_t base_seed, const std::function<Outcome(std::uint64_t)>& fn) {
  CheckResult r;
  r.module = module;
  r.name = name;
  r.tolerance = tol;
  const auto t0 = std::chrono::steady_clock::now();
  bool have_worst = false;
  for (std::size_t i = 0; i < seeds; ++i) {
    const std::uint64_t seed = base_seed + i;
    Outcome o;
    try {
      o = fn(seed);
    } catch (const std::exception& e) {
      o = {INFINITY, std::string("exception: ") + e.what()};
    }
    ++r.cases;
    const bool bad = !(o.error <= tol) || !o.ok;
    if (bad) ++r.failures;
    // The first failing seed wins the report; otherwise the largest error.
    const bool worse = !have_worst || (bad && r.failures == 1) || (r.failures == 0 && o.error > r.max_error);
    if (worse) {
      r.worst_seed = seed;
      r.location = o.location;
      have_worst = true;
    }
    if (!(o.error <= r.max_error)) r.max_error = o.error;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace verify_detail

}  // namespace htcl
