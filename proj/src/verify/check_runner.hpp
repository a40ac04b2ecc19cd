// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <functional>
#include <string>

#include "htcl/gradcheck.hpp"
#include "htcl/verify.hpp"

namespace htcl::verify_detail {

/// Result of one random instance.
struct Outcome {
  double error = 0;
  std::string location;
  bool ok = true;  // extra pass/fail condition besides error <= tolerance
};

std::string index_str(const Shape& shape, std::size_t flat);

/// Max |got - want| / max |want|, with the offending index.
Outcome compare(const TensorD& got, const TensorD& want, const std::string& what = "");

void keep_worst(Outcome& acc, const Outcome& o);

CheckResult run_check(const std::string& module, const std::string& name, double tol, std::size_t seeds,
                      std::uint64_t base_seed, const std::function<Outcome(std::uint64_t)>& fn);

/// Relative gradient error of one input, labelled with its name.
/// The floor keeps exactly-zero gradients (key biases under a shift-invariant
/// softmax) from comparing finite-difference noise to itself.
inline Outcome grad_outcome(const TensorD& analytic, const TensorD& numeric, const std::string& what,
                            double floor = 1e-6) {
  Outcome o{grad_rel_error(analytic, numeric, floor), what};
  if (analytic.shape() != numeric.shape()) o = {INFINITY, what + " shape mismatch"};
  return o;
}

/// sum(g * y) for a fixed probe g.
inline double dot(const TensorD& g, const TensorD& y) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += g[i] * y[i];
  return s;
}

}  // namespace htcl::verify_detail
