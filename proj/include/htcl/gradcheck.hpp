// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>

#include "htcl/tensor.hpp"

namespace htcl {

using ScalarFn = std::function<double(const TensorD&)>;

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), per element.
inline TensorD finite_diff_grad(const ScalarFn& f, const TensorD& x, double eps = 1e-6) {
  TensorD grad = TensorD::zeros_like(x);
  TensorD probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2 * eps);
  }
  return grad;
}

/// ||a - b|| / max(||a||, ||b||, floor) in the Euclidean norm.
inline double grad_rel_error(const TensorD& analytic, const TensorD& numeric, double floor = 1e-10) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = analytic[i] - numeric[i];
    diff += d * d;
    na += analytic[i] * analytic[i];
    nb += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace htcl
