// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace htcl {

/// Worker count used by parallel_for. Defaults to 1.
void set_num_threads(int n);
int num_threads();

/// Splits [0, n) into contiguous chunks, one per worker, and calls
/// fn(begin, end) on each. Every index is processed exactly once and each
/// output element must be written by a single index, so results do not
/// depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace htcl
