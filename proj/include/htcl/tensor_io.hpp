// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "htcl/tensor.hpp"

namespace htcl {

// Binary tensor file: "HTCV", u32 version = 1, u8 dtype (0 = f32, 1 = f64),
// u8 ndim, ndim x u64 dims, then the little-endian row-major payload.

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t);

/// Reads a tensor file, converting the payload to T if the stored dtype differs.
template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path);

/// Stored dtype of a tensor file without reading its payload.
DType peek_tensor_dtype(const std::filesystem::path& path);

}  // namespace htcl
