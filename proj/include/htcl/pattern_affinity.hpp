// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <vector>

#include "htcl/ops.hpp"
#include "htcl/tensor.hpp"

namespace htcl {

/// One context learner: atrous conv -> GELU -> group norm.
template <typename T>
struct ContextBranch {
  Conv3dParams<T> atrous;
  Tensor<T> gamma;  // [C_g]
  Tensor<T> beta;   // [C_g]
};

template <typename T>
struct MultiGroupParams {
  std::vector<ContextBranch<T>> branches;  // one per dilation scale
  std::size_t norm_groups = 2;
  T norm_eps = T(1e-5);
};

/// Context volumes [C_g, D, h, w], one per dilation scale.
template <typename T>
struct MultiGroupContext {
  std::vector<Tensor<T>> groups;
  std::vector<std::size_t> dilations;
};

/// Per-group affinity maps [G, D, h, w] with entries in [-1, 1].
template <typename T>
struct AffinityVolume {
  Tensor<T> data;
  std::size_t num_groups() const { return data.dim(0); }
};

/// Random-free default branches: zero weights, unit gamma, zero beta.
template <typename T>
MultiGroupParams<T> make_multi_group_params(std::size_t in_ch, std::size_t group_ch, std::size_t kernel,
                                            const std::vector<std::size_t>& dilations, std::size_t norm_groups);

/// GN(GELU(Atrous_i(V))) for every branch, in exactly that order.
template <typename T>
MultiGroupContext<T> multi_group_context(const Tensor<T>& volume, const MultiGroupParams<T>& params);

inline constexpr double kAffinityEps = 1e-8;

/// Channel-centered (Pearson) correlation between C_i and H_i at every
/// location of [C_g, D, h, w]. Locations where either centered vector has
/// per-channel variance <= 1e-8 get 0.
template <typename T>
Tensor<T> group_affinity(const Tensor<T>& ci, const Tensor<T>& hi);

/// Uncentered cosine similarity over the channel axis, 0 where either
/// vector has mean square <= 1e-8.
template <typename T>
Tensor<T> cosine_baseline(const Tensor<T>& a, const Tensor<T>& b);

/// Per-scale affinity stacked on axis 0. With `scale_aware_isolation` off,
/// the plain cosine replaces the centered correlation.
template <typename T>
AffinityVolume<T> cross_frame_affinity(const MultiGroupContext<T>& cur, const MultiGroupContext<T>& his,
                                       bool scale_aware_isolation = true);

enum class AffinityReduce { mean, max };

/// Collapses the group axis: [G, D, h, w] -> [D, h, w].
template <typename T>
Tensor<T> affinity_reduce(const AffinityVolume<T>& av, AffinityReduce mode = AffinityReduce::mean);

/// Writes an [h, w] slice as 8-bit binary PGM, mapping [-1, 1] to [0, 255].
template <typename T>
void export_heatmap(const Tensor<T>& slice, const std::filesystem::path& path);

/// Gray level used by export_heatmap for one value.
std::uint8_t heatmap_level(double value);

/// Reads a binary (P5) PGM written by export_heatmap; returns [h, w] gray levels.
Tensor<std::uint8_t> read_pgm(const std::filesystem::path& path);

}  // namespace htcl
