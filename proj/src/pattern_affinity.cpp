// SPDX-License-Identifier: Apache-2.0
#include "htcl/pattern_affinity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "htcl/parallel.hpp"

namespace htcl {

template <typename T>
MultiGroupParams<T> make_multi_group_params(std::size_t in_ch, std::size_t group_ch, std::size_t kernel,
                                            const std::vector<std::size_t>& dilations, std::size_t norm_groups) {
  MultiGroupParams<T> p;
  p.norm_groups = norm_groups;
  for (std::size_t d : dilations) {
    p.branches.push_back({Conv3dParams<T>::same(group_ch, in_ch, kernel, d), Tensor<T>::ones({group_ch}),
                          Tensor<T>::zeros({group_ch})});
  }
  return p;
}

template <typename T>
MultiGroupContext<T> multi_group_context(const Tensor<T>& volume, const MultiGroupParams<T>& params) {
  if (params.branches.empty()) throw ShapeError("multi_group_context: no branches");
  MultiGroupContext<T> ctx;
  for (const auto& b : params.branches) {
    b.atrous.require_same_padding();
    Tensor<T> h = conv3d(volume, b.atrous);
    h = gelu(h);
    h = group_norm(h, params.norm_groups, b.gamma, b.beta, params.norm_eps);
    ctx.groups.push_back(std::move(h));
    ctx.dilations.push_back(b.atrous.dilation);
  }
  return ctx;
}

namespace {

template <typename T>
void require_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape() || a.ndim() != 4) {
    throw ShapeError(std::string(what) + ": expected matching [C, D, h, w], got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
}

// Correlation over axis 0, optionally centering each channel vector.
template <typename T>
Tensor<T> channel_similarity(const Tensor<T>& a, const Tensor<T>& b, bool center) {
  const std::size_t C = a.dim(0);
  const std::size_t n = a.stride(0);
  Tensor<T> out({a.dim(1), a.dim(2), a.dim(3)});
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    const std::size_t len = end - begin;
    std::vector<double> ma(len, 0.0), mb(len, 0.0), dot(len, 0.0), sa(len, 0.0), sb(len, 0.0);
    if (center) {
      for (std::size_t c = 0; c < C; ++c) {
        const T* pa = a.raw() + c * n + begin;
        const T* pb = b.raw() + c * n + begin;
        for (std::size_t i = 0; i < len; ++i) {
          ma[i] += pa[i];
          mb[i] += pb[i];
        }
      }
      for (std::size_t i = 0; i < len; ++i) {
        ma[i] /= double(C);
        mb[i] /= double(C);
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      const T* pa = a.raw() + c * n + begin;
      const T* pb = b.raw() + c * n + begin;
      for (std::size_t i = 0; i < len; ++i) {
        const double x = double(pa[i]) - ma[i];
        const double y = double(pb[i]) - mb[i];
        dot[i] += x * y;
        sa[i] += x * x;
        sb[i] += y * y;
      }
    }
    for (std::size_t i = 0; i < len; ++i) {
      if (sa[i] / double(C) <= kAffinityEps || sb[i] / double(C) <= kAffinityEps) {
        out[begin + i] = T(0);
        continue;
      }
      const double r = dot[i] / (std::sqrt(sa[i]) * std::sqrt(sb[i]));
      out[begin + i] = T(std::clamp(r, -1.0, 1.0));
    }
  });
  return out;
}

}  // namespace

template <typename T>
Tensor<T> group_affinity(const Tensor<T>& ci, const Tensor<T>& hi) {
  require_pair(ci, hi, "group_affinity");
  if (ci.dim(0) < 2) throw ShapeError("group_affinity: needs at least 2 channels");
  return channel_similarity(ci, hi, true);
}

template <typename T>
Tensor<T> cosine_baseline(const Tensor<T>& a, const Tensor<T>& b) {
  require_pair(a, b, "cosine_baseline");
  return channel_similarity(a, b, false);
}

template <typename T>
AffinityVolume<T> cross_frame_affinity(const MultiGroupContext<T>& cur, const MultiGroupContext<T>& his,
                                       bool scale_aware_isolation) {
  if (cur.groups.size() != his.groups.size() || cur.groups.empty()) {
    throw ShapeError("cross_frame_affinity: group count mismatch (" + std::to_string(cur.groups.size()) + " vs " +
                     std::to_string(his.groups.size()) + ")");
  }
  std::vector<Tensor<T>> maps;
  for (std::size_t g = 0; g < cur.groups.size(); ++g) {
    Tensor<T> m = scale_aware_isolation ? group_affinity(cur.groups[g], his.groups[g])
                                        : cosine_baseline(cur.groups[g], his.groups[g]);
    const Shape s = m.shape();
    maps.push_back(m.reshaped({1, s[0], s[1], s[2]}));
  }
  return {concat(maps, 0)};
}

template <typename T>
Tensor<T> affinity_reduce(const AffinityVolume<T>& av, AffinityReduce mode) {
  const Tensor<T>& d = av.data;
  if (d.ndim() != 4) throw ShapeError("affinity_reduce: expected [G, D, h, w]");
  const std::size_t G = d.dim(0), n = d.stride(0);
  Tensor<T> out({d.dim(1), d.dim(2), d.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    T acc = d[i];
    for (std::size_t g = 1; g < G; ++g) {
      acc = mode == AffinityReduce::mean ? acc + d[g * n + i] : std::max(acc, d[g * n + i]);
    }
    out[i] = mode == AffinityReduce::mean ? acc / T(G) : acc;
  }
  return out;
}

std::uint8_t heatmap_level(double value) {
  const double v = std::clamp(value, -1.0, 1.0);
  return static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
}

template <typename T>
void export_heatmap(const Tensor<T>& slice, const std::filesystem::path& path) {
  if (slice.ndim() != 2) throw ShapeError("export_heatmap: slice must be [h, w]");
  std::vector<std::uint8_t> pixels(slice.size());
  for (std::size_t i = 0; i < slice.size(); ++i) {
    if (!std::isfinite(double(slice[i]))) throw ValueError("export_heatmap: non-finite value");
    pixels[i] = heatmap_level(double(slice[i]));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write heatmap " + path.string());
  os << "P5\n" << slice.dim(1) << ' ' << slice.dim(0) << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

Tensor<std::uint8_t> read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || w == 0 || h == 0 || maxval != 255) throw IoError("unsupported PGM header in " + path.string());
  is.get();
  Tensor<std::uint8_t> img({h, w});
  if (!is.read(reinterpret_cast<char*>(img.raw()), static_cast<std::streamsize>(img.size()))) {
    throw IoError("truncated PGM " + path.string());
  }
  return img;
}

#define HTCL_INSTANTIATE_PA(T)                                                                                 \
  template MultiGroupParams<T> make_multi_group_params(std::size_t, std::size_t, std::size_t,                  \
                                                       const std::vector<std::size_t>&, std::size_t);          \
  template MultiGroupContext<T> multi_group_context(const Tensor<T>&, const MultiGroupParams<T>&);             \
  template Tensor<T> group_affinity(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> cosine_baseline(const Tensor<T>&, const Tensor<T>&);                                      \
  template AffinityVolume<T> cross_frame_affinity(const MultiGroupContext<T>&, const MultiGroupContext<T>&,    \
                                                  bool);                                                       \
  template Tensor<T> affinity_reduce(const AffinityVolume<T>&, AffinityReduce);                                \
  template void export_heatmap(const Tensor<T>&, const std::filesystem::path&);

HTCL_INSTANTIATE_PA(float)
HTCL_INSTANTIATE_PA(double)

}  // namespace htcl
