// SPDX-License-Identifier: Apache-2.0
#include "htcl/voxel_aggregation.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "htcl/parallel.hpp"

#if defined(__SSE2__)
#include <immintrin.h>
#endif

namespace htcl {

void VoxelGridSpec::validate() const {
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw ValueError("voxel grid dims must be positive");
  if (!(voxel_size > 0)) throw ValueError("voxel size must be positive");
  if (num_classes < 1) throw ValueError("voxel grid needs at least one class");
}

Eigen::Vector3d VoxelGridSpec::center(std::size_t i, std::size_t j, std::size_t k) const {
  return origin + voxel_size * Eigen::Vector3d(double(i) + 0.5, double(j) + 0.5, double(k) + 0.5);
}

long VoxelGridSpec::locate(const Eigen::Vector3d& p) const {
  std::size_t idx[3];
  for (int a = 0; a < 3; ++a) {
    const double f = std::floor((p[a] - origin[a]) / voxel_size);
    if (!(f >= 0 && f < double(dims[a]))) return -1;
    idx[a] = static_cast<std::size_t>(f);
  }
  return static_cast<long>(flat(idx[0], idx[1], idx[2]));
}

VoxelGridSpec VoxelGridSpec::coarsened(std::size_t factor) const {
  if (factor == 0 || dims[0] % factor || dims[1] % factor || dims[2] % factor) {
    throw ShapeError("voxel grid dims are not divisible by " + std::to_string(factor));
  }
  VoxelGridSpec s = *this;
  for (auto& d : s.dims) d /= factor;
  s.voxel_size *= double(factor);
  return s;
}

static_assert(std::endian::native == std::endian::little, "voxel grid files assume a little-endian host");

namespace {

template <typename V>
void put(std::ofstream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::ifstream& is, const std::filesystem::path& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IoError("truncated voxel grid file " + path.string());
  return v;
}

}  // namespace

void write_voxel_grid(const std::filesystem::path& path, const VoxelGrid& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write voxel grid " + path.string());
  os.write("HTVG", 4);
  put<std::uint32_t>(os, 1);
  for (auto d : grid.spec.dims) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  put<float>(os, static_cast<float>(grid.spec.voxel_size));
  for (int a = 0; a < 3; ++a) put<float>(os, static_cast<float>(grid.spec.origin[a]));
  put<std::uint8_t>(os, grid.spec.num_classes);
  put<std::uint8_t>(os, grid.spec.ignore_label);
  os.write(reinterpret_cast<const char*>(grid.labels.data()), static_cast<std::streamsize>(grid.labels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

VoxelGrid read_voxel_grid(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open voxel grid " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "HTVG", 4) != 0) throw IoError("bad magic in " + path.string());
  if (get<std::uint32_t>(is, path) != 1) throw IoError("unsupported voxel grid version in " + path.string());
  VoxelGridSpec spec;
  for (auto& d : spec.dims) d = get<std::uint32_t>(is, path);
  spec.voxel_size = get<float>(is, path);
  for (int a = 0; a < 3; ++a) spec.origin[a] = get<float>(is, path);
  spec.num_classes = get<std::uint8_t>(is, path);
  spec.ignore_label = get<std::uint8_t>(is, path);
  spec.validate();
  VoxelGrid grid(spec);
  if (!is.read(reinterpret_cast<char*>(grid.labels.data()), static_cast<std::streamsize>(grid.labels.size()))) {
    throw IoError("truncated voxel labels in " + path.string());
  }
  return grid;
}

template <typename T>
Tensor<T> depth_distribution(const Tensor<T>& logits) {
  if (logits.ndim() != 3) throw ShapeError("depth_distribution: logits must be [D, h, w]");
  return softmax(logits, 0);
}

namespace {

// Current-frame 3D point of a temporal cell.
Eigen::Vector3d cell_point(const CameraFrame& cam, const DepthHypotheses& hyp, std::size_t feat_h, std::size_t feat_w,
                           std::size_t j, std::size_t v, std::size_t u) {
  const Eigen::Vector3d x = backproject(feature_pixel_center(cam, feat_h, feat_w, u, v), hyp[j], cam.K);
  return cam.R.transpose() * (x - cam.t);
}

}  // namespace

SplatPlan make_splat_plan(const CameraFrame& cam, const DepthHypotheses& hyp, std::size_t feat_h, std::size_t feat_w,
                          const VoxelGridSpec& spec) {
  spec.validate();
  SplatPlan plan;
  plan.spec = spec;
  plan.planes = hyp.count();
  plan.feat_h = feat_h;
  plan.feat_w = feat_w;
  const std::size_t cells = plan.planes * feat_h * feat_w;
  plan.voxel_of.assign(cells, -1);
  for (std::size_t j = 0; j < plan.planes; ++j)
    for (std::size_t v = 0; v < feat_h; ++v)
      for (std::size_t u = 0; u < feat_w; ++u) {
        plan.voxel_of[(j * feat_h + v) * feat_w + u] = spec.locate(cell_point(cam, hyp, feat_h, feat_w, j, v, u));
      }
  // Counting sort keeps cells ascending within each voxel.
  plan.row_start.assign(spec.count() + 1, 0);
  for (long vox : plan.voxel_of)
    if (vox >= 0) ++plan.row_start[static_cast<std::size_t>(vox) + 1];
  for (std::size_t i = 0; i < spec.count(); ++i) plan.row_start[i + 1] += plan.row_start[i];
  plan.cells.resize(plan.row_start.back());
  std::vector<std::size_t> fill(plan.row_start.begin(), plan.row_start.end() - 1);
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const long vox = plan.voxel_of[cell];
    if (vox >= 0) plan.cells[fill[static_cast<std::size_t>(vox)]++] = cell;
  }
  return plan;
}

namespace {

template <typename T>
Tensor<T> splat(const Tensor<T>& context, const Tensor<T>& dist, const SplatPlan& plan, bool mean) {
  if (context.ndim() != 3 || context.dim(1) != plan.feat_h || context.dim(2) != plan.feat_w) {
    throw ShapeError("lift_splat: context must be [C, h, w] matching the splat plan");
  }
  if (dist.shape() != Shape{plan.planes, plan.feat_h, plan.feat_w}) {
    throw ShapeError("lift_splat: depth distribution must be [D, h, w] matching the splat plan");
  }
  const std::size_t C = context.dim(0), pixels = plan.feat_h * plan.feat_w, voxels = plan.spec.count();
  Tensor<T> out({C, plan.spec.dims[0], plan.spec.dims[1], plan.spec.dims[2]});
  parallel_for(voxels, [&](std::size_t begin, std::size_t end) {
    for (std::size_t vox = begin; vox < end; ++vox) {
      const std::size_t b = plan.row_start[vox], e = plan.row_start[vox + 1];
      if (b == e) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const T* ctx = context.raw() + c * pixels;
        T acc = 0;
        for (std::size_t i = b; i < e; ++i) {
          const std::size_t cell = plan.cells[i];
          acc += ctx[cell % pixels] * dist[cell];
        }
        out[c * voxels + vox] = mean ? acc / T(e - b) : acc;
      }
    }
  });
  return out;
}

}  // namespace

template <typename T>
Tensor<T> splat_sum(const Tensor<T>& context, const Tensor<T>& depth_dist, const SplatPlan& plan) {
  return splat(context, depth_dist, plan, false);
}

template <typename T>
Tensor<T> lift_splat(const Tensor<T>& context, const Tensor<T>& depth_dist, const SplatPlan& plan) {
  return splat(context, depth_dist, plan, true);
}

template <typename T>
Tensor<T> lift_splat(const Tensor<T>& context, const Tensor<T>& depth_dist, const CameraFrame& cam,
                     const DepthHypotheses& hyp, const VoxelGridSpec& spec) {
  return lift_splat(context, depth_dist, make_splat_plan(cam, hyp, context.dim(1), context.dim(2), spec));
}

template <typename T>
AttentionParams<T> make_attention_params(std::size_t vox_ch, std::size_t rel_ch, std::size_t dim, std::size_t heads,
                                         std::size_t pos_ch) {
  if (heads == 0 || dim % heads != 0) throw ShapeError("attention dim must be divisible by the head count");
  AttentionParams<T> ap;
  ap.q_w = Tensor<T>::zeros({dim, vox_ch + pos_ch});
  ap.q_b = Tensor<T>::zeros({dim});
  ap.k_w = Tensor<T>::zeros({dim, rel_ch + pos_ch});
  ap.k_b = Tensor<T>::zeros({dim});
  ap.v_w = Tensor<T>::zeros({dim, rel_ch});
  ap.v_b = Tensor<T>::zeros({dim});
  ap.out_w = Tensor<T>::zeros({vox_ch, dim});
  ap.out_b = Tensor<T>::zeros({vox_ch});
  ap.heads = heads;
  return ap;
}

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using RowMapMut = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Channel-major tensor [C, ...] as a C x tokens matrix.
template <typename T>
RowMap<T> as_matrix(const Tensor<T>& t) {
  return RowMap<T>(t.raw(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.stride(0)));
}

template <typename T>
Mat<T> stack_inputs(const Tensor<T>& feat, const Tensor<T>& pos) {
  const auto f = as_matrix(feat);
  if (pos.empty()) return f;
  const auto p = as_matrix(pos);
  if (p.cols() != f.cols()) throw ShapeError("positional encoding does not match token count");
  Mat<T> m(f.rows() + p.rows(), f.cols());
  m.topRows(f.rows()) = f;
  m.bottomRows(p.rows()) = p;
  return m;
}

template <typename T>
void write_matrix(Tensor<T>& t, const Mat<T>& m) {
  RowMapMut<T>(t.raw(), m.rows(), m.cols()) = m;
}

template <typename T>
Tensor<T> tensor_of(const Mat<T>& m) {
  Tensor<T> t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  write_matrix(t, m);
  return t;
}

template <typename T>
Tensor<T> vector_tensor(const Vec<T>& v) {
  Tensor<T> t({static_cast<std::size_t>(v.size())});
  for (Eigen::Index i = 0; i < v.size(); ++i) t[static_cast<std::size_t>(i)] = v[i];
  return t;
}

template <typename T>
Eigen::Map<const Vec<T>> vec_of(const Tensor<T>& t) {
  return Eigen::Map<const Vec<T>>(t.raw(), static_cast<Eigen::Index>(t.size()));
}

// Saturated softmax rows are full of subnormals; flushing them keeps the GEMMs
// at full speed. Restores the previous mode on exit.
class FlushDenormals {
 public:
#if defined(__SSE2__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

template <typename T>
void check_attention_shapes(const Tensor<T>& vox, const Tensor<T>& rel, const AttentionParams<T>& ap,
                            const PositionalEncoding<T>& pe) {
  if (vox.ndim() != 4 || rel.ndim() != 4) throw ShapeError("attention: inputs must be 4-d volumes");
  const std::size_t P = pe.channels();
  if (!pe.query.empty() && (pe.key.empty() || pe.key.dim(0) != P)) {
    throw ShapeError("attention: query and key encodings must have the same channel count");
  }
  const std::size_t dim = ap.dim();
  if (ap.heads == 0 || dim % ap.heads != 0) throw ShapeError("attention: dim not divisible by heads");
  if (ap.q_w.shape() != Shape{dim, vox.dim(0) + P} || ap.k_w.shape() != Shape{dim, rel.dim(0) + P} ||
      ap.v_w.shape() != Shape{dim, rel.dim(0)} || ap.out_w.shape() != Shape{vox.dim(0), dim} ||
      ap.q_b.size() != dim || ap.k_b.size() != dim || ap.v_b.size() != dim || ap.out_b.size() != vox.dim(0)) {
    throw ShapeError("attention: projection shapes do not match inputs");
  }
}

}  // namespace

template <typename T>
Tensor<T> weighted_cross_attention(const Tensor<T>& vox, const Tensor<T>& rel, const AttentionParams<T>& ap,
                                   const PositionalEncoding<T>& pe, const AttentionLimits& limits,
                                   AttentionCache<T>* cache) {
  if (limits.local_window) throw NotImplementedError("attention: local-window mode is not implemented");
  check_attention_shapes(vox, rel, ap, pe);
  const std::size_t nq = vox.stride(0), nk = rel.stride(0);
  if (nq > limits.max_queries || nk > limits.max_keys) {
    throw ValueError("attention: " + std::to_string(nq) + " queries x " + std::to_string(nk) +
                     " keys exceeds the global-attention element cap (" + std::to_string(limits.max_queries) + " x " +
                     std::to_string(limits.max_keys) + "); reduce the grid or use local-window mode");
  }
  AttentionCache<T> local;
  AttentionCache<T>& c = cache ? *cache : local;
  {
    const FlushDenormals ftz;
    c.xq = stack_inputs(vox, pe.query);
    c.xk = stack_inputs(rel, pe.key);
    c.xv = as_matrix(rel);
    const RowMap<T> wq(ap.q_w.raw(), ap.q_w.dim(0), ap.q_w.dim(1));
    const RowMap<T> wk(ap.k_w.raw(), ap.k_w.dim(0), ap.k_w.dim(1));
    const RowMap<T> wv(ap.v_w.raw(), ap.v_w.dim(0), ap.v_w.dim(1));
    const RowMap<T> wo(ap.out_w.raw(), ap.out_w.dim(0), ap.out_w.dim(1));
    c.q = (wq * c.xq).colwise() + vec_of(ap.q_b);
    c.k = (wk * c.xk).colwise() + vec_of(ap.k_b);
    c.v = (wv * c.xv).colwise() + vec_of(ap.v_b);

    const Eigen::Index dh = static_cast<Eigen::Index>(ap.dim() / ap.heads);
    const T scale = T(1) / std::sqrt(T(dh));
    c.probs.assign(ap.heads, Mat<T>());
    c.context.resize(c.q.rows(), c.q.cols());
    for (std::size_t h = 0; h < ap.heads; ++h) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(h) * dh;
      Mat<T>& p = c.probs[h];  // keys x queries
      p.noalias() = (c.k.middleRows(r0, dh).transpose() * c.q.middleRows(r0, dh)) * scale;
      for (Eigen::Index col = 0; col < p.cols(); ++col) {
        auto s = p.col(col);
        const T m = s.maxCoeff();
        s = (s.array() - m).exp().matrix();
        s /= s.sum();
      }
      c.context.middleRows(r0, dh).noalias() = c.v.middleRows(r0, dh) * p;
    }
    const Mat<T> cross = (wo * c.context).colwise() + vec_of(ap.out_b);
    c.cross = Tensor<T>(vox.shape());
    write_matrix(c.cross, cross);
  }

  // Outside the flush so subnormal voxel features pass through unchanged.
  Tensor<T> out(vox.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap.alpha * c.cross[i] + vox[i];
  return out;
}

template <typename T>
AttentionGrads<T> attention_backward(const Tensor<T>& grad_ret, const Tensor<T>& vox, const Tensor<T>& rel,
                                     const AttentionParams<T>& ap, const AttentionCache<T>& cache) {
  if (grad_ret.shape() != vox.shape()) throw ShapeError("attention_backward: upstream shape mismatch");
  const FlushDenormals ftz;
  const auto g = as_matrix(grad_ret);
  const RowMap<T> wq(ap.q_w.raw(), ap.q_w.dim(0), ap.q_w.dim(1));
  const RowMap<T> wk(ap.k_w.raw(), ap.k_w.dim(0), ap.k_w.dim(1));
  const RowMap<T> wv(ap.v_w.raw(), ap.v_w.dim(0), ap.v_w.dim(1));
  const RowMap<T> wo(ap.out_w.raw(), ap.out_w.dim(0), ap.out_w.dim(1));

  AttentionGrads<T> out;
  T galpha = 0;
  for (std::size_t i = 0; i < grad_ret.size(); ++i) galpha += grad_ret[i] * cache.cross[i];
  out.alpha = galpha;

  const Mat<T> d_cross = g * ap.alpha;
  out.out_w = tensor_of<T>(Mat<T>(d_cross * cache.context.transpose()));
  out.out_b = vector_tensor<T>(Vec<T>(d_cross.rowwise().sum()));
  const Mat<T> d_ctx = wo.transpose() * d_cross;

  const Eigen::Index dh = static_cast<Eigen::Index>(ap.dim() / ap.heads);
  const T scale = T(1) / std::sqrt(T(dh));
  Mat<T> dq(cache.q.rows(), cache.q.cols()), dk(cache.k.rows(), cache.k.cols()), dv(cache.v.rows(), cache.v.cols());
  for (std::size_t h = 0; h < ap.heads; ++h) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(h) * dh;
    const Mat<T>& p = cache.probs[h];
    const auto dctx_h = d_ctx.middleRows(r0, dh);
    dv.middleRows(r0, dh).noalias() = dctx_h * p.transpose();
    Mat<T> ds = cache.v.middleRows(r0, dh).transpose() * dctx_h;  // d probs, keys x queries
    for (Eigen::Index col = 0; col < ds.cols(); ++col) {
      const T inner = ds.col(col).dot(p.col(col));
      ds.col(col) = (p.col(col).array() * (ds.col(col).array() - inner)).matrix();
    }
    dq.middleRows(r0, dh).noalias() = (cache.k.middleRows(r0, dh) * ds) * scale;
    dk.middleRows(r0, dh).noalias() = (cache.q.middleRows(r0, dh) * ds.transpose()) * scale;
  }
  out.q_w = tensor_of<T>(Mat<T>(dq * cache.xq.transpose()));
  out.q_b = vector_tensor<T>(Vec<T>(dq.rowwise().sum()));
  out.k_w = tensor_of<T>(Mat<T>(dk * cache.xk.transpose()));
  out.k_b = vector_tensor<T>(Vec<T>(dk.rowwise().sum()));
  out.v_w = tensor_of<T>(Mat<T>(dv * cache.xv.transpose()));
  out.v_b = vector_tensor<T>(Vec<T>(dv.rowwise().sum()));

  const Mat<T> dxq = wq.transpose() * dq;
  const Mat<T> dxk = wk.transpose() * dk;
  const Mat<T> dxv = wv.transpose() * dv;
  const Eigen::Index cv = static_cast<Eigen::Index>(vox.dim(0));
  const Eigen::Index cr = static_cast<Eigen::Index>(rel.dim(0));
  out.vox = Tensor<T>(vox.shape());
  write_matrix<T>(out.vox, Mat<T>(g + dxq.topRows(cv)));
  out.rel = Tensor<T>(rel.shape());
  write_matrix<T>(out.rel, Mat<T>(dxk.topRows(cr) + dxv));
  return out;
}

namespace {

struct Normalizer {
  Eigen::Vector3d center, half;
  explicit Normalizer(const VoxelGridSpec& s) {
    const Eigen::Vector3d extent(double(s.dims[0]) * s.voxel_size, double(s.dims[1]) * s.voxel_size,
                                 double(s.dims[2]) * s.voxel_size);
    center = s.origin + extent / 2;
    half = Eigen::Vector3d::Constant(extent.maxCoeff() / 2);
  }
  Eigen::Vector3d operator()(const Eigen::Vector3d& p) const { return (p - center).cwiseQuotient(half); }
};

}  // namespace

template <typename T>
Tensor<T> voxel_positions(const VoxelGridSpec& spec) {
  const Normalizer norm(spec);
  const std::size_t n = spec.count();
  Tensor<T> out({4, spec.dims[0], spec.dims[1], spec.dims[2]});
  for (std::size_t i = 0; i < spec.dims[0]; ++i)
    for (std::size_t j = 0; j < spec.dims[1]; ++j)
      for (std::size_t k = 0; k < spec.dims[2]; ++k) {
        const Eigen::Vector3d p = norm(spec.center(i, j, k));
        const std::size_t f = spec.flat(i, j, k);
        for (int a = 0; a < 3; ++a) out[a * n + f] = T(p[a]);
        out[3 * n + f] = T(p.squaredNorm());
      }
  return out;
}

template <typename T>
Tensor<T> temporal_positions(const CameraFrame& cam, const DepthHypotheses& hyp, std::size_t feat_h,
                             std::size_t feat_w, const VoxelGridSpec& spec) {
  const Normalizer norm(spec);
  const std::size_t D = hyp.count(), n = D * feat_h * feat_w;
  Tensor<T> out({4, D, feat_h, feat_w});
  for (std::size_t j = 0; j < D; ++j)
    for (std::size_t v = 0; v < feat_h; ++v)
      for (std::size_t u = 0; u < feat_w; ++u) {
        const Eigen::Vector3d p = norm(cell_point(cam, hyp, feat_h, feat_w, j, v, u));
        const std::size_t f = (j * feat_h + v) * feat_w + u;
        for (int a = 0; a < 3; ++a) out[a * n + f] = T(p[a]);
        out[3 * n + f] = T(p.squaredNorm());
      }
  return out;
}

template <typename T>
Tensor<T> voxel_to_temporal_coords(const CameraFrame& cam, const DepthHypotheses& hyp, std::size_t feat_h,
                                   std::size_t feat_w, const VoxelGridSpec& spec) {
  Tensor<T> out({spec.dims[0], spec.dims[1], spec.dims[2], 3}, T(-1));
  const double sx = double(cam.width) / double(feat_w), sy = double(cam.height) / double(feat_h);
  for (std::size_t i = 0; i < spec.dims[0]; ++i)
    for (std::size_t j = 0; j < spec.dims[1]; ++j)
      for (std::size_t k = 0; k < spec.dims[2]; ++k) {
        const Eigen::Vector3d x = cam.R * spec.center(i, j, k) + cam.t;
        if (!(x.z() > 1e-6)) continue;
        const Eigen::Vector3d px = project(x, cam.K);
        const std::size_t f = spec.flat(i, j, k);
        out[3 * f] = T(hyp.continuous_index(x.z()));
        out[3 * f + 1] = T(px.y() / sy - 0.5);
        out[3 * f + 2] = T(px.x() / sx - 0.5);
      }
  return out;
}

template <typename T>
SscHeadOutput<T> ssc_head(const Tensor<T>& ret, const Conv3dParams<T>& head, std::size_t upsample_factor) {
  if (upsample_factor == 0) throw ShapeError("ssc_head: upsample factor must be >= 1");
  if (head.kernel() != 1) throw ShapeError("ssc_head: head must be a 1x1x1 projection");
  SscHeadOutput<T> out;
  out.upsampled = upsample_trilinear(ret, upsample_factor);
  out.logits = conv3d(out.upsampled, head);
  out.probs = softmax(out.logits, 0);
  return out;
}

template <typename T>
VoxelGrid argmax_labels(const Tensor<T>& probs, const VoxelGridSpec& spec) {
  if (probs.ndim() != 4 || probs.dim(1) != spec.dims[0] || probs.dim(2) != spec.dims[1] ||
      probs.dim(3) != spec.dims[2]) {
    throw ShapeError("argmax_labels: probabilities do not match the grid spec");
  }
  const std::size_t K = probs.dim(0), n = spec.count();
  VoxelGrid grid(spec);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < K; ++c)
      if (probs[c * n + i] > probs[best * n + i]) best = c;
    grid.labels[i] = static_cast<std::uint8_t>(best);
  }
  return grid;
}

#define HTCL_INSTANTIATE_VA(T)                                                                                      \
  template Tensor<T> depth_distribution(const Tensor<T>&);                                                          \
  template Tensor<T> splat_sum(const Tensor<T>&, const Tensor<T>&, const SplatPlan&);                               \
  template Tensor<T> lift_splat(const Tensor<T>&, const Tensor<T>&, const SplatPlan&);                              \
  template Tensor<T> lift_splat(const Tensor<T>&, const Tensor<T>&, const CameraFrame&, const DepthHypotheses&,     \
                                const VoxelGridSpec&);                                                              \
  template AttentionParams<T> make_attention_params(std::size_t, std::size_t, std::size_t, std::size_t,             \
                                                    std::size_t);                                                   \
  template Tensor<T> weighted_cross_attention(const Tensor<T>&, const Tensor<T>&, const AttentionParams<T>&,        \
                                              const PositionalEncoding<T>&, const AttentionLimits&,                 \
                                              AttentionCache<T>*);                                                  \
  template AttentionGrads<T> attention_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                                const AttentionParams<T>&, const AttentionCache<T>&);               \
  template Tensor<T> voxel_positions(const VoxelGridSpec&);                                                         \
  template Tensor<T> temporal_positions(const CameraFrame&, const DepthHypotheses&, std::size_t, std::size_t,       \
                                        const VoxelGridSpec&);                                                      \
  template Tensor<T> voxel_to_temporal_coords(const CameraFrame&, const DepthHypotheses&, std::size_t, std::size_t, \
                                              const VoxelGridSpec&);                                                \
  template SscHeadOutput<T> ssc_head(const Tensor<T>&, const Conv3dParams<T>&, std::size_t);                        \
  template VoxelGrid argmax_labels(const Tensor<T>&, const VoxelGridSpec&);

HTCL_INSTANTIATE_VA(float)
HTCL_INSTANTIATE_VA(double)

}  // namespace htcl
