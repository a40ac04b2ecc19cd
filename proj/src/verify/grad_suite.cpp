// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cmath>

#include "htcl/losses_metrics.hpp"
#include "htcl/verify.hpp"
#include "verify/check_runner.hpp"

namespace htcl {

using verify_detail::dot;
using verify_detail::grad_outcome;
using verify_detail::keep_worst;
using verify_detail::Outcome;
using verify_detail::run_check;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kEps = 1e-6;

// Continuous coordinate whose fractional part stays in [0.15, 0.85], so no
// finite-difference probe crosses a lattice plane or the zero border.
double off_lattice(RandomSource& r, long lo, long hi) { return double(long(r.integer(0, hi - lo)) + lo) + r.uniform(0.15, 0.85); }

// Gradient of f w.r.t. *slot, probing a copy of the surrounding state.
template <typename F>
TensorD numeric(TensorD* slot, F f) {
  const TensorD saved = *slot;
  const TensorD g = finite_diff_grad(
      [&](const TensorD& x) {
        *slot = x;
        return f();
      },
      saved, kEps);
  *slot = saved;
  return g;
}

CheckResult deformable_grad(const VerifyOptions& o) {
  return run_check("dynamic_refinement", "deformable_sample_backward", kGradTol, o.seeds, o.base_seed,
                   [](std::uint64_t s) {
                     RandomSource r(s);
                     const std::size_t C = r.integer(1, 2), kernel = r.integer(0, 2) ? 3 : 1;
                     TensorD vol = r.tensor({C, r.integer(2, 3), 2, r.integer(2, 3)});
                     const std::size_t D = vol.dim(1), H = vol.dim(2), W = vol.dim(3);
                     auto dp = make_deform_params<double>(C, r.integer(1, 2), kernel, 1);
                     dp.proj.weights = r.tensor(dp.proj.weights.shape());
                     dp.proj.bias = r.tensor(dp.proj.bias.shape());
                     const std::size_t K = dp.footprint();
                     // Offsets place every sample point off-lattice; some land outside.
                     TensorD off({K, 3, D, H, W});
                     const long n[3] = {long(D), long(H), long(W)};
                     for (std::size_t k = 0; k < K; ++k)
                       for (std::size_t a = 0; a < 3; ++a)
                         for (std::size_t cell = 0; cell < D * H * W; ++cell) {
                           const std::size_t idx[3] = {cell / (H * W), (cell / W) % H, cell % W};
                           const double base = double(idx[a]) + dp.base_grid[k][a];
                           off[(k * 3 + a) * D * H * W + cell] = off_lattice(r, -1, n[a] - 1) - base;
                         }
                     TensorD wts = r.tensor({K, D, H, W}, 0.05, 0.95);
                     TensorD aff = r.tensor({D, H, W});
                     const TensorD G = r.tensor({dp.out_channels(), D, H, W});
                     auto f = [&] { return dot(G, deformable_sample(vol, off, wts, aff, dp)); };
                     const auto g = deformable_sample_backward(G, vol, off, wts, aff, dp);
                     Outcome w;
                     keep_worst(w, grad_outcome(g.volume, numeric(&vol, f), "volume"));
                     keep_worst(w, grad_outcome(g.offsets, numeric(&off, f), "offsets"));
                     keep_worst(w, grad_outcome(g.weights, numeric(&wts, f), "weights"));
                     keep_worst(w, grad_outcome(g.affinity, numeric(&aff, f), "affinity"));
                     keep_worst(w, grad_outcome(g.proj_weights, numeric(&dp.proj.weights, f), "proj.weights"));
                     keep_worst(w, grad_outcome(g.proj_bias, numeric(&dp.proj.bias, f), "proj.bias"));
                     return w;
                   });
}

CheckResult attention_grad(const VerifyOptions& o) {
  return run_check("voxel_aggregation", "attention_backward", kGradTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t C = r.integer(1, 3), Cr = r.integer(1, 3), heads = r.integer(1, 2), dh = r.integer(1, 3);
    const std::size_t P = r.integer(0, 1) ? 2 : 0;
    TensorD vox = r.tensor({C, r.integer(1, 2), 2, r.integer(1, 3)});
    TensorD rel = r.tensor({Cr, r.integer(1, 3), 2, r.integer(1, 2)});
    auto ap = make_attention_params<double>(C, Cr, heads * dh, heads, P);
    for (TensorD* t : {&ap.q_w, &ap.q_b, &ap.k_w, &ap.k_b, &ap.v_w, &ap.v_b, &ap.out_w, &ap.out_b}) *t = r.tensor(t->shape());
    ap.alpha = r.uniform(-1.5, 1.5);
    PositionalEncoding<double> pe;
    if (P) {
      pe.query = r.tensor({P, vox.dim(1), vox.dim(2), vox.dim(3)});
      pe.key = r.tensor({P, rel.dim(1), rel.dim(2), rel.dim(3)});
    }
    const TensorD G = r.tensor(vox.shape());
    auto f = [&] { return dot(G, weighted_cross_attention(vox, rel, ap, pe)); };
    AttentionCache<double> cache;
    weighted_cross_attention(vox, rel, ap, pe, {}, &cache);
    const auto g = attention_backward(G, vox, rel, ap, cache);
    // Errors are relative to the largest gradient of the instance.
    double scale = 0;
    for (const TensorD* t : {&g.q_w, &g.k_w, &g.v_w, &g.out_w, &g.vox, &g.rel}) {
      double n2 = 0;
      for (double v : t->data()) n2 += v * v;
      scale = std::max(scale, std::sqrt(n2));
    }
    const double floor = std::max(1e-6, 1e-4 * scale);
    Outcome w;
    keep_worst(w, grad_outcome(g.q_w, numeric(&ap.q_w, f), "q_w", floor));
    keep_worst(w, grad_outcome(g.q_b, numeric(&ap.q_b, f), "q_b", floor));
    keep_worst(w, grad_outcome(g.k_w, numeric(&ap.k_w, f), "k_w", floor));
    keep_worst(w, grad_outcome(g.k_b, numeric(&ap.k_b, f), "k_b", floor));
    keep_worst(w, grad_outcome(g.v_w, numeric(&ap.v_w, f), "v_w", floor));
    keep_worst(w, grad_outcome(g.v_b, numeric(&ap.v_b, f), "v_b", floor));
    keep_worst(w, grad_outcome(g.out_w, numeric(&ap.out_w, f), "out_w", floor));
    keep_worst(w, grad_outcome(g.out_b, numeric(&ap.out_b, f), "out_b", floor));
    keep_worst(w, grad_outcome(g.vox, numeric(&vox, f), "vox", floor));
    keep_worst(w, grad_outcome(g.rel, numeric(&rel, f), "rel", floor));
    const double a0 = ap.alpha;
    ap.alpha = a0 + kEps;
    const double up = f();
    ap.alpha = a0 - kEps;
    const double down = f();
    ap.alpha = a0;
    keep_worst(w, grad_outcome(TensorD({1}, g.alpha), TensorD({1}, (up - down) / (2 * kEps)), "alpha"));
    return w;
  });
}

std::vector<std::uint8_t> random_labels(RandomSource& r, std::size_t n, std::size_t K, std::uint8_t ignore) {
  std::vector<std::uint8_t> labels(n);
  for (auto& l : labels) l = r.integer(0, 4) == 0 ? ignore : std::uint8_t(r.integer(0, K - 1));
  labels[0] = std::uint8_t(r.integer(0, K - 1));
  return labels;
}

CheckResult weighted_ce_grad(const VerifyOptions& o) {
  return run_check("losses_metrics", "weighted_ce_backward", kGradTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t K = r.integer(2, 5), n = r.integer(2, 10);
    TensorD logits = r.tensor({K, n}, -3, 3);
    const auto labels = random_labels(r, n, K, 255);
    std::vector<double> weights(K);
    for (auto& v : weights) v = r.uniform(0.2, 2);
    auto f = [&] { return weighted_ce(softmax(logits, 0), labels, weights, 255).value; };
    const auto lg = weighted_ce(softmax(logits, 0), labels, weights, 255);
    return grad_outcome(lg.grad, numeric(&logits, f), "logits");
  });
}

CheckResult occupancy_bce_grad(const VerifyOptions& o) {
  return run_check("losses_metrics", "occupancy_bce_backward", kGradTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t K = r.integer(2, 5), n = r.integer(2, 10);
    TensorD logits = r.tensor({K, n}, -3, 3);
    const auto labels = random_labels(r, n, K, 255);
    auto f = [&] { return occupancy_bce(softmax(logits, 0), labels, 255).value; };
    return grad_outcome(occupancy_bce(softmax(logits, 0), labels, 255).grad, numeric(&logits, f), "logits");
  });
}

CheckResult depth_bce_grad(const VerifyOptions& o) {
  return run_check("losses_metrics", "depth_bce_backward", kGradTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t D = r.integer(2, 6), h = r.integer(1, 3), w = r.integer(1, 3);
    TensorD logits = r.tensor({D, h, w}, -3, 3);
    std::vector<int> bins(h * w);
    for (auto& b : bins) b = r.integer(0, 3) == 0 ? -1 : int(r.integer(0, D - 1));
    bins[0] = int(r.integer(0, D - 1));
    auto f = [&] { return depth_bce(depth_distribution(logits), bins).value; };
    return grad_outcome(depth_bce(depth_distribution(logits), bins).grad, numeric(&logits, f), "logits");
  });
}

CheckResult trilinear_grad(const VerifyOptions& o) {
  return run_check("tensor_core", "trilinear_backward", kGradTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    TensorD vol = r.tensor({r.integer(1, 2), r.integer(2, 4), r.integer(2, 4), r.integer(2, 4)});
    TensorD coords({r.integer(2, 12), 3});
    for (std::size_t i = 0; i < coords.dim(0); ++i)
      for (std::size_t a = 0; a < 3; ++a) coords(i, a) = off_lattice(r, -1, long(vol.dim(a + 1)) - 1);
    const TensorD G = r.tensor({vol.dim(0), coords.dim(0)});
    auto f = [&] { return dot(G, trilinear_sample(vol, coords)); };
    const auto g = trilinear_sample_backward(vol, coords, G);
    Outcome w;
    keep_worst(w, grad_outcome(g.volume, numeric(&vol, f), "volume"));
    keep_worst(w, grad_outcome(g.coords, numeric(&coords, f), "coords"));
    return w;
  });
}

CheckResult conv_grad(const VerifyOptions& o) {
  return run_check("tensor_core", "conv3d_backward", kGradTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t k = r.integer(0, 1) ? 3 : 1, dil = r.integer(1, 2);
    TensorD x = r.tensor({r.integer(1, 2), r.integer(2, 3), r.integer(2, 3), r.integer(2, 3)});
    auto p = Conv3dParams<double>::same(r.integer(1, 2), x.dim(0), k, dil);
    p.weights = r.tensor(p.weights.shape());
    p.bias = r.tensor(p.bias.shape());
    const TensorD G = r.tensor(Shape{p.out_channels(), x.dim(1), x.dim(2), x.dim(3)});
    auto f = [&] { return dot(G, conv3d(x, p)); };
    const auto g = conv3d_backward(x, p, G);
    Outcome w;
    keep_worst(w, grad_outcome(g.input, numeric(&x, f), "input"));
    keep_worst(w, grad_outcome(g.weights, numeric(&p.weights, f), "weights"));
    keep_worst(w, grad_outcome(g.bias, numeric(&p.bias, f), "bias"));
    return w;
  });
}

CheckResult upsample_grad(const VerifyOptions& o) {
  return run_check("tensor_core", "upsample_backward", kGradTol, o.seeds, o.base_seed, [](std::uint64_t s) {
    RandomSource r(s);
    const std::size_t factor = r.integer(1, 3);
    TensorD x = r.tensor({r.integer(1, 2), r.integer(1, 3), r.integer(1, 3), r.integer(1, 3)});
    const TensorD G = r.tensor({x.dim(0), x.dim(1) * factor, x.dim(2) * factor, x.dim(3) * factor});
    auto f = [&] { return dot(G, upsample_trilinear(x, factor)); };
    return grad_outcome(upsample_trilinear_backward(x.shape(), factor, G), numeric(&x, f), "input");
  });
}

}  // namespace

SuiteReport grad_suite(const VerifyOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport rep;
  rep.suite = "grad";
  rep.checks.push_back(deformable_grad(opts));
  rep.checks.push_back(attention_grad(opts));
  rep.checks.push_back(weighted_ce_grad(opts));
  rep.checks.push_back(depth_bce_grad(opts));
  rep.checks.push_back(occupancy_bce_grad(opts));
  rep.checks.push_back(trilinear_grad(opts));
  rep.checks.push_back(conv_grad(opts));
  rep.checks.push_back(upsample_grad(opts));
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace htcl
