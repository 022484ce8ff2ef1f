#pragma once

// The packaged finite-difference verification suite: every differentiable op
// against central differences in double (tolerance 1e-5), then the composed
// toy network end-to-end through its real loss (tolerance 1e-3).  The
// composed loss is only piecewise smooth -- perturbing one early-layer weight
// sweeps thousands of downstream relu inputs, and any of them crossing zero
// inside the stencil turns the secant into a blend of two one-sided slopes.
// The second difference |f(x+h) - 2 f(x) + f(x-h)| / 2h measures exactly that
// blend (it vanishes for locally linear pieces and equals the secant's kink
// error for a single crossing), so it is subtracted from each probe's error
// before the relative comparison.  A wrong gradient still fails loudly: its
// error is not explained by the measured nonsmoothness.
// Shared by the `gradcheck` subcommand and the acceptance harness.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "isoseg/autograd.hpp"
#include "isoseg/gradcheck.hpp"
#include "isoseg/losses.hpp"
#include "isoseg/model.hpp"
#include "isoseg/rng.hpp"

namespace isoseg {

struct FdCaseResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;

  bool pass() const { return max_rel_error < tolerance; }
};

namespace fdsuite_detail {

using D = double;

inline Tensor<D> randn(const Shape5& shape, Rng& rng, double scale = 1.0) {
  Tensor<D> t(shape);
  for (auto& v : t.data) v = rng.normal() * scale;
  return t;
}

/// Fixed random projection to a scalar, so the loss is a generic linear
/// functional of the op output.
inline GId<D> project(Graph<D>& g, GId<D> x, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<D> t(g.value(x).shape);
  for (auto& v : t.data) v = rng.normal();
  return sum_all(g, mul(g, x, g.leaf(std::move(t))));
}

inline FdCaseResult op_case(
    const std::string& name, std::vector<GradCheckInput<D>> inputs,
    const std::function<GId<D>(Graph<D>&, const std::vector<GId<D>>&)>& build,
    std::uint64_t dropout_seed = 0) {
  const GradCheckReport rep = grad_check<D>(std::move(inputs), build, 1e-4, dropout_seed);
  return {name, rep.max_rel_error, 1e-5, rep.checked};
}

/// End-to-end check of the toy network through its training loss.  The graph
/// leafs its parameters from the store internally, so this probes the store
/// tensors directly instead of going through the grad_check harness: analytic
/// gradients come from one tape, finite differences from rebuilt forwards at
/// perturbed parameter values (same dropout seed keeps masks identical).
///
/// The patch is 16 so the deepest stage is 2^3, not 1^3: a train-mode batch
/// norm over a single voxel has zero batch variance, its output collapses to
/// beta exactly, and the zero-initialised betas would then sit exactly on the
/// following relu's kink -- a structurally non-differentiable point no finite
/// difference can probe.
inline FdCaseResult composed_case(HeadMode mode, std::uint64_t seed,
                                  std::size_t samples_per_tensor) {
  ModelConfig cfg = ModelConfig::toy(mode);
  cfg.patch = 16;
  const std::size_t P = cfg.patch;
  const bool exclusive = mode == HeadMode::exclusive;

  ParamStore<D> store = build_params<D>(cfg, seed);
  Rng rng(Rng::derive(seed, 0x66647375));
  Tensor<D> patch = randn(Shape5{1, cfg.in_channels, P, P, P}, rng);
  const std::size_t V = P * P * P;
  Tensor<D> target_a(Shape5{1, 1, P, P, P}), target_b(Shape5{1, 1, P, P, P});
  Tensor<D> onehot(Shape5{1, kNumClasses, P, P, P});
  for (std::size_t i = 0; i < V; ++i) {
    const std::uint64_t code = rng.below(kNumClasses);
    target_a.data[i] = code == kCsf ? 1.0 : 0.0;
    target_b.data[i] = code == kWm ? 1.0 : 0.0;
    onehot.data[code * V + i] = 1.0;
  }
  LossConfig loss_cfg;
  loss_cfg.beta[kCsf] = 1.5;
  loss_cfg.beta[kWm] = 1.0;

  const std::uint64_t dropout_seed = Rng::derive(seed, 0x64726f70);
  auto forward_loss = [&](Graph<D>& g, GId<D> input,
                          std::map<std::string, GId<D>>* ids) -> GId<D> {
    const GId<D> probs = forward_train(g, cfg, store, input, ids);
    if (exclusive) {
      const std::vector<ClassTerm<D>> terms{{slice_channels(g, probs, 0, 1), &target_a, kCsf},
                                            {slice_channels(g, probs, 1, 2), &target_b, kWm}};
      return multi_label_loss(g, terms, loss_cfg);
    }
    return single_label_loss(g, probs, onehot, loss_cfg);
  };
  auto loss_at = [&]() -> double {
    Graph<D> g(dropout_seed);
    return g.value(forward_loss(g, g.leaf(patch), nullptr)).item();
  };

  // One tape for the analytic gradients of every parameter and the input.
  Graph<D> g(dropout_seed);
  const GId<D> input = g.leaf(patch, true);
  std::map<std::string, GId<D>> ids;
  const GId<D> loss = forward_loss(g, input, &ids);
  g.backward(loss);

  FdCaseResult result{std::string("composed toy network (") + head_mode_name(mode) + ")", 0.0,
                      1e-3, 0};
  // Small h keeps relu crossings out of the stencil (their rate is linear in
  // h, and the pair cancellations the allowance cannot see are quadratic); the
  // floor sits five decades under the typical gradient so rounding noise on
  // genuinely dead channels does not register.
  const double h = 1e-6;
  const double f0 = loss_at();
  auto probe = [&](Tensor<D>& t, std::size_t i, double analytic) {
    const double keep = t.data[i];
    t.data[i] = keep + h;
    const double fp = loss_at();
    t.data[i] = keep - h;
    const double fm = loss_at();
    t.data[i] = keep;
    const double num = (fp - fm) / (2.0 * h);
    // measured bound on the secant's own error from kinks inside the stencil
    const double kink = std::abs(fp - 2.0 * f0 + fm) / (2.0 * h);
    const double err = std::max(0.0, std::abs(analytic - num) - kink);
    const double rel = err / std::max({std::abs(analytic), std::abs(num), 1e-7});
    ++result.checked;
    result.max_rel_error = std::max(result.max_rel_error, rel);
  };

  for (const auto& [name, id] : ids) {
    Tensor<D>& t = store.param(name);
    const Tensor<D>& grad = g.grad(id);
    const std::size_t n = std::min(samples_per_tensor, t.size());
    for (std::size_t k = 0; k < n; ++k) probe(t, k * t.size() / n, grad.data[k * t.size() / n]);
  }
  const Tensor<D>& input_grad = g.grad(input);
  const std::size_t n = std::min(samples_per_tensor * 4, patch.size());
  for (std::size_t k = 0; k < n; ++k)
    probe(patch, k * patch.size() / n, input_grad.data[k * patch.size() / n]);
  return result;
}

}  // namespace fdsuite_detail

/// Runs the whole verification suite; one entry per case, worst-first order
/// is the caller's business.
inline std::vector<FdCaseResult> run_fd_suite() {
  using namespace fdsuite_detail;
  std::vector<FdCaseResult> out;
  Rng rng(101);

  {
    auto x = randn({1, 2, 4, 4, 4}, rng);
    auto w = randn({3, 2, 3, 3, 3}, rng, 0.4);
    out.push_back(op_case("conv3d (pad 1)", {{"x", &x}, {"w", &w}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return project(
                                g, conv3d(g, in[0], in[1], Dims3{1, 1, 1}, Dims3{1, 1, 1}), 7);
                          }));
  }
  {
    auto x = randn({1, 2, 4, 4, 4}, rng);
    auto w = randn({3, 2, 2, 2, 2}, rng, 0.4);
    out.push_back(op_case("conv3d (stride 2)", {{"x", &x}, {"w", &w}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return project(
                                g, conv3d(g, in[0], in[1], Dims3{2, 2, 2}, Dims3{0, 0, 0}), 8);
                          }));
  }
  {
    auto x = randn({1, 3, 3, 3, 3}, rng);
    auto w = randn({3, 2, 2, 2, 2}, rng, 0.4);
    out.push_back(op_case("conv_transpose3d", {{"x", &x}, {"w", &w}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return project(g, conv_transpose3d(g, in[0], in[1], Dims3{2, 2, 2}),
                                           9);
                          }));
  }
  {
    auto x = randn({2, 3, 2, 2, 2}, rng);
    auto b = randn({1, 3, 1, 1, 1}, rng);
    out.push_back(op_case("bias_add", {{"x", &x}, {"b", &b}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return project(g, bias_add(g, in[0], in[1]), 10);
                          }));
  }
  {
    auto x = randn({2, 2, 3, 3, 3}, rng, 1.5);
    auto gamma = randn({1, 2, 1, 1, 1}, rng, 0.5);
    auto beta = randn({1, 2, 1, 1, 1}, rng, 0.5);
    for (auto& v : gamma.data) v += 1.0;
    out.push_back(op_case("batch_norm (train)",
                          {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            std::vector<double> rm(2, 0.0), rv(2, 1.0);
                            return project(
                                g, batch_norm_train(g, in[0], in[1], in[2], 1e-5, 0.9, rm, rv),
                                11);
                          }));
  }
  {
    auto x = randn({2, 2, 3, 3, 3}, rng, 1.5);
    auto gamma = randn({1, 2, 1, 1, 1}, rng, 0.5);
    auto beta = randn({1, 2, 1, 1, 1}, rng, 0.5);
    out.push_back(op_case("batch_norm (eval)", {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            const std::vector<double> rm = {0.3, -0.2}, rv = {1.4, 0.6};
                            return project(
                                g, batch_norm_eval(g, in[0], in[1], in[2], 1e-5, rm, rv), 12);
                          }));
  }
  {
    Tensor<D> x({1, 1, 2, 2, 2});
    x.data = {-1.5, -0.8, 0.7, 1.2, -0.4, 0.9, 1.8, -1.1};  // clear of the kink
    out.push_back(op_case("relu", {{"x", &x}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return project(g, relu(g, in[0]), 13);
                          }));
  }
  {
    auto x = randn({1, 2, 2, 2, 2}, rng);
    out.push_back(op_case("sigmoid", {{"x", &x}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return project(g, sigmoid(g, in[0]), 14);
                          }));
  }
  {
    auto x = randn({2, 4, 2, 1, 2}, rng);
    out.push_back(op_case("softmax (channels)", {{"x", &x}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return project(g, softmax(g, in[0], 1), 15);
                          }));
  }
  {
    Tensor<D> x({1, 2, 4, 4, 4});
    Rng r2(55);
    for (std::size_t i = 0; i < x.size(); ++i)
      x.data[i] = static_cast<double>(i % 37) + 0.01 * r2.normal();  // distinct: argmax stable
    out.push_back(op_case("max_pool3d", {{"x", &x}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return project(g, max_pool3d(g, in[0]), 16);
                          }));
  }
  {
    auto x = randn({1, 2, 3, 3, 3}, rng);
    out.push_back(op_case(
        "dropout", {{"x", &x}},
        [](Graph<D>& g, const std::vector<GId<D>>& in) {
          return project(g, dropout(g, in[0], 0.3), 17);
        },
        /*dropout_seed=*/42));
  }
  {
    auto a = randn({1, 2, 2, 2, 2}, rng);
    auto b = randn({1, 3, 2, 2, 2}, rng);
    out.push_back(op_case("concat + slice", {{"a", &a}, {"b", &b}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            auto cat = concat_channels(g, {in[0], in[1]});
                            return project(g, slice_channels(g, cat, 1, 4), 18);
                          }));
  }
  {
    auto x = randn({1, 2, 4, 4, 4}, rng);
    out.push_back(op_case("crop3d", {{"x", &x}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return project(g, crop3d(g, in[0], Dims3{1, 0, 1}, Dims3{2, 3, 2}),
                                           21);
                          }));
  }
  {
    auto a = randn({1, 1, 2, 2, 2}, rng);
    auto b = randn({1, 1, 2, 2, 2}, rng);
    for (auto& v : b.data) v += (v >= 0 ? 2.0 : -2.0);  // keep div away from 0
    out.push_back(op_case("add/sub/mul/div/affine", {{"a", &a}, {"b", &b}},
                          [](Graph<D>& g, const std::vector<GId<D>>& in) {
                            auto s = add(g, mul(g, in[0], in[1]), sub(g, in[0], in[1]));
                            auto d = div(g, s, in[1]);
                            return project(g, affine(g, d, 0.7, -0.2), 19);
                          }));
  }
  {
    Tensor<D> p({1, 1, 2, 2, 2}), t({1, 1, 2, 2, 2});
    Rng r3(77);
    for (auto& v : p.data) v = 0.05 + 0.9 * r3.uniform();
    for (auto& v : t.data) v = r3.below(2) ? 1.0 : 0.0;
    out.push_back(op_case("soft F-beta score", {{"p", &p}},
                          [&t](Graph<D>& g, const std::vector<GId<D>>& in) {
                            return soft_fbeta_score(g, in[0], t, 1.5, 1e-6);
                          }));
  }

  out.push_back(fdsuite_detail::composed_case(HeadMode::exclusive, 210, 3));
  out.push_back(fdsuite_detail::composed_case(HeadMode::single_label, 210, 3));
  return out;
}

}  // namespace isoseg
