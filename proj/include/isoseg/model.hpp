#pragma once

// Fully convolutional DenseNet for volumetric segmentation.
//
// Layout: an initial strided downsampling conv plus three 3x3x3 convs, a
// contracting path of dense blocks with transition-down between them, a center
// block, and a mirrored expanding path whose transition-up operates on each
// block's newly produced features only (keeps the channel budget bounded),
// with one skip concatenation per level.  A strided transpose conv restores
// the input resolution before the 1x1x1 classification conv.
//
// The same walker drives three interpreters: BuildCtx materializes parameters
// and propagates shapes only, GraphCtx records a differentiable tape, and
// EvalCtx runs inference without retaining a graph.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "isoseg/autograd.hpp"
#include "isoseg/io.hpp"
#include "isoseg/kernels.hpp"
#include "isoseg/rng.hpp"

namespace isoseg {

enum class HeadMode { exclusive, single_label };

inline const char* head_mode_name(HeadMode m) {
  return m == HeadMode::exclusive ? "exclusive" : "single_label";
}

inline HeadMode parse_head_mode(const std::string& s) {
  if (s == "exclusive") return HeadMode::exclusive;
  if (s == "single_label") return HeadMode::single_label;
  throw ConfigError("mode must be 'exclusive' or 'single_label', got '" + s + "'");
}

struct ModelConfig {
  std::size_t in_channels = 2;
  HeadMode head = HeadMode::exclusive;
  std::size_t patch = 128;
  std::size_t initial_stride = 2;
  std::size_t initial_convs = 3;
  std::size_t initial_width = 24;
  std::size_t levels = 5;  // dense blocks per path; equals the pooling count
  std::size_t layers_per_block = 4;
  std::size_t growth = 12;
  std::size_t bottleneck_factor = 4;
  double compression = 0.5;
  double dropout = 0.2;
  std::size_t head_width = 64;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;

  std::size_t out_channels() const { return head == HeadMode::exclusive ? 2 : 4; }

  /// Spatial divisibility: one initial stride plus one pooling per level.
  std::size_t required_divisor() const { return std::size_t{1} << (levels + 1); }

  void validate() const {
    if (compression <= 0.0 || compression > 1.0)
      throw ConfigError("model: compression must be in (0, 1], got " +
                        std::to_string(compression));
    if (growth < 1) throw ConfigError("model: growth rate must be >= 1");
    if (layers_per_block < 1) throw ConfigError("model: layers_per_block must be >= 1");
    if (initial_stride != 2) throw ConfigError("model: initial_stride must be 2");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("model: dropout must be in [0, 1)");
    if (patch % required_divisor() != 0)
      throw ConfigError("model: patch extent " + std::to_string(patch) +
                        " must be divisible by 2^(levels+1) = " +
                        std::to_string(required_divisor()));
  }

  static ModelConfig paper_scale(HeadMode mode) {
    ModelConfig c;
    c.head = mode;
    return c;
  }

  static ModelConfig toy(HeadMode mode) {
    ModelConfig c;
    c.head = mode;
    c.patch = 32;
    c.initial_width = 8;
    c.levels = 2;
    c.layers_per_block = 2;
    c.growth = 4;
    c.head_width = 16;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Contexts

/// Creates parameters (He-style fan-in init) and tracks shapes only.
template <typename S>
struct BuildCtx {
  using H = Shape5;
  ParamStore<S>* store;
  Rng* rng;
  const ModelConfig* cfg;
};

/// Records ops on a tape; `train` selects batch statistics and dropout.
template <typename S>
struct GraphCtx {
  using H = GId<S>;
  Graph<S>* g;
  ParamStore<S>* store;
  const ModelConfig* cfg;
  bool train = true;

  GId<S> pid(const std::string& name) {
    auto it = ids.find(name);
    if (it != ids.end()) return it->second;
    const GId<S> id = g->leaf(store->param(name), train);
    ids.emplace(name, id);
    return id;
  }
  std::map<std::string, GId<S>> ids;
};

/// Inference without a tape: eval-mode BN, dropout off, tensors freed as the
/// last reference drops.
template <typename S>
struct EvalCtx {
  using H = std::shared_ptr<Tensor<S>>;
  ParamStore<S>* store;
  const ModelConfig* cfg;
};

namespace netdetail {

template <typename S>
std::size_t channels_of(const BuildCtx<S>&, const Shape5& h) {
  return h[1];
}
template <typename S>
std::size_t channels_of(const GraphCtx<S>& ctx, GId<S> h) {
  return ctx.g->value(h).shape[1];
}
template <typename S>
std::size_t channels_of(const EvalCtx<S>&, const std::shared_ptr<Tensor<S>>& h) {
  return h->shape[1];
}

template <typename S>
Tensor<S> he_normal(const Shape5& shape, double fan_in, Rng& rng) {
  Tensor<S> t(shape);
  const double std_dev = std::sqrt(2.0 / fan_in);
  for (auto& v : t.data) v = static_cast<S>(rng.normal() * std_dev);
  return t;
}

// --- conv (no bias; a batch norm always follows) ---

template <typename S>
Shape5 op_conv(BuildCtx<S>& ctx, const std::string& name, const Shape5& x, std::size_t co,
               std::size_t k, std::size_t s, std::size_t p) {
  const Shape5 wshape{co, x[1], k, k, k};
  ctx.store->params.emplace(name + ".w",
                            he_normal<S>(wshape, static_cast<double>(x[1] * k * k * k),
                                         *ctx.rng));
  const auto geom = isoseg::detail::conv_geom(x, wshape, Dims3{s, s, s}, Dims3{p, p, p});
  return Shape5{x[0], co, geom.out[0], geom.out[1], geom.out[2]};
}
template <typename S>
GId<S> op_conv(GraphCtx<S>& ctx, const std::string& name, GId<S> x, std::size_t, std::size_t,
               std::size_t s, std::size_t p) {
  return conv3d(*ctx.g, x, ctx.pid(name + ".w"), Dims3{s, s, s}, Dims3{p, p, p});
}
template <typename S>
std::shared_ptr<Tensor<S>> op_conv(EvalCtx<S>& ctx, const std::string& name,
                                   const std::shared_ptr<Tensor<S>>& x, std::size_t,
                                   std::size_t, std::size_t s, std::size_t p) {
  return std::make_shared<Tensor<S>>(
      conv3d(*x, ctx.store->param(name + ".w"), Dims3{s, s, s}, Dims3{p, p, p}));
}

// --- transpose conv ---

template <typename S>
Shape5 op_tconv(BuildCtx<S>& ctx, const std::string& name, const Shape5& x, std::size_t co,
                std::size_t k, std::size_t s) {
  const Shape5 wshape{x[1], co, k, k, k};
  const double fan_in = static_cast<double>(x[1]) * k * k * k / static_cast<double>(s * s * s);
  ctx.store->params.emplace(name + ".w", he_normal<S>(wshape, fan_in, *ctx.rng));
  Shape5 out{x[0], co, 0, 0, 0};
  for (std::size_t a = 0; a < 3; ++a) out[2 + a] = (x[2 + a] - 1) * s + k;
  return out;
}
template <typename S>
GId<S> op_tconv(GraphCtx<S>& ctx, const std::string& name, GId<S> x, std::size_t, std::size_t,
                std::size_t s) {
  return conv_transpose3d(*ctx.g, x, ctx.pid(name + ".w"), Dims3{s, s, s});
}
template <typename S>
std::shared_ptr<Tensor<S>> op_tconv(EvalCtx<S>& ctx, const std::string& name,
                                    const std::shared_ptr<Tensor<S>>& x, std::size_t,
                                    std::size_t, std::size_t s) {
  return std::make_shared<Tensor<S>>(
      conv_transpose3d(*x, ctx.store->param(name + ".w"), Dims3{s, s, s}));
}

// --- batch norm + relu ---

template <typename S>
Shape5 op_bn_relu(BuildCtx<S>& ctx, const std::string& name, const Shape5& x) {
  const std::size_t C = x[1];
  Tensor<S> gamma(Shape5{1, C, 1, 1, 1}), beta(Shape5{1, C, 1, 1, 1});
  for (auto& v : gamma.data) v = S(1);
  ctx.store->params.emplace(name + ".bn.g", std::move(gamma));
  ctx.store->params.emplace(name + ".bn.b", std::move(beta));
  ctx.store->buffers.emplace(name + ".bn.rm", std::vector<S>(C, S(0)));
  ctx.store->buffers.emplace(name + ".bn.rv", std::vector<S>(C, S(1)));
  return x;
}
template <typename S>
GId<S> op_bn_relu(GraphCtx<S>& ctx, const std::string& name, GId<S> x) {
  const GId<S> gamma = ctx.pid(name + ".bn.g");
  const GId<S> beta = ctx.pid(name + ".bn.b");
  GId<S> y;
  if (ctx.train)
    y = batch_norm_train(*ctx.g, x, gamma, beta, ctx.cfg->bn_eps, ctx.cfg->bn_momentum,
                         ctx.store->buffer(name + ".bn.rm"), ctx.store->buffer(name + ".bn.rv"));
  else
    y = batch_norm_eval(*ctx.g, x, gamma, beta, ctx.cfg->bn_eps,
                        ctx.store->buffer(name + ".bn.rm"), ctx.store->buffer(name + ".bn.rv"));
  return relu(*ctx.g, y);
}
template <typename S>
std::shared_ptr<Tensor<S>> op_bn_relu(EvalCtx<S>& ctx, const std::string& name,
                                      const std::shared_ptr<Tensor<S>>& x) {
  return std::make_shared<Tensor<S>>(
      relu(batch_norm_eval(*x, ctx.store->param(name + ".bn.g").data,
                           ctx.store->param(name + ".bn.b").data, ctx.cfg->bn_eps,
                           ctx.store->buffer(name + ".bn.rm"),
                           ctx.store->buffer(name + ".bn.rv"))));
}

// --- dropout (train-mode graphs only) ---

template <typename S>
Shape5 op_dropout(BuildCtx<S>&, const Shape5& x) {
  return x;
}
template <typename S>
GId<S> op_dropout(GraphCtx<S>& ctx, GId<S> x) {
  if (!ctx.train || ctx.cfg->dropout == 0.0) return x;
  return dropout(*ctx.g, x, ctx.cfg->dropout);
}
template <typename S>
std::shared_ptr<Tensor<S>> op_dropout(EvalCtx<S>&, const std::shared_ptr<Tensor<S>>& x) {
  return x;
}

// --- 2x2x2 max pool ---

template <typename S>
Shape5 op_pool(BuildCtx<S>&, const Shape5& x) {
  Shape5 out = x;
  for (std::size_t a = 2; a < 5; ++a) {
    if (x[a] % 2 != 0)
      throw DimensionError("max_pool3d: odd extent " + std::to_string(x[a]) + " on axis " +
                           std::to_string(a));
    out[a] = x[a] / 2;
  }
  return out;
}
template <typename S>
GId<S> op_pool(GraphCtx<S>& ctx, GId<S> x) {
  return max_pool3d(*ctx.g, x);
}
template <typename S>
std::shared_ptr<Tensor<S>> op_pool(EvalCtx<S>&, const std::shared_ptr<Tensor<S>>& x) {
  return std::make_shared<Tensor<S>>(max_pool3d(*x, nullptr));
}

// --- channel concat / slice, spatial crop ---

template <typename S>
Shape5 op_concat(BuildCtx<S>&, const std::vector<Shape5>& xs) {
  Shape5 out = xs.at(0);
  for (std::size_t i = 1; i < xs.size(); ++i) {
    for (std::size_t a : {0, 2, 3, 4})
      if (xs[i][a] != out[a])
        throw DimensionError("concat_channels: extent mismatch on axis " + std::to_string(a));
    out[1] += xs[i][1];
  }
  return out;
}
template <typename S>
GId<S> op_concat(GraphCtx<S>& ctx, const std::vector<GId<S>>& xs) {
  return concat_channels(*ctx.g, xs);
}
template <typename S>
std::shared_ptr<Tensor<S>> op_concat(EvalCtx<S>&,
                                     const std::vector<std::shared_ptr<Tensor<S>>>& xs) {
  std::vector<const Tensor<S>*> views;
  views.reserve(xs.size());
  for (const auto& x : xs) views.push_back(x.get());
  return std::make_shared<Tensor<S>>(concat_channels(views));
}

template <typename S>
Shape5 op_slice(BuildCtx<S>&, const Shape5& x, std::size_t c0, std::size_t c1) {
  if (c0 >= c1 || c1 > x[1]) throw DimensionError("slice: bad channel range");
  Shape5 out = x;
  out[1] = c1 - c0;
  return out;
}
template <typename S>
GId<S> op_slice(GraphCtx<S>& ctx, GId<S> x, std::size_t c0, std::size_t c1) {
  return slice_channels(*ctx.g, x, c0, c1);
}
template <typename S>
std::shared_ptr<Tensor<S>> op_slice(EvalCtx<S>&, const std::shared_ptr<Tensor<S>>& x,
                                    std::size_t c0, std::size_t c1) {
  return std::make_shared<Tensor<S>>(slice_channels(*x, c0, c1));
}

template <typename S>
Shape5 op_crop(BuildCtx<S>&, const Shape5& x, const Dims3& off, const Dims3& extent) {
  for (std::size_t a = 0; a < 3; ++a)
    if (off[a] + extent[a] > x[2 + a])
      throw DimensionError("crop3d: window exceeds extent on axis " + std::to_string(2 + a));
  return Shape5{x[0], x[1], extent[0], extent[1], extent[2]};
}
template <typename S>
GId<S> op_crop(GraphCtx<S>& ctx, GId<S> x, const Dims3& off, const Dims3& extent) {
  return crop3d(*ctx.g, x, off, extent);
}
template <typename S>
std::shared_ptr<Tensor<S>> op_crop(EvalCtx<S>&, const std::shared_ptr<Tensor<S>>& x,
                                   const Dims3& off, const Dims3& extent) {
  return std::make_shared<Tensor<S>>(crop3d(*x, off, extent));
}

// --- head activation ---

template <typename S>
Shape5 op_head_act(BuildCtx<S>&, const Shape5& x, HeadMode) {
  return x;
}
template <typename S>
GId<S> op_head_act(GraphCtx<S>& ctx, GId<S> x, HeadMode mode) {
  return mode == HeadMode::exclusive ? sigmoid(*ctx.g, x) : softmax(*ctx.g, x, 1);
}
template <typename S>
std::shared_ptr<Tensor<S>> op_head_act(EvalCtx<S>&, const std::shared_ptr<Tensor<S>>& x,
                                       HeadMode mode) {
  return std::make_shared<Tensor<S>>(mode == HeadMode::exclusive ? sigmoid(*x)
                                                                 : softmax(*x, 1));
}

// --- final 1x1x1 conv with bias, no bn ---

template <typename S>
Shape5 op_head_conv(BuildCtx<S>& ctx, const std::string& name, const Shape5& x,
                    std::size_t co) {
  ctx.store->params.emplace(
      name + ".w", he_normal<S>(Shape5{co, x[1], 1, 1, 1}, static_cast<double>(x[1]),
                                *ctx.rng));
  ctx.store->params.emplace(name + ".bias", Tensor<S>(Shape5{1, co, 1, 1, 1}));
  Shape5 out = x;
  out[1] = co;
  return out;
}
template <typename S>
GId<S> op_head_conv(GraphCtx<S>& ctx, const std::string& name, GId<S> x, std::size_t) {
  const GId<S> y = conv3d(*ctx.g, x, ctx.pid(name + ".w"), Dims3{1, 1, 1}, Dims3{0, 0, 0});
  return bias_add(*ctx.g, y, ctx.pid(name + ".bias"));
}
template <typename S>
std::shared_ptr<Tensor<S>> op_head_conv(EvalCtx<S>& ctx, const std::string& name,
                                        const std::shared_ptr<Tensor<S>>& x, std::size_t) {
  Tensor<S> y = conv3d(*x, ctx.store->param(name + ".w"), Dims3{1, 1, 1}, Dims3{0, 0, 0});
  const Tensor<S>& b = ctx.store->param(name + ".bias");
  const std::size_t C = y.shape[1], V = y.spatial();
  for (std::size_t bb = 0; bb < y.shape[0]; ++bb)
    for (std::size_t c = 0; c < C; ++c) {
      S* q = y.data.data() + (bb * C + c) * V;
      for (std::size_t i = 0; i < V; ++i) q[i] += b.data[c];
    }
  return std::make_shared<Tensor<S>>(std::move(y));
}

template <typename Ctx>
typename Ctx::H conv_bn_relu(Ctx& ctx, const std::string& name, typename Ctx::H x,
                             std::size_t co, std::size_t k, std::size_t s, std::size_t p) {
  return op_bn_relu(ctx, name, op_conv(ctx, name, x, co, k, s, p));
}

}  // namespace netdetail

// ---------------------------------------------------------------------------
// The network walker

/// One dense block: each layer is bottleneck-conv -> 3x3x3 conv -> dropout,
/// concatenated onto the running stack.  Verifies the channel arithmetic
/// c_in + growth*(l-1) at every layer.
template <typename Ctx>
typename Ctx::H dense_block(Ctx& ctx, const std::string& prefix, typename Ctx::H x) {
  using netdetail::channels_of;
  const ModelConfig& cfg = *ctx.cfg;
  const std::size_t base = channels_of(ctx, x);
  for (std::size_t l = 1; l <= cfg.layers_per_block; ++l) {
    if (channels_of(ctx, x) != base + cfg.growth * (l - 1))
      throw InternalError(prefix + " layer " + std::to_string(l) +
                          ": channel bookkeeping mismatch: have " +
                          std::to_string(channels_of(ctx, x)) + ", expected " +
                          std::to_string(base + cfg.growth * (l - 1)));
    const std::string ln = prefix + ".l" + std::to_string(l);
    auto b = netdetail::conv_bn_relu(ctx, ln + ".bneck", x,
                                     cfg.bottleneck_factor * cfg.growth, 1, 1, 0);
    auto c = netdetail::conv_bn_relu(ctx, ln + ".conv", b, cfg.growth, 3, 1, 1);
    c = netdetail::op_dropout(ctx, c);
    x = netdetail::op_concat(ctx, {x, c});
  }
  return x;
}

/// Compression conv (ceil(theta*C) channels) followed by 2x2x2 max pooling.
template <typename Ctx>
typename Ctx::H transition_down(Ctx& ctx, const std::string& prefix, typename Ctx::H x) {
  using netdetail::channels_of;
  const std::size_t co = static_cast<std::size_t>(
      std::ceil(ctx.cfg->compression * static_cast<double>(channels_of(ctx, x))));
  x = netdetail::conv_bn_relu(ctx, prefix + ".comp", x, co, 1, 1, 0);
  return netdetail::op_pool(ctx, x);
}

/// Strided 3x3x3 transpose conv doubling the spatial extents (the transpose
/// conv yields 2n+1 per axis; the leading voxel is cropped).
template <typename Ctx>
typename Ctx::H transition_up(Ctx& ctx, const std::string& prefix, typename Ctx::H x,
                              std::size_t co, const Dims3& target) {
  x = netdetail::op_tconv(ctx, prefix + ".up", x, co, 3, 2);
  x = netdetail::op_crop(ctx, x, Dims3{1, 1, 1}, target);
  return netdetail::op_bn_relu(ctx, prefix + ".up", x);
}

/// Runs the full network; returns per-class probabilities with the same
/// spatial shape as the input.
template <typename Ctx>
typename Ctx::H run_network(Ctx& ctx, typename Ctx::H input) {
  using netdetail::channels_of;
  const ModelConfig& cfg = *ctx.cfg;
  cfg.validate();

  auto x = netdetail::conv_bn_relu(ctx, "init.down", input, cfg.initial_width,
                                   cfg.initial_stride, cfg.initial_stride, 0);
  for (std::size_t i = 1; i <= cfg.initial_convs; ++i)
    x = netdetail::conv_bn_relu(ctx, "init.conv" + std::to_string(i), x, cfg.initial_width, 3,
                                1, 1);

  std::vector<typename Ctx::H> skips;
  std::vector<std::size_t> skip_extent;  // spatial extent per level (cubic patches)
  std::size_t extent = cfg.patch / cfg.initial_stride;
  for (std::size_t lvl = 0; lvl < cfg.levels; ++lvl) {
    x = dense_block(ctx, "enc" + std::to_string(lvl), x);
    skips.push_back(x);
    skip_extent.push_back(extent);
    x = transition_down(ctx, "td" + std::to_string(lvl), x);
    extent /= 2;
  }

  x = dense_block(ctx, "center", x);

  const std::size_t new_feats = cfg.layers_per_block * cfg.growth;
  for (std::size_t lvl = cfg.levels; lvl-- > 0;) {
    const std::size_t c_total = channels_of(ctx, x);
    auto fresh = netdetail::op_slice(ctx, x, c_total - new_feats, c_total);
    extent *= 2;
    auto up = transition_up(ctx, "tu" + std::to_string(lvl), fresh, new_feats,
                            Dims3{extent, extent, extent});
    if (extent != skip_extent[lvl])
      throw InternalError("expanding path extent " + std::to_string(extent) +
                          " does not match skip level " + std::to_string(lvl));
    x = netdetail::op_concat(ctx, {up, skips[lvl]});
    x = dense_block(ctx, "dec" + std::to_string(lvl), x);
  }

  x = netdetail::op_tconv(ctx, "head.up", x, cfg.head_width, cfg.initial_stride,
                          cfg.initial_stride);
  x = netdetail::op_bn_relu(ctx, "head.up", x);
  x = netdetail::op_head_conv(ctx, "head.out", x, cfg.out_channels());
  return netdetail::op_head_act(ctx, x, cfg.head);
}

// ---------------------------------------------------------------------------
// Entry points

/// Materializes all parameters for `cfg`, seeded and order-deterministic.
template <typename S>
ParamStore<S> build_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<S> store;
  Rng rng(Rng::derive(seed, 0x6d6f64656c));  // independent init stream
  // Walk at the smallest valid patch: parameters are patch-size independent.
  ModelConfig probe = cfg;
  probe.patch = cfg.required_divisor();
  BuildCtx<S> pctx{&store, &rng, &probe};
  run_network(pctx, Shape5{1, cfg.in_channels, probe.patch, probe.patch, probe.patch});
  return store;
}

template <typename S>
std::size_t count_parameters(const ParamStore<S>& store) {
  return store.parameter_count();
}

/// Inference forward pass (graph-free).
template <typename S>
Tensor<S> forward_eval(const ModelConfig& cfg, ParamStore<S>& store, const Tensor<S>& patch) {
  if (patch.shape[1] != cfg.in_channels || patch.shape[2] != cfg.patch ||
      patch.shape[3] != cfg.patch || patch.shape[4] != cfg.patch)
    throw DimensionError("forward: patch shape " + shape_str(patch.shape) +
                         " does not match config (channels " +
                         std::to_string(cfg.in_channels) + ", extent " +
                         std::to_string(cfg.patch) + ")");
  EvalCtx<S> ctx{&store, &cfg};
  auto out = run_network(ctx, std::make_shared<Tensor<S>>(patch));
  return std::move(*out);
}

/// Training forward pass on an existing graph; returns the probability node.
template <typename S>
GId<S> forward_train(Graph<S>& g, const ModelConfig& cfg, ParamStore<S>& store, GId<S> input,
                     std::map<std::string, GId<S>>* param_ids_out = nullptr) {
  GraphCtx<S> ctx{&g, &store, &cfg, /*train=*/true, {}};
  const GId<S> out = run_network(ctx, input);
  if (param_ids_out) *param_ids_out = std::move(ctx.ids);
  return out;
}

}  // namespace isoseg
