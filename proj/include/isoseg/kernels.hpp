#pragma once

// Forward/backward compute kernels for every tensor operation the network
// needs.  Convolutions run through a slab-wise im2col + GEMM fast path
// (Eigen does the matrix products); conv3d_direct is the plain nested-loop
// reference the fast path is tested against.  All reductions accumulate in
// double with a fixed order, so results are bitwise reproducible.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <vector>

#include "isoseg/errors.hpp"
#include "isoseg/rng.hpp"
#include "isoseg/tensor.hpp"

namespace isoseg {

using Dims3 = std::array<std::size_t, 3>;

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRow = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using CMapRow = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;

namespace detail {

struct ConvGeom {
  std::size_t ci, co;
  Dims3 k, s, p;
  Dims3 in;    // input spatial extents
  Dims3 out;   // output spatial extents
  std::size_t taps() const { return k[0] * k[1] * k[2]; }
  std::size_t rows() const { return ci * taps(); }        // im2col K
  std::size_t in_spatial() const { return in[0] * in[1] * in[2]; }
  std::size_t out_spatial() const { return out[0] * out[1] * out[2]; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s,
                                   std::size_t p, std::size_t axis, const char* op) {
  if (in + 2 * p < k)
    throw DimensionError(std::string(op) + ": spatial axis " + std::to_string(axis + 2) +
                         " extent " + std::to_string(in) + " smaller than kernel " +
                         std::to_string(k) + " after padding " + std::to_string(p));
  return (in + 2 * p - k) / s + 1;
}

inline ConvGeom conv_geom(const Shape5& input, const Shape5& kernel, const Dims3& stride,
                          const Dims3& pad, const char* op = "conv3d") {
  for (std::size_t a = 0; a < 3; ++a)
    if (stride[a] == 0)
      throw ParameterError(std::string(op) + ": stride must be positive on axis " +
                           std::to_string(a + 2));
  if (kernel[1] != input[1])
    throw DimensionError(std::string(op) + ": input channels (axis 1) = " +
                         std::to_string(input[1]) + " does not match kernel in-channels = " +
                         std::to_string(kernel[1]));
  ConvGeom g;
  g.co = kernel[0];
  g.ci = kernel[1];
  g.k = {kernel[2], kernel[3], kernel[4]};
  g.s = stride;
  g.p = pad;
  g.in = {input[2], input[3], input[4]};
  for (std::size_t a = 0; a < 3; ++a)
    g.out[a] = conv_out_extent(g.in[a], g.k[a], g.s[a], g.p[a], a, op);
  return g;
}

template <typename S>
ConvGeom conv_geom(const Tensor<S>& input, const Tensor<S>& kernel, const Dims3& stride,
                   const Dims3& pad, const char* op) {
  return conv_geom(input.shape, kernel.shape, stride, pad, op);
}

// im2col over output-z rows [z0, z1).  cols is row-major K x Vslab with
// K = ci*kd*kh*kw, column q = ((z-z0)*Ho + y)*Wo + x.
template <typename S>
void im2col_slab(const S* in, const ConvGeom& g, std::size_t z0, std::size_t z1, S* cols) {
  const std::size_t Ho = g.out[1], Wo = g.out[2];
  const std::size_t D = g.in[0], H = g.in[1], W = g.in[2];
  const std::size_t vslab = (z1 - z0) * Ho * Wo;
  const std::ptrdiff_t pd = static_cast<std::ptrdiff_t>(g.p[0]);
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(g.p[1]);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(g.p[2]);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.ci; ++ci) {
    const S* plane = in + ci * D * H * W;
    for (std::size_t oz = 0; oz < g.k[0]; ++oz)
      for (std::size_t oy = 0; oy < g.k[1]; ++oy)
        for (std::size_t ox = 0; ox < g.k[2]; ++ox, ++r) {
          S* row = cols + r * vslab;
          for (std::size_t z = z0; z < z1; ++z) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z * g.s[0] + oz) - pd;
            for (std::size_t y = 0; y < Ho; ++y, row += Wo) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.s[1] + oy) - ph;
              if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D) || iy < 0 ||
                  iy >= static_cast<std::ptrdiff_t>(H)) {
                std::fill(row, row + Wo, S(0));
                continue;
              }
              const S* src = plane + (static_cast<std::size_t>(iz) * H +
                                      static_cast<std::size_t>(iy)) * W;
              if (g.s[2] == 1) {
                // input x = x_out - pw + ox; copy the valid run, zero the rest
                const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(ox) - pw;
                const std::ptrdiff_t xlo = std::max<std::ptrdiff_t>(0, -shift);
                const std::ptrdiff_t xhi = std::min<std::ptrdiff_t>(
                    static_cast<std::ptrdiff_t>(Wo),
                    static_cast<std::ptrdiff_t>(W) - shift);
                std::ptrdiff_t x = 0;
                for (; x < std::min<std::ptrdiff_t>(xlo, Wo); ++x) row[x] = S(0);
                if (xhi > xlo)
                  std::memcpy(row + xlo, src + xlo + shift, (xhi - xlo) * sizeof(S));
                for (x = std::max<std::ptrdiff_t>(xlo, xhi); x < static_cast<std::ptrdiff_t>(Wo); ++x)
                  row[x] = S(0);
              } else {
                for (std::size_t x = 0; x < Wo; ++x) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.s[2] + ox) - pw;
                  row[x] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? S(0)
                           : src[ix];
                }
              }
            }
          }
        }
  }
}

// Scatter-add transpose of im2col_slab: cols laid out exactly as above are
// accumulated back into `in`.  Sequential, so the accumulation order is fixed.
template <typename S>
void col2im_slab(const S* cols, const ConvGeom& g, std::size_t z0, std::size_t z1, S* in) {
  const std::size_t Ho = g.out[1], Wo = g.out[2];
  const std::size_t D = g.in[0], H = g.in[1], W = g.in[2];
  const std::size_t vslab = (z1 - z0) * Ho * Wo;
  const std::ptrdiff_t pd = static_cast<std::ptrdiff_t>(g.p[0]);
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(g.p[1]);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(g.p[2]);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.ci; ++ci) {
    S* plane = in + ci * D * H * W;
    for (std::size_t oz = 0; oz < g.k[0]; ++oz)
      for (std::size_t oy = 0; oy < g.k[1]; ++oy)
        for (std::size_t ox = 0; ox < g.k[2]; ++ox, ++r) {
          const S* row = cols + r * vslab;
          for (std::size_t z = z0; z < z1; ++z) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z * g.s[0] + oz) - pd;
            for (std::size_t y = 0; y < Ho; ++y, row += Wo) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.s[1] + oy) - ph;
              if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D) || iy < 0 ||
                  iy >= static_cast<std::ptrdiff_t>(H))
                continue;
              S* dst = plane + (static_cast<std::size_t>(iz) * H +
                                static_cast<std::size_t>(iy)) * W;
              for (std::size_t x = 0; x < Wo; ++x) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.s[2] + ox) - pw;
                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) dst[ix] += row[x];
              }
            }
          }
        }
  }
}

// Slab height keeping the im2col buffer near 16 MB.
inline std::size_t slab_rows(const ConvGeom& g) {
  const std::size_t per_row = g.rows() * g.out[1] * g.out[2];
  const std::size_t budget = std::size_t(4) << 20;
  if (per_row == 0) return g.out[0];
  return std::clamp<std::size_t>(budget / per_row, 1, std::max<std::size_t>(g.out[0], 1));
}

inline bool pointwise(const ConvGeom& g) {
  return g.k == Dims3{1, 1, 1} && g.s == Dims3{1, 1, 1} && g.p == Dims3{0, 0, 0};
}

}  // namespace detail

/// 3D cross-correlation.  input (B, Ci, D, H, W), kernel (Co, Ci, kd, kh, kw).
template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& kernel, const Dims3& stride,
                 const Dims3& pad) {
  const auto g = detail::conv_geom(input, kernel, stride, pad, "conv3d");
  const std::size_t B = input.shape[0];
  Tensor<S> out(Shape5{B, g.co, g.out[0], g.out[1], g.out[2]});
  const std::size_t K = g.rows();
  Eigen::Map<const RowMat<S>> Wm(kernel.data.data(), g.co, K);
  if (detail::pointwise(g)) {
    const std::size_t V = g.in_spatial();
    for (std::size_t b = 0; b < B; ++b) {
      CMapRow<S> Xm(input.data.data() + b * g.ci * V, g.ci, V, Eigen::OuterStride<>(V));
      MapRow<S> Om(out.data.data() + b * g.co * V, g.co, V, Eigen::OuterStride<>(V));
      Om.noalias() = Wm * Xm;
    }
    return out;
  }
  const std::size_t nz = detail::slab_rows(g);
  std::vector<S> cols;
  for (std::size_t b = 0; b < B; ++b) {
    const S* in_b = input.data.data() + b * g.ci * g.in_spatial();
    S* out_b = out.data.data() + b * g.co * g.out_spatial();
    for (std::size_t z0 = 0; z0 < g.out[0]; z0 += nz) {
      const std::size_t z1 = std::min(z0 + nz, g.out[0]);
      const std::size_t vslab = (z1 - z0) * g.out[1] * g.out[2];
      cols.resize(K * vslab);
      detail::im2col_slab(in_b, g, z0, z1, cols.data());
      CMapRow<S> Cm(cols.data(), K, vslab, Eigen::OuterStride<>(vslab));
      MapRow<S> Om(out_b + z0 * g.out[1] * g.out[2], g.co, vslab,
                   Eigen::OuterStride<>(g.out_spatial()));
      Om.noalias() = Wm * Cm;
    }
  }
  return out;
}

/// Accumulates conv3d gradients w.r.t. input and/or kernel (either may be null).
template <typename S>
void conv3d_backward(const Tensor<S>& input, const Tensor<S>& kernel, const Dims3& stride,
                     const Dims3& pad, const Tensor<S>& grad_out, Tensor<S>* grad_input,
                     Tensor<S>* grad_kernel) {
  const auto g = detail::conv_geom(input, kernel, stride, pad, "conv3d_backward");
  const std::size_t B = input.shape[0];
  const std::size_t K = g.rows();
  Eigen::Map<const RowMat<S>> Wm(kernel.data.data(), g.co, K);
  if (detail::pointwise(g)) {
    const std::size_t V = g.in_spatial();
    for (std::size_t b = 0; b < B; ++b) {
      CMapRow<S> Xm(input.data.data() + b * g.ci * V, g.ci, V, Eigen::OuterStride<>(V));
      CMapRow<S> Gm(grad_out.data.data() + b * g.co * V, g.co, V, Eigen::OuterStride<>(V));
      if (grad_kernel) {
        Eigen::Map<RowMat<S>> dWm(grad_kernel->data.data(), g.co, K);
        dWm.noalias() += Gm * Xm.transpose();
      }
      if (grad_input) {
        MapRow<S> dXm(grad_input->data.data() + b * g.ci * V, g.ci, V, Eigen::OuterStride<>(V));
        dXm.noalias() += Wm.transpose() * Gm;
      }
    }
    return;
  }
  const std::size_t nz = detail::slab_rows(g);
  std::vector<S> cols, gcols;
  for (std::size_t b = 0; b < B; ++b) {
    const S* in_b = input.data.data() + b * g.ci * g.in_spatial();
    const S* go_b = grad_out.data.data() + b * g.co * g.out_spatial();
    for (std::size_t z0 = 0; z0 < g.out[0]; z0 += nz) {
      const std::size_t z1 = std::min(z0 + nz, g.out[0]);
      const std::size_t vslab = (z1 - z0) * g.out[1] * g.out[2];
      CMapRow<S> Gm(go_b + z0 * g.out[1] * g.out[2], g.co, vslab,
                    Eigen::OuterStride<>(g.out_spatial()));
      if (grad_kernel) {
        cols.resize(K * vslab);
        detail::im2col_slab(in_b, g, z0, z1, cols.data());
        CMapRow<S> Cm(cols.data(), K, vslab, Eigen::OuterStride<>(vslab));
        Eigen::Map<RowMat<S>> dWm(grad_kernel->data.data(), g.co, K);
        dWm.noalias() += Gm * Cm.transpose();
      }
      if (grad_input) {
        gcols.resize(K * vslab);
        MapRow<S> GCm(gcols.data(), K, vslab, Eigen::OuterStride<>(vslab));
        GCm.noalias() = Wm.transpose() * Gm;
        detail::col2im_slab(gcols.data(),
                            g, z0, z1,
                            grad_input->data.data() + b * g.ci * g.in_spatial());
      }
    }
  }
}

/// Reference convolution: plain nested loops, double accumulation per output
/// element.  Slow; used as the correctness oracle for the GEMM path.
template <typename S>
Tensor<S> conv3d_direct(const Tensor<S>& input, const Tensor<S>& kernel, const Dims3& stride,
                        const Dims3& pad) {
  const auto g = detail::conv_geom(input, kernel, stride, pad, "conv3d_direct");
  const std::size_t B = input.shape[0];
  Tensor<S> out(Shape5{B, g.co, g.out[0], g.out[1], g.out[2]});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < g.co; ++co)
      for (std::size_t z = 0; z < g.out[0]; ++z)
        for (std::size_t y = 0; y < g.out[1]; ++y)
          for (std::size_t x = 0; x < g.out[2]; ++x) {
            double acc = 0.0;
            for (std::size_t ci = 0; ci < g.ci; ++ci)
              for (std::size_t oz = 0; oz < g.k[0]; ++oz)
                for (std::size_t oy = 0; oy < g.k[1]; ++oy)
                  for (std::size_t ox = 0; ox < g.k[2]; ++ox) {
                    const std::ptrdiff_t iz =
                        static_cast<std::ptrdiff_t>(z * g.s[0] + oz) - static_cast<std::ptrdiff_t>(g.p[0]);
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(y * g.s[1] + oy) - static_cast<std::ptrdiff_t>(g.p[1]);
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(x * g.s[2] + ox) - static_cast<std::ptrdiff_t>(g.p[2]);
                    if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.in[0]) || iy < 0 ||
                        iy >= static_cast<std::ptrdiff_t>(g.in[1]) || ix < 0 ||
                        ix >= static_cast<std::ptrdiff_t>(g.in[2]))
                      continue;
                    acc += static_cast<double>(input.at(b, ci, iz, iy, ix)) *
                           static_cast<double>(kernel.at(co, ci, oz, oy, ox));
                  }
            out.at(b, co, z, y, x) = static_cast<S>(acc);
          }
  return out;
}

/// Transposed 3D convolution.  input (B, Ci, ...), kernel (Ci, Co, kd, kh, kw);
/// output spatial extent = (in - 1) * stride + k - 2 * pad.
template <typename S>
Tensor<S> conv_transpose3d(const Tensor<S>& input, const Tensor<S>& kernel, const Dims3& stride,
                           const Dims3& pad = {0, 0, 0}) {
  if (kernel.shape[0] != input.shape[1])
    throw DimensionError("conv_transpose3d: input channels (axis 1) = " +
                         std::to_string(input.shape[1]) + " does not match kernel in-channels = " +
                         std::to_string(kernel.shape[0]));
  detail::ConvGeom g;  // geometry of the equivalent forward conv: out <-> in swapped
  g.ci = kernel.shape[1];  // = Co of the transpose conv
  g.co = kernel.shape[0];
  g.k = {kernel.shape[2], kernel.shape[3], kernel.shape[4]};
  g.s = stride;
  g.p = pad;
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t ext = (input.shape[2 + a] - 1) * stride[a] + g.k[a];
    if (ext < 2 * pad[a] + 1)
      throw DimensionError("conv_transpose3d: non-positive output extent on axis " +
                           std::to_string(a + 2));
    g.in[a] = ext - 2 * pad[a];
  }
  g.out = {input.shape[2], input.shape[3], input.shape[4]};
  const std::size_t B = input.shape[0];
  const std::size_t Co = kernel.shape[1];
  Tensor<S> out(Shape5{B, Co, g.in[0], g.in[1], g.in[2]});
  const std::size_t K = Co * g.taps();
  Eigen::Map<const RowMat<S>> Wm(kernel.data.data(), kernel.shape[0], K);
  const std::size_t nz = detail::slab_rows(g);
  std::vector<S> cols;
  // re-aim the scatter geometry at the transpose-conv output
  detail::ConvGeom gs = g;
  gs.ci = Co;
  for (std::size_t b = 0; b < B; ++b) {
    const S* in_b = input.data.data() + b * input.shape[1] * input.spatial();
    S* out_b = out.data.data() + b * Co * out.spatial();
    for (std::size_t z0 = 0; z0 < g.out[0]; z0 += nz) {
      const std::size_t z1 = std::min(z0 + nz, g.out[0]);
      const std::size_t vslab = (z1 - z0) * g.out[1] * g.out[2];
      cols.resize(K * vslab);
      CMapRow<S> Xm(in_b + z0 * g.out[1] * g.out[2], input.shape[1], vslab,
                    Eigen::OuterStride<>(input.spatial()));
      MapRow<S> Cm(cols.data(), K, vslab, Eigen::OuterStride<>(vslab));
      Cm.noalias() = Wm.transpose() * Xm;
      detail::col2im_slab(cols.data(), gs, z0, z1, out_b);
    }
  }
  return out;
}

template <typename S>
void conv_transpose3d_backward(const Tensor<S>& input, const Tensor<S>& kernel,
                               const Dims3& stride, const Dims3& pad, const Tensor<S>& grad_out,
                               Tensor<S>* grad_input, Tensor<S>* grad_kernel) {
  if (grad_input) {
    // d/d_input of the scatter is a gather: an ordinary conv of grad_out with
    // the same kernel (its (Ci, Co) layout already matches conv3d's (Co, Ci)).
    Tensor<S> gi = conv3d(grad_out, kernel, stride, pad);
    for (std::size_t i = 0; i < gi.data.size(); ++i) grad_input->data[i] += gi.data[i];
  }
  if (grad_kernel) {
    detail::ConvGeom g;
    g.ci = kernel.shape[1];
    g.co = kernel.shape[0];
    g.k = {kernel.shape[2], kernel.shape[3], kernel.shape[4]};
    g.s = stride;
    g.p = pad;
    g.in = {grad_out.shape[2], grad_out.shape[3], grad_out.shape[4]};
    g.out = {input.shape[2], input.shape[3], input.shape[4]};
    detail::ConvGeom gc = g;
    gc.ci = kernel.shape[1];  // im2col over grad_out channels = Co
    const std::size_t B = input.shape[0];
    const std::size_t K = kernel.shape[1] * g.taps();
    const std::size_t nz = detail::slab_rows(gc);
    std::vector<S> cols;
    Eigen::Map<RowMat<S>> dWm(grad_kernel->data.data(), kernel.shape[0], K);
    for (std::size_t b = 0; b < B; ++b) {
      const S* go_b = grad_out.data.data() + b * grad_out.shape[1] * grad_out.spatial();
      const S* in_b = input.data.data() + b * input.shape[1] * input.spatial();
      for (std::size_t z0 = 0; z0 < g.out[0]; z0 += nz) {
        const std::size_t z1 = std::min(z0 + nz, g.out[0]);
        const std::size_t vslab = (z1 - z0) * g.out[1] * g.out[2];
        cols.resize(K * vslab);
        detail::im2col_slab(go_b, gc, z0, z1, cols.data());
        CMapRow<S> Cm(cols.data(), K, vslab, Eigen::OuterStride<>(vslab));
        CMapRow<S> Xm(in_b + z0 * g.out[1] * g.out[2], input.shape[1], vslab,
                      Eigen::OuterStride<>(input.spatial()));
        dWm.noalias() += Xm * Cm.transpose();
      }
    }
  }
}

/// 2x2x2 max pooling with stride 2.  Ties break to the first index in scan
/// order.  `argmax`, when given, receives the flat data index of each winner.
template <typename S>
Tensor<S> max_pool3d(const Tensor<S>& input, std::vector<std::uint64_t>* argmax = nullptr) {
  for (std::size_t a = 2; a < 5; ++a)
    if (input.shape[a] % 2 != 0)
      throw DimensionError("max_pool3d: odd spatial extent " + std::to_string(input.shape[a]) +
                           " on axis " + std::to_string(a));
  const std::size_t B = input.shape[0], C = input.shape[1];
  const std::size_t D = input.shape[2], H = input.shape[3], W = input.shape[4];
  Tensor<S> out(Shape5{B, C, D / 2, H / 2, W / 2});
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t z = 0; z < D; z += 2)
        for (std::size_t y = 0; y < H; y += 2)
          for (std::size_t x = 0; x < W; x += 2, ++o) {
            S best = input.at(b, c, z, y, x);
            std::size_t best_i = input.index(b, c, z, y, x);
            for (std::size_t dz = 0; dz < 2; ++dz)
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) {
                  const S v = input.at(b, c, z + dz, y + dy, x + dx);
                  if (v > best) {
                    best = v;
                    best_i = input.index(b, c, z + dz, y + dy, x + dx);
                  }
                }
            out.data[o] = best;
            if (argmax) (*argmax)[o] = best_i;
          }
  return out;
}

template <typename S>
void max_pool3d_backward(const std::vector<std::uint64_t>& argmax, const Tensor<S>& grad_out,
                         Tensor<S>& grad_input) {
  for (std::size_t o = 0; o < grad_out.size(); ++o)
    grad_input.data[argmax[o]] += grad_out.data[o];
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename S>
struct BnSaved {
  std::vector<double> mean, invstd;  // per channel, from the train-mode batch
};

// Running statistics are stored in the parameter scalar type (so checkpoints
// round-trip bit-exactly); all accumulation happens in double.
template <typename S>
Tensor<S> batch_norm_train(const Tensor<S>& x, const std::vector<S>& gamma,
                           const std::vector<S>& beta, double eps, double momentum,
                           std::vector<S>& run_mean, std::vector<S>& run_var,
                           BnSaved<S>& saved) {
  const std::size_t C = x.shape[1];
  if (gamma.size() != C || beta.size() != C || run_mean.size() != C || run_var.size() != C)
    throw DimensionError("batch_norm: gamma/beta/running-stat length does not match channel count (axis 1) = " +
                         std::to_string(C));
  if (eps <= 0) throw ParameterError("batch_norm: eps must be > 0");
  const std::size_t B = x.shape[0], V = x.spatial();
  const std::size_t n = B * V;
  saved.mean.assign(C, 0.0);
  saved.invstd.assign(C, 0.0);
  Tensor<S> y(x.shape);
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const S* p = x.data.data() + (b * C + c) * V;
      for (std::size_t i = 0; i < V; ++i) {
        const double v = static_cast<double>(p[i]);
        sum += v;
        sq += v * v;
      }
    }
    const double mean = sum / static_cast<double>(n);
    double var = sq / static_cast<double>(n) - mean * mean;
    if (var < 0) var = 0;  // cancellation guard
    const double invstd = 1.0 / std::sqrt(var + eps);
    saved.mean[c] = mean;
    saved.invstd[c] = invstd;
    run_mean[c] = static_cast<S>(momentum * static_cast<double>(run_mean[c]) +
                                 (1.0 - momentum) * mean);
    run_var[c] = static_cast<S>(momentum * static_cast<double>(run_var[c]) +
                                (1.0 - momentum) * var);
    const double gc = static_cast<double>(gamma[c]), bc = static_cast<double>(beta[c]);
    for (std::size_t b = 0; b < B; ++b) {
      const S* p = x.data.data() + (b * C + c) * V;
      S* q = y.data.data() + (b * C + c) * V;
      for (std::size_t i = 0; i < V; ++i)
        q[i] = static_cast<S>((static_cast<double>(p[i]) - mean) * invstd * gc + bc);
    }
  }
  return y;
}

template <typename S>
Tensor<S> batch_norm_eval(const Tensor<S>& x, const std::vector<S>& gamma,
                          const std::vector<S>& beta, double eps,
                          const std::vector<S>& run_mean, const std::vector<S>& run_var) {
  const std::size_t C = x.shape[1];
  if (gamma.size() != C || beta.size() != C || run_mean.size() != C || run_var.size() != C)
    throw DimensionError("batch_norm: gamma/beta/running-stat length does not match channel count (axis 1) = " +
                         std::to_string(C));
  if (eps <= 0) throw ParameterError("batch_norm: eps must be > 0");
  const std::size_t B = x.shape[0], V = x.spatial();
  Tensor<S> y(x.shape);
  for (std::size_t c = 0; c < C; ++c) {
    const double invstd = 1.0 / std::sqrt(static_cast<double>(run_var[c]) + eps);
    const double scale = static_cast<double>(gamma[c]) * invstd;
    const double shift = static_cast<double>(beta[c]) - static_cast<double>(run_mean[c]) * scale;
    for (std::size_t b = 0; b < B; ++b) {
      const S* p = x.data.data() + (b * C + c) * V;
      S* q = y.data.data() + (b * C + c) * V;
      for (std::size_t i = 0; i < V; ++i)
        q[i] = static_cast<S>(static_cast<double>(p[i]) * scale + shift);
    }
  }
  return y;
}

template <typename S>
void batch_norm_backward(const Tensor<S>& x, const std::vector<S>& gamma,
                         const BnSaved<S>& saved, const Tensor<S>& grad_out,
                         Tensor<S>* grad_x, std::vector<S>* grad_gamma,
                         std::vector<S>* grad_beta) {
  const std::size_t B = x.shape[0], C = x.shape[1], V = x.spatial();
  const double n = static_cast<double>(B * V);
  for (std::size_t c = 0; c < C; ++c) {
    const double mean = saved.mean[c], invstd = saved.invstd[c];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const S* px = x.data.data() + (b * C + c) * V;
      const S* pg = grad_out.data.data() + (b * C + c) * V;
      for (std::size_t i = 0; i < V; ++i) {
        const double dy = static_cast<double>(pg[i]);
        const double xhat = (static_cast<double>(px[i]) - mean) * invstd;
        sum_dy += dy;
        sum_dy_xhat += dy * xhat;
      }
    }
    if (grad_gamma) (*grad_gamma)[c] += static_cast<S>(sum_dy_xhat);
    if (grad_beta) (*grad_beta)[c] += static_cast<S>(sum_dy);
    if (grad_x) {
      const double gc = static_cast<double>(gamma[c]);
      for (std::size_t b = 0; b < B; ++b) {
        const S* px = x.data.data() + (b * C + c) * V;
        const S* pg = grad_out.data.data() + (b * C + c) * V;
        S* pd = grad_x->data.data() + (b * C + c) * V;
        for (std::size_t i = 0; i < V; ++i) {
          const double dy = static_cast<double>(pg[i]);
          const double xhat = (static_cast<double>(px[i]) - mean) * invstd;
          pd[i] += static_cast<S>(gc * invstd * (dy - sum_dy / n - xhat * sum_dy_xhat / n));
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Activations and elementwise ops

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > S(0) ? x.data[i] : S(0);
  return y;
}

template <typename S>
S stable_sigmoid(S v) {
  if (v >= S(0)) {
    const S e = std::exp(-v);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(v);
  return e / (S(1) + e);
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = stable_sigmoid(x.data[i]);
  return y;
}

/// Softmax along `axis`, stabilized by max subtraction.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  if (axis >= 5) throw ParameterError("softmax: axis " + std::to_string(axis) + " out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.shape[a];
  for (std::size_t a = axis + 1; a < 5; ++a) inner *= x.shape[a];
  const std::size_t n = x.shape[axis];
  Tensor<S> y(x.shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      S mx = x.data[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.data[base + j * inner]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const S e = std::exp(x.data[base + j * inner] - mx);
        y.data[base + j * inner] = e;
        sum += static_cast<double>(e);
      }
      for (std::size_t j = 0; j < n; ++j)
        y.data[base + j * inner] = static_cast<S>(static_cast<double>(y.data[base + j * inner]) / sum);
    }
  return y;
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate).  The caller keeps the mask for backward.
template <typename S>
Tensor<S> dropout_train(const Tensor<S>& x, double rate, Rng& rng, std::vector<std::uint8_t>& mask) {
  if (rate < 0.0 || rate >= 1.0)
    throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  mask.resize(x.size());
  Tensor<S> y(x.shape);
  const S scale = static_cast<S>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool keep = rng.uniform() >= rate;
    mask[i] = keep ? 1 : 0;
    y.data[i] = keep ? x.data[i] * scale : S(0);
  }
  return y;
}

template <typename S>
Tensor<S> concat_channels(const std::vector<const Tensor<S>*>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: empty input list");
  const Tensor<S>& first = *xs[0];
  std::size_t ctotal = 0;
  for (const Tensor<S>* t : xs) {
    for (std::size_t a : {std::size_t(0), std::size_t(2), std::size_t(3), std::size_t(4)})
      if (t->shape[a] != first.shape[a])
        throw DimensionError("concat_channels: extent mismatch on axis " + std::to_string(a) +
                             " (" + std::to_string(t->shape[a]) + " vs " +
                             std::to_string(first.shape[a]) + ")");
    ctotal += t->shape[1];
  }
  Tensor<S> out(Shape5{first.shape[0], ctotal, first.shape[2], first.shape[3], first.shape[4]});
  const std::size_t V = first.spatial();
  for (std::size_t b = 0; b < first.shape[0]; ++b) {
    std::size_t c0 = 0;
    for (const Tensor<S>* t : xs) {
      std::memcpy(out.data.data() + (b * ctotal + c0) * V,
                  t->data.data() + b * t->shape[1] * V, t->shape[1] * V * sizeof(S));
      c0 += t->shape[1];
    }
  }
  return out;
}

template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, std::size_t c0, std::size_t c1) {
  if (c0 >= c1)
    throw ParameterError("slice_channels: empty range [" + std::to_string(c0) + ", " +
                         std::to_string(c1) + ")");
  if (c1 > x.shape[1])
    throw DimensionError("slice_channels: range [" + std::to_string(c0) + ", " +
                         std::to_string(c1) + ") exceeds " + std::to_string(x.shape[1]) +
                         " channels (axis 1)");
  Tensor<S> out(Shape5{x.shape[0], c1 - c0, x.shape[2], x.shape[3], x.shape[4]});
  const std::size_t V = x.spatial();
  for (std::size_t b = 0; b < x.shape[0]; ++b)
    std::memcpy(out.data.data() + b * (c1 - c0) * V, x.data.data() + (b * x.shape[1] + c0) * V,
                (c1 - c0) * V * sizeof(S));
  return out;
}

/// Spatial window copy; the inverse scatter is the backward pass.
template <typename S>
Tensor<S> crop3d(const Tensor<S>& x, const Dims3& off, const Dims3& extent) {
  for (std::size_t a = 0; a < 3; ++a)
    if (off[a] + extent[a] > x.shape[2 + a] || extent[a] == 0)
      throw DimensionError("crop3d: window [" + std::to_string(off[a]) + ", " +
                           std::to_string(off[a] + extent[a]) + ") exceeds extent " +
                           std::to_string(x.shape[2 + a]) + " on axis " + std::to_string(2 + a));
  Tensor<S> y(Shape5{x.shape[0], x.shape[1], extent[0], extent[1], extent[2]});
  for (std::size_t b = 0; b < x.shape[0]; ++b)
    for (std::size_t c = 0; c < x.shape[1]; ++c)
      for (std::size_t z = 0; z < extent[0]; ++z)
        for (std::size_t yy = 0; yy < extent[1]; ++yy)
          std::memcpy(&y.at(b, c, z, yy, 0), &x.at(b, c, z + off[0], yy + off[1], off[2]),
                      extent[2] * sizeof(S));
  return y;
}

template <typename S>
double sum_all(const Tensor<S>& x) {
  double acc = 0.0;
  for (const S& v : x.data) acc += static_cast<double>(v);
  return acc;
}

}  // namespace isoseg
