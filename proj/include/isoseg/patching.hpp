#pragma once

// Overlapping-patch planning, 180-degree rotation augmentation, and
// spline-weighted soft-voting fusion.
//
// Patches overlap 50% (stride = extent/2) with the last origin per axis
// clamped so the final patch touches the border.  Each spatial patch is
// predicted under 4 transforms (identity + one 180-degree rotation about each
// axis), giving 8 x 4 = 32 predictions per interior voxel on an aligned grid.
// Per-patch weights are a separable quadratic B-spline profile peaked at the
// patch center:
//   B2(u) = 3/4 - u^2        for |u| <= 1/2
//         = (|u| - 3/2)^2/2  for 1/2 < |u| <= 3/2
// sampled at u = 1.5*(2t - (e-1))/(e-1), normalized to peak 1 and floored at
// 1e-3 per axis (faces land exactly on the B-spline root, so the floor keeps
// every contribution positive).  Accumulation is double precision in a fixed
// order, so fusion is bitwise reproducible.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "isoseg/tensor.hpp"
#include "isoseg/volume.hpp"

namespace isoseg {

struct PatchGrid {
  Dims3 volume_dims{0, 0, 0};
  Dims3 extent{0, 0, 0};
  Dims3 stride{0, 0, 0};
  std::vector<Dims3> origins;  // z,y,x; z-major planning order
};

/// 50%-overlap grid: per-axis origins at multiples of extent/2 with the last
/// clamped to volume-extent.  Patches larger than the volume are rejected
/// (zero-pad the volume first, then crop the fused output).
inline PatchGrid plan_patch_grid(const Dims3& volume, const Dims3& extent) {
  PatchGrid grid;
  grid.volume_dims = volume;
  grid.extent = extent;
  std::array<std::vector<std::size_t>, 3> axis_origins;
  for (std::size_t a = 0; a < 3; ++a) {
    if (extent[a] < 1)
      throw ParameterError("plan_patch_grid: patch extent must be >= 1");
    if (extent[a] > volume[a])
      throw DimensionError("plan_patch_grid: patch " + dims_str(extent) + " exceeds volume " +
                           dims_str(volume) + "; zero-pad the volume to at least the patch size");
    grid.stride[a] = std::max<std::size_t>(1, extent[a] / 2);
    const std::size_t last = volume[a] - extent[a];
    for (std::size_t o = 0;; o += grid.stride[a]) {
      if (o >= last) {
        axis_origins[a].push_back(last);
        break;
      }
      axis_origins[a].push_back(o);
    }
  }
  for (std::size_t z : axis_origins[0])
    for (std::size_t y : axis_origins[1])
      for (std::size_t x : axis_origins[2]) grid.origins.push_back({z, y, x});
  return grid;
}

struct PatchWeights {
  Dims3 extent{0, 0, 0};
  std::array<std::vector<double>, 3> axis;  // z, y, x profiles, each peaked at 1

  double at(std::size_t z, std::size_t y, std::size_t x) const {
    return axis[0][z] * axis[1][y] * axis[2][x];
  }
};

inline constexpr double kWeightFloor = 1e-3;

/// Separable quadratic B-spline weights over one patch.
inline PatchWeights spline_weights(const Dims3& extent) {
  auto b2 = [](double u) {
    const double a = std::abs(u);
    if (a <= 0.5) return 0.75 - a * a;
    if (a <= 1.5) return 0.5 * (a - 1.5) * (a - 1.5);
    return 0.0;
  };
  PatchWeights w;
  w.extent = extent;
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t e = extent[a];
    if (e < 2)
      throw ParameterError("spline_weights: extent must be >= 2, got " + std::to_string(e));
    std::vector<double>& prof = w.axis[a];
    prof.resize(e);
    double peak = 0.0;
    for (std::size_t t = 0; t < e; ++t) {
      const double u = 1.5 * (2.0 * static_cast<double>(t) - static_cast<double>(e - 1)) /
                       static_cast<double>(e - 1);
      prof[t] = b2(u);
      peak = std::max(peak, prof[t]);
    }
    if (peak == 0.0) {
      // extent 2 samples only the spline roots (u = +-1.5); weight uniformly
      std::fill(prof.begin(), prof.end(), 1.0);
      continue;
    }
    for (double& v : prof) v = std::max(v / peak, kWeightFloor);
  }
  return w;
}

/// 180-degree rotation about one axis: reverses the two orthogonal spatial
/// axes (exact index remapping, self-inverse).
template <typename S>
Tensor<S> rotate180(const Tensor<S>& t, std::size_t axis) {
  if (axis > 2)
    throw ParameterError("rotate180: axis must be 0 (z), 1 (y) or 2 (x), got " +
                         std::to_string(axis));
  const std::size_t B = t.shape[0], C = t.shape[1], D = t.shape[2], H = t.shape[3],
                    W = t.shape[4];
  std::array<bool, 3> flip{axis != 0, axis != 1, axis != 2};
  Tensor<S> out(t.shape);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t z = 0; z < D; ++z) {
        const std::size_t sz = flip[0] ? D - 1 - z : z;
        for (std::size_t y = 0; y < H; ++y) {
          const std::size_t sy = flip[1] ? H - 1 - y : y;
          for (std::size_t x = 0; x < W; ++x) {
            const std::size_t sx = flip[2] ? W - 1 - x : x;
            out.data[(((b * C + c) * D + z) * H + y) * W + x] =
                t.data[(((b * C + c) * D + sz) * H + sy) * W + sx];
          }
        }
      }
  return out;
}

/// Transform ids: 0 = identity, 1..3 = rotate180 about z, y, x.  Every
/// transform is its own inverse.
inline constexpr std::size_t kNumAugmentations = 4;

template <typename S>
Tensor<S> apply_transform(const Tensor<S>& t, std::size_t transform_id) {
  if (transform_id >= kNumAugmentations)
    throw ParameterError("apply_transform: transform id must be < 4, got " +
                         std::to_string(transform_id));
  if (transform_id == 0) return t;
  return rotate180(t, transform_id - 1);
}

/// Copy one patch out of a channel-major volume into a {1,C,d,h,w} tensor.
template <typename S>
Tensor<S> extract_patch(const Volume<S>& vol, const Dims3& origin, const Dims3& extent) {
  for (std::size_t a = 0; a < 3; ++a)
    if (origin[a] + extent[a] > vol.dims[a])
      throw DimensionError("extract_patch: origin " + dims_str(origin) + " + extent " +
                           dims_str(extent) + " exceeds volume " + dims_str(vol.dims));
  Tensor<S> out(Shape5{1, vol.channels, extent[0], extent[1], extent[2]});
  for (std::size_t c = 0; c < vol.channels; ++c)
    for (std::size_t z = 0; z < extent[0]; ++z)
      for (std::size_t y = 0; y < extent[1]; ++y) {
        const S* src = &vol.data[vol.index(c, origin[0] + z, origin[1] + y, origin[2])];
        S* dst = &out.data[((c * extent[0] + z) * extent[1] + y) * extent[2]];
        std::copy(src, src + extent[2], dst);
      }
  return out;
}

/// Weighted soft-voting accumulator.  Contributions must already be mapped
/// back to the volume frame (un-rotated); `add` applies the spline weight of
/// the patch-local position.  All sums are double precision.
template <typename S>
class FusionAccumulator {
 public:
  FusionAccumulator(const Dims3& dims, std::size_t classes)
      : dims_(dims),
        classes_(classes),
        psum_(classes * dims[0] * dims[1] * dims[2], 0.0),
        wsum_(dims[0] * dims[1] * dims[2], 0.0),
        contributions_(dims[0] * dims[1] * dims[2], 0) {
    if (classes == 0) throw ParameterError("fusion: needs at least one class");
  }

  void add(const Dims3& origin, const Tensor<S>& probs, const PatchWeights& weights) {
    const Dims3& e = weights.extent;
    if (probs.shape[0] != 1 || probs.shape[1] != classes_ || probs.shape[2] != e[0] ||
        probs.shape[3] != e[1] || probs.shape[4] != e[2])
      throw DimensionError("fusion: prediction shape " + shape_str(probs.shape) +
                           " does not match " + std::to_string(classes_) + " classes, patch " +
                           dims_str(e));
    for (std::size_t a = 0; a < 3; ++a)
      if (origin[a] + e[a] > dims_[a])
        throw DimensionError("fusion: patch at " + dims_str(origin) + " exceeds volume " +
                             dims_str(dims_));
    const std::size_t V = dims_[0] * dims_[1] * dims_[2];
    for (std::size_t z = 0; z < e[0]; ++z)
      for (std::size_t y = 0; y < e[1]; ++y)
        for (std::size_t x = 0; x < e[2]; ++x) {
          const double w = weights.at(z, y, x);
          const std::size_t v =
              ((origin[0] + z) * dims_[1] + origin[1] + y) * dims_[2] + origin[2] + x;
          wsum_[v] += w;
          ++contributions_[v];
          for (std::size_t c = 0; c < classes_; ++c)
            psum_[c * V + v] +=
                w * static_cast<double>(probs.data[((c * e[0] + z) * e[1] + y) * e[2] + x]);
        }
  }

  /// Normalized fused probabilities; an uncovered voxel violates the grid
  /// coverage invariant.
  Volume<S> finalize() const {
    const std::size_t V = wsum_.size();
    Volume<S> out(dims_, classes_);
    for (std::size_t v = 0; v < V; ++v)
      if (wsum_[v] <= 0.0)
        throw InternalError("fusion: voxel with zero accumulated weight (coverage hole) at " +
                            std::to_string(v));
    for (std::size_t c = 0; c < classes_; ++c)
      for (std::size_t v = 0; v < V; ++v)
        out.data[c * V + v] = static_cast<S>(psum_[c * V + v] / wsum_[v]);
    return out;
  }

  const std::vector<std::uint32_t>& contributions() const { return contributions_; }
  const std::vector<double>& weight_sum() const { return wsum_; }

 private:
  Dims3 dims_;
  std::size_t classes_;
  std::vector<double> psum_;
  std::vector<double> wsum_;
  std::vector<std::uint32_t> contributions_;
};

template <typename S>
struct PatchPrediction {
  Dims3 origin{0, 0, 0};
  std::size_t transform_id = 0;  // transform that was applied to the input
  Tensor<S> probs;               // model output, still in the transformed frame
};

/// Un-rotates each prediction and fuses in the given (fixed) order.
template <typename S>
Volume<S> fuse(const PatchGrid& grid, const std::vector<PatchPrediction<S>>& predictions,
               std::size_t classes) {
  const PatchWeights weights = spline_weights(grid.extent);
  FusionAccumulator<S> acc(grid.volume_dims, classes);
  for (const auto& pred : predictions)
    acc.add(pred.origin, apply_transform(pred.probs, pred.transform_id), weights);
  return acc.finalize();
}

}  // namespace isoseg
