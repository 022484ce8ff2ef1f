#pragma once

// Hard-count segmentation metrics: Dice, Hausdorff distance, average surface
// distance, sensitivity/specificity, and a paired two-sided t-test.
//
// Surface conventions (documented so numbers are reproducible): a boundary
// voxel is a foreground voxel with at least one 6-connected background
// neighbor, where the volume faces count as background.  Distances are
// Euclidean between voxel centers, scaled per axis by the spacing.  The fast
// path is an exact squared distance transform (lower-envelope-of-parabolas,
// one pass per axis); with unit spacing every squared distance is an integer
// and the result is bit-identical to brute force.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "isoseg/volume.hpp"

namespace isoseg {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::uint64_t total() const { return tp + fp + fn + tn; }
};

/// Nonzero voxels count as foreground in both masks.
inline ConfusionCounts confusion(const MaskVolume& pred, const MaskVolume& truth) {
  require_same_dims(pred, truth, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, t = truth.data[i] != 0;
    if (p && t)
      ++c.tp;
    else if (p && !t)
      ++c.fp;
    else if (!p && t)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

/// 2TP/(2TP+FP+FN); both masks empty -> 1, exactly one empty -> 0.
inline double dsc(const MaskVolume& pred, const MaskVolume& truth) {
  const ConfusionCounts c = confusion(pred, truth);
  const std::uint64_t pred_fg = c.tp + c.fp, truth_fg = c.tp + c.fn;
  if (pred_fg == 0 && truth_fg == 0) return 1.0;
  if (pred_fg == 0 || truth_fg == 0) return 0.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
}

/// (TP/(TP+FN), TN/(TN+FP)); an empty denominator is vacuously 1.
inline std::pair<double, double> sensitivity_specificity(const MaskVolume& pred,
                                                         const MaskVolume& truth) {
  const ConfusionCounts c = confusion(pred, truth);
  const double sens = c.tp + c.fn == 0
                          ? 1.0
                          : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  const double spec = c.tn + c.fp == 0
                          ? 1.0
                          : static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return {sens, spec};
}

/// Foreground voxels with a 6-connected background neighbor, in z,y,x scan
/// order.  Non-empty whenever the mask is non-empty (faces count as outside).
inline std::vector<std::array<std::size_t, 3>> boundary_voxels(const MaskVolume& mask) {
  std::vector<std::array<std::size_t, 3>> out;
  const auto& d = mask.dims;
  auto fg = [&](std::ptrdiff_t z, std::ptrdiff_t y, std::ptrdiff_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= static_cast<std::ptrdiff_t>(d[0]) ||
        y >= static_cast<std::ptrdiff_t>(d[1]) || x >= static_cast<std::ptrdiff_t>(d[2]))
      return false;
    return mask.data[(static_cast<std::size_t>(z) * d[1] + static_cast<std::size_t>(y)) * d[2] +
                     static_cast<std::size_t>(x)] != 0;
  };
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        if (!fg(static_cast<std::ptrdiff_t>(z), static_cast<std::ptrdiff_t>(y),
                static_cast<std::ptrdiff_t>(x)))
          continue;
        const auto zi = static_cast<std::ptrdiff_t>(z), yi = static_cast<std::ptrdiff_t>(y),
                   xi = static_cast<std::ptrdiff_t>(x);
        if (!fg(zi - 1, yi, xi) || !fg(zi + 1, yi, xi) || !fg(zi, yi - 1, xi) ||
            !fg(zi, yi + 1, xi) || !fg(zi, yi, xi - 1) || !fg(zi, yi, xi + 1))
          out.push_back({z, y, x});
      }
  return out;
}

namespace metricdetail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// 1D squared distance transform along coordinates {0, s, 2s, ...}.
/// Infinite entries are parabolas at +inf and never enter the envelope.
inline void dt1d(const std::vector<double>& f, double s, std::vector<double>& out) {
  const std::size_t n = f.size();
  out.assign(n, kInf);
  static thread_local std::vector<std::size_t> v;
  static thread_local std::vector<double> z;
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::ptrdiff_t k = -1;
  auto intersect = [&](std::size_t q, std::size_t r) {
    const double xq = static_cast<double>(q) * s, xr = static_cast<double>(r) * s;
    return ((f[q] + xq * xq) - (f[r] + xr * xr)) / (2.0 * xq - 2.0 * xr);
  };
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double cut = intersect(q, v[static_cast<std::size_t>(k)]);
    while (cut <= z[static_cast<std::size_t>(k)]) {
      --k;
      cut = intersect(q, v[static_cast<std::size_t>(k)]);
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = cut;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  if (k < 0) return;  // no finite parabola on this line
  std::size_t j = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const double xp = static_cast<double>(p) * s;
    while (z[j + 1] < xp) ++j;
    const double dx = xp - static_cast<double>(v[j]) * s;
    out[p] = dx * dx + f[v[j]];
  }
}

inline void check_spacing(const Spacing3& s) {
  for (double v : s)
    if (!(v > 0.0))
      throw ParameterError("metrics: spacing components must be > 0, got " + std::to_string(v));
}

}  // namespace metricdetail

/// Exact squared Euclidean distance to the nearest nonzero seed voxel,
/// composed one axis at a time.  All-zero seeds leave the volume at +inf.
inline Volume<double> squared_edt(const MaskVolume& seeds, const Spacing3& spacing) {
  metricdetail::check_spacing(spacing);
  const auto& d = seeds.dims;
  Volume<double> dist(d, 1);
  dist.spacing = spacing;
  for (std::size_t i = 0; i < seeds.data.size(); ++i)
    dist.data[i] = seeds.data[i] != 0 ? 0.0 : metricdetail::kInf;

  std::vector<double> line, out;
  // x axis
  line.resize(d[2]);
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y) {
      double* row = &dist.data[(z * d[1] + y) * d[2]];
      std::copy(row, row + d[2], line.begin());
      metricdetail::dt1d(line, spacing[2], out);
      std::copy(out.begin(), out.end(), row);
    }
  // y axis
  line.resize(d[1]);
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t x = 0; x < d[2]; ++x) {
      for (std::size_t y = 0; y < d[1]; ++y) line[y] = dist.data[(z * d[1] + y) * d[2] + x];
      metricdetail::dt1d(line, spacing[1], out);
      for (std::size_t y = 0; y < d[1]; ++y) dist.data[(z * d[1] + y) * d[2] + x] = out[y];
    }
  // z axis
  line.resize(d[0]);
  for (std::size_t y = 0; y < d[1]; ++y)
    for (std::size_t x = 0; x < d[2]; ++x) {
      for (std::size_t z = 0; z < d[0]; ++z) line[z] = dist.data[(z * d[1] + y) * d[2] + x];
      metricdetail::dt1d(line, spacing[0], out);
      for (std::size_t z = 0; z < d[0]; ++z) dist.data[(z * d[1] + y) * d[2] + x] = out[z];
    }
  return dist;
}

struct SurfaceDistanceStats {
  std::vector<std::array<std::size_t, 3>> boundary_pred, boundary_truth;
  std::vector<double> pred_to_truth;  // d(p, boundary_truth) for each p, same order
  std::vector<double> truth_to_pred;  // d(q, boundary_pred) for each q
};

inline SurfaceDistanceStats surface_distances(const MaskVolume& pred, const MaskVolume& truth,
                                              const Spacing3& spacing) {
  require_same_dims(pred, truth, "surface_distances");
  metricdetail::check_spacing(spacing);
  SurfaceDistanceStats st;
  st.boundary_pred = boundary_voxels(pred);
  st.boundary_truth = boundary_voxels(truth);
  if (st.boundary_pred.empty())
    throw DegenerateError("surface_distances: empty prediction mask (distance undefined)");
  if (st.boundary_truth.empty())
    throw DegenerateError("surface_distances: empty reference mask (distance undefined)");

  auto seed_mask = [&](const std::vector<std::array<std::size_t, 3>>& pts) {
    MaskVolume m(pred.dims, 1);
    for (const auto& p : pts) m.data[(p[0] * pred.dims[1] + p[1]) * pred.dims[2] + p[2]] = 1;
    return m;
  };
  const Volume<double> to_truth = squared_edt(seed_mask(st.boundary_truth), spacing);
  const Volume<double> to_pred = squared_edt(seed_mask(st.boundary_pred), spacing);
  st.pred_to_truth.reserve(st.boundary_pred.size());
  for (const auto& p : st.boundary_pred)
    st.pred_to_truth.push_back(
        std::sqrt(to_truth.data[(p[0] * pred.dims[1] + p[1]) * pred.dims[2] + p[2]]));
  st.truth_to_pred.reserve(st.boundary_truth.size());
  for (const auto& q : st.boundary_truth)
    st.truth_to_pred.push_back(
        std::sqrt(to_pred.data[(q[0] * pred.dims[1] + q[1]) * pred.dims[2] + q[2]]));
  return st;
}

/// max over both directed boundary distance arrays.
inline double hausdorff(const MaskVolume& pred, const MaskVolume& truth,
                        const Spacing3& spacing = {1.0, 1.0, 1.0}) {
  const SurfaceDistanceStats st = surface_distances(pred, truth, spacing);
  double h = 0.0;
  for (double v : st.pred_to_truth) h = std::max(h, v);
  for (double v : st.truth_to_pred) h = std::max(h, v);
  return h;
}

/// (sum of both directed distance arrays) / (|P| + |R|).
inline double asd(const MaskVolume& pred, const MaskVolume& truth,
                  const Spacing3& spacing = {1.0, 1.0, 1.0}) {
  const SurfaceDistanceStats st = surface_distances(pred, truth, spacing);
  // the two directed sums are kept separate so either argument order adds the
  // same two partials (bitwise-symmetric result)
  double sum_p = 0.0, sum_t = 0.0;
  for (double v : st.pred_to_truth) sum_p += v;
  for (double v : st.truth_to_pred) sum_t += v;
  return (sum_p + sum_t) / static_cast<double>(st.pred_to_truth.size() + st.truth_to_pred.size());
}

namespace metricdetail {

/// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 3e-15;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < eps) return h;
  }
  throw InternalError("beta_cf: continued fraction did not converge");
}

inline double reg_inc_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

}  // namespace metricdetail

struct TTestResult {
  double t = 0.0;
  std::size_t df = 0;
  double p = 1.0;  // two-sided
};

/// Paired two-sided t-test; p from the t CDF tail
/// P(|T| > |t|) = I_x(df/2, 1/2) with x = df/(df + t^2).
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ParameterError("paired_t_test: sample sizes " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  const std::size_t n = a.size();
  if (n < 2) throw DegenerateError("paired_t_test: needs at least 2 pairs");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dev = (a[i] - b[i]) - mean;
    ss += dev * dev;
  }
  if (ss == 0.0)
    throw DegenerateError("paired_t_test: zero variance in paired differences");
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TTestResult r;
  r.df = n - 1;
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const double nu = static_cast<double>(r.df);
  r.p = metricdetail::reg_inc_beta(nu / 2.0, 0.5, nu / (nu + r.t * r.t));
  return r;
}

}  // namespace isoseg
