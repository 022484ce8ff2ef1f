#pragma once

// Synthetic two-channel "isointense" phantoms with ground-truth labels.
//
// Geometry: an ellipsoidal brain-analog mask; a CSF analog made of the
// outermost shell plus a few deep spherical pockets; the remaining interior
// split into GM/WM analogs by thresholding a smooth value-noise field, so the
// tissue boundary is an interleaved blobby surface.  Class voxel counts are
// hit exactly (up to rounding) by rank-selection on deterministic keys, so
// the achieved prevalence matches the requested ratio by construction.
//
// Intensities: per class/channel Gaussian(mean, std * noise_level), with GM
// and WM means deliberately closer than one pooled standard deviation in both
// channels -- separating them needs spatial context, not intensity.  An
// optional Gaussian blur of the mean field models partial-volume mixing.
//
// Determinism: all randomness flows from mt19937_64 streams derived from the
// seed via splitmix64 (Rng::derive); normal variates use Box-Muller.  Ranking
// keys are exact integers, so identical seeds give bitwise-identical subjects
// on any platform.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "isoseg/metrics.hpp"
#include "isoseg/rng.hpp"
#include "isoseg/volume.hpp"

namespace isoseg {

struct PhantomSpec {
  Dims3 dims{48, 48, 48};
  std::uint64_t seed = 1;
  Spacing3 spacing{1.0, 1.0, 1.0};
  double ellipsoid_fill = 0.92;  // semi-axes as a fraction of the half-extent
  std::size_t csf_pockets = 3;
  std::size_t field_cell = 6;  // value-noise lattice cell edge (voxels)
  std::array<double, 3> class_ratio{1.0, 2.0, 1.5};  // CSF : GM : WM
  // per channel, per class {CSF, GM, WM}
  std::array<std::array<double, 3>, 2> mean{{{35.0, 70.0, 74.0}, {115.0, 62.0, 58.0}}};
  std::array<std::array<double, 3>, 2> stddev{{{8.0, 8.0, 8.0}, {8.0, 8.0, 8.0}}};
  double noise_level = 1.0;  // global multiplier on the stds
  double blur_sigma = 0.0;   // partial-volume blur of the mean field (voxels)

  void validate() const {
    for (std::size_t a = 0; a < 3; ++a)
      if (dims[a] < 8)
        throw ParameterError("phantom: dims must be >= 8 per axis, got " + dims_str(dims));
    if (!(ellipsoid_fill > 0.0 && ellipsoid_fill <= 1.0))
      throw ParameterError("phantom: ellipsoid_fill must be in (0, 1]");
    if (field_cell < 2) throw ParameterError("phantom: field_cell must be >= 2");
    for (double r : class_ratio)
      if (!(r > 0.0)) throw ParameterError("phantom: class ratio entries must be > 0");
    for (const auto& ch : stddev)
      for (double s : ch)
        if (!(s > 0.0)) throw ParameterError("phantom: stddevs must be > 0");
    if (noise_level < 0.0) throw ParameterError("phantom: noise_level must be >= 0");
    if (blur_sigma < 0.0) throw ParameterError("phantom: blur_sigma must be >= 0");
  }

  /// Normalized labeled-class fractions (CSF, GM, WM).
  std::array<double, 3> fractions() const {
    const double sum = class_ratio[0] + class_ratio[1] + class_ratio[2];
    return {class_ratio[0] / sum, class_ratio[1] / sum, class_ratio[2] / sum};
  }
};

namespace phantomdetail {

/// Trilinearly interpolated random lattice -- a smooth blobby scalar field.
class ValueNoise {
 public:
  ValueNoise(const Dims3& dims, std::size_t cell, Rng& rng) : cell_(cell) {
    for (std::size_t a = 0; a < 3; ++a) n_[a] = dims[a] / cell + 2;
    lattice_.resize(n_[0] * n_[1] * n_[2]);
    for (auto& v : lattice_) v = rng.uniform();
  }

  double at(std::size_t z, std::size_t y, std::size_t x) const {
    const double fz = static_cast<double>(z) / static_cast<double>(cell_);
    const double fy = static_cast<double>(y) / static_cast<double>(cell_);
    const double fx = static_cast<double>(x) / static_cast<double>(cell_);
    const std::size_t iz = static_cast<std::size_t>(fz), iy = static_cast<std::size_t>(fy),
                      ix = static_cast<std::size_t>(fx);
    const double tz = fz - static_cast<double>(iz), ty = fy - static_cast<double>(iy),
                 tx = fx - static_cast<double>(ix);
    auto node = [&](std::size_t a, std::size_t b, std::size_t c) {
      return lattice_[(a * n_[1] + b) * n_[2] + c];
    };
    auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
    const double c00 = lerp(node(iz, iy, ix), node(iz, iy, ix + 1), tx);
    const double c01 = lerp(node(iz, iy + 1, ix), node(iz, iy + 1, ix + 1), tx);
    const double c10 = lerp(node(iz + 1, iy, ix), node(iz + 1, iy, ix + 1), tx);
    const double c11 = lerp(node(iz + 1, iy + 1, ix), node(iz + 1, iy + 1, ix + 1), tx);
    return lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz);
  }

 private:
  std::size_t cell_;
  Dims3 n_{0, 0, 0};
  std::vector<double> lattice_;
};

inline void gaussian_blur_inplace(std::vector<double>& vol, const Dims3& d, double sigma) {
  if (sigma <= 0.0) return;
  const std::ptrdiff_t radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    ksum += v;
  }
  for (double& v : kernel) v /= ksum;

  std::vector<double> tmp(vol.size());
  auto idx = [&](std::size_t z, std::size_t y, std::size_t x) {
    return (z * d[1] + y) * d[2] + x;
  };
  // one clamped-border pass per axis
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(d[axis]);
    for (std::size_t z = 0; z < d[0]; ++z)
      for (std::size_t y = 0; y < d[1]; ++y)
        for (std::size_t x = 0; x < d[2]; ++x) {
          std::array<std::ptrdiff_t, 3> p{static_cast<std::ptrdiff_t>(z),
                                          static_cast<std::ptrdiff_t>(y),
                                          static_cast<std::ptrdiff_t>(x)};
          double acc = 0.0;
          for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
            auto q = p;
            q[axis] = std::clamp<std::ptrdiff_t>(q[axis] + k, 0, n - 1);
            acc += kernel[static_cast<std::size_t>(k + radius)] *
                   vol[idx(static_cast<std::size_t>(q[0]), static_cast<std::size_t>(q[1]),
                           static_cast<std::size_t>(q[2]))];
          }
          tmp[idx(z, y, x)] = acc;
        }
    vol.swap(tmp);
  }
}

}  // namespace phantomdetail

inline Subject generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Dims3 d = spec.dims;
  const std::size_t V = d[0] * d[1] * d[2];

  Subject subj;
  subj.id = "phantom-" + std::to_string(spec.seed);
  subj.mask = MaskVolume(d, 1);
  subj.labels = LabelVolume(d, 1);
  subj.image = Volume<float>(d, 2);
  subj.mask.spacing = subj.labels.spacing = subj.image.spacing = spec.spacing;

  // ellipsoidal brain analog, strictly inside the volume
  std::array<double, 3> center, semi;
  for (std::size_t a = 0; a < 3; ++a) {
    center[a] = 0.5 * static_cast<double>(d[a] - 1);
    semi[a] = spec.ellipsoid_fill * center[a];
  }
  std::vector<std::size_t> inside;
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        const double rz = (static_cast<double>(z) - center[0]) / semi[0];
        const double ry = (static_cast<double>(y) - center[1]) / semi[1];
        const double rx = (static_cast<double>(x) - center[2]) / semi[2];
        if (rz * rz + ry * ry + rx * rx <= 1.0) {
          const std::size_t v = (z * d[1] + y) * d[2] + x;
          subj.mask.data[v] = 1;
          inside.push_back(v);
        }
      }
  const std::size_t n_mask = inside.size();
  if (n_mask < 64)
    throw GenerationError("phantom: brain mask has only " + std::to_string(n_mask) +
                          " voxels; enlarge dims or ellipsoid_fill");

  // exact class budgets from the requested ratio
  const auto frac = spec.fractions();
  const std::size_t n_csf = static_cast<std::size_t>(std::llround(frac[0] * n_mask));
  const std::size_t n_wm = static_cast<std::size_t>(std::llround(frac[2] * n_mask));
  if (n_csf < 3 || n_wm < 3 || n_mask - n_csf - n_wm < 3)
    throw GenerationError("phantom: mask too small for the requested ratio (" +
                          std::to_string(n_mask) + " labeled voxels)");

  // depth = squared distance to the nearest outside voxel (exact integers)
  MaskVolume outside(d, 1);
  for (std::size_t v = 0; v < V; ++v) outside.data[v] = subj.mask.data[v] == 0;
  const Volume<double> depth_sq = squared_edt(outside, {1.0, 1.0, 1.0});
  double max_depth_sq = 0.0;
  for (std::size_t v : inside) max_depth_sq = std::max(max_depth_sq, depth_sq.data[v]);

  // deep pocket centers for the interior CSF component
  Rng geom_rng(Rng::derive(spec.seed, 0x706f636bULL));
  std::vector<std::size_t> deep;
  for (std::size_t v : inside)
    if (depth_sq.data[v] >= 0.25 * max_depth_sq) deep.push_back(v);
  if (deep.empty()) deep = inside;
  std::vector<std::array<double, 3>> pockets;
  for (std::size_t p = 0; p < spec.csf_pockets; ++p) {
    const std::size_t v = deep[geom_rng.below(deep.size())];
    pockets.push_back({static_cast<double>(v / (d[1] * d[2])),
                       static_cast<double>((v / d[2]) % d[1]),
                       static_cast<double>(v % d[2])});
  }

  // CSF = the n_csf in-mask voxels with the smallest key, where the key is
  // the distance to the shell or to the nearest pocket center (whichever is
  // closer); ties resolve by flat index, so selection is exact and stable
  std::vector<std::pair<double, std::size_t>> csf_rank;
  csf_rank.reserve(n_mask);
  for (std::size_t v : inside) {
    const double z = static_cast<double>(v / (d[1] * d[2]));
    const double y = static_cast<double>((v / d[2]) % d[1]);
    const double x = static_cast<double>(v % d[2]);
    double key = depth_sq.data[v];
    for (const auto& c : pockets) {
      const double dz = z - c[0], dy = y - c[1], dx = x - c[2];
      key = std::min(key, dz * dz + dy * dy + dx * dx);
    }
    csf_rank.emplace_back(key, v);
  }
  std::sort(csf_rank.begin(), csf_rank.end());
  for (std::size_t i = 0; i < n_csf; ++i) subj.labels.data[csf_rank[i].second] = kCsf;

  // GM/WM partition of the rest by a smooth random field: the n_wm lowest
  // field values become WM, the remainder GM
  Rng field_rng(Rng::derive(spec.seed, 0x6669656cULL));
  const phantomdetail::ValueNoise field(d, spec.field_cell, field_rng);
  std::vector<std::pair<double, std::size_t>> wm_rank;
  wm_rank.reserve(n_mask - n_csf);
  for (std::size_t i = n_csf; i < csf_rank.size(); ++i) {
    const std::size_t v = csf_rank[i].second;
    wm_rank.emplace_back(
        field.at(v / (d[1] * d[2]), (v / d[2]) % d[1], v % d[2]), v);
  }
  std::sort(wm_rank.begin(), wm_rank.end());
  for (std::size_t i = 0; i < wm_rank.size(); ++i)
    subj.labels.data[wm_rank[i].second] = i < n_wm ? kWm : kGm;

  // isointense condition on the configured distributions (skipped when the
  // noise is switched off -- zero-width distributions cannot overlap)
  if (spec.noise_level > 0.0) {
    for (std::size_t ch = 0; ch < 2; ++ch) {
      const double pooled =
          std::sqrt(0.5 * (spec.stddev[ch][1] * spec.stddev[ch][1] +
                           spec.stddev[ch][2] * spec.stddev[ch][2])) *
          spec.noise_level;
      const double sep = std::abs(spec.mean[ch][1] - spec.mean[ch][2]);
      if (sep >= pooled)
        throw GenerationError(
            "phantom: GM/WM means in channel " + std::to_string(ch) + " are " +
            std::to_string(sep) + " apart, not within the pooled std " +
            std::to_string(pooled) + " (not isointense)");
    }
  }

  // intensities: class-mean field, optional partial-volume blur, then noise
  Rng noise_rng(Rng::derive(spec.seed, 0x6e6f6973ULL));
  for (std::size_t ch = 0; ch < 2; ++ch) {
    std::vector<double> mean_field(V, 0.0);
    for (std::size_t v : inside) mean_field[v] = spec.mean[ch][subj.labels.data[v] - 1];
    phantomdetail::gaussian_blur_inplace(mean_field, d, spec.blur_sigma);
    for (std::size_t v = 0; v < V; ++v) {
      if (subj.mask.data[v] == 0) continue;  // background stays exactly zero
      const double sigma = spec.stddev[ch][subj.labels.data[v] - 1] * spec.noise_level;
      subj.image.data[ch * V + v] =
          static_cast<float>(mean_field[v] + noise_rng.normal() * sigma);
    }
  }

  subj.check_consistent();
  return subj;
}

// ---- intensity histograms -------------------------------------------------

struct HistogramTable {
  std::size_t bins = 0;
  std::array<double, 2> lo{0.0, 0.0}, hi{0.0, 0.0};  // observed in-mask range per channel
  // counts[channel][class][bin], classes ordered CSF, GM, WM
  std::array<std::array<std::vector<std::uint64_t>, 3>, 2> counts;

  std::string to_tsv() const {
    std::ostringstream os;
    os << "channel\tclass\tbin\tlower\tupper\tcount\n";
    for (std::size_t ch = 0; ch < 2; ++ch) {
      const double width = (hi[ch] - lo[ch]) / static_cast<double>(bins);
      for (std::size_t cls = 0; cls < 3; ++cls)
        for (std::size_t b = 0; b < bins; ++b)
          os << ch << '\t' << class_name(static_cast<std::uint8_t>(cls + 1)) << '\t' << b
             << '\t' << lo[ch] + width * static_cast<double>(b) << '\t'
             << lo[ch] + width * static_cast<double>(b + 1) << '\t' << counts[ch][cls][b]
             << '\n';
    }
    return os.str();
  }
};

/// Fixed-bin per-class intensity histograms over the observed in-mask range.
inline HistogramTable export_histograms(const Subject& subj, std::size_t bins = 256) {
  if (bins == 0) throw ParameterError("export_histograms: bins must be > 0");
  subj.check_consistent();
  const std::size_t V = subj.labels.voxels();
  HistogramTable tab;
  tab.bins = bins;
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t cls = 0; cls < 3; ++cls) tab.counts[ch][cls].assign(bins, 0);

  for (std::size_t ch = 0; ch < 2; ++ch) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t v = 0; v < V; ++v) {
      if (subj.labels.data[v] == kBackground) continue;
      const double val = static_cast<double>(subj.image.data[ch * V + v]);
      lo = std::min(lo, val);
      hi = std::max(hi, val);
    }
    if (!(lo <= hi)) throw DegenerateError("export_histograms: no labeled voxels");
    if (hi == lo) hi = lo + 1.0;  // single observed value: everything in bin 0
    tab.lo[ch] = lo;
    tab.hi[ch] = hi;
    for (std::size_t v = 0; v < V; ++v) {
      const std::uint8_t code = subj.labels.data[v];
      if (code == kBackground) continue;
      const double val = static_cast<double>(subj.image.data[ch * V + v]);
      auto b = static_cast<std::size_t>(static_cast<double>(bins) * (val - lo) / (hi - lo));
      b = std::min(b, bins - 1);
      ++tab.counts[ch][code - 1][b];
    }
  }
  return tab;
}

/// Histogram intersection of two classes' normalized rows in one channel.
inline double histogram_overlap(const HistogramTable& tab, std::size_t channel,
                                std::uint8_t class_a, std::uint8_t class_b) {
  if (channel >= 2 || class_a < 1 || class_a > 3 || class_b < 1 || class_b > 3)
    throw ParameterError("histogram_overlap: channel must be < 2 and classes in 1..3");
  const auto& ha = tab.counts[channel][class_a - 1];
  const auto& hb = tab.counts[channel][class_b - 1];
  const double na = static_cast<double>(std::accumulate(ha.begin(), ha.end(), std::uint64_t{0}));
  const double nb = static_cast<double>(std::accumulate(hb.begin(), hb.end(), std::uint64_t{0}));
  if (na == 0.0 || nb == 0.0)
    throw DegenerateError("histogram_overlap: empty class histogram");
  double overlap = 0.0;
  for (std::size_t b = 0; b < tab.bins; ++b)
    overlap += std::min(static_cast<double>(ha[b]) / na, static_cast<double>(hb[b]) / nb);
  return overlap;
}

}  // namespace isoseg
