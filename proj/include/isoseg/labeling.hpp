#pragma once

// Discrete label decisions from probability maps.
//
// Two strategies share the same code table (0=background, 1=CSF, 2=GM, 3=WM):
//  - single-label: 4-class softmax argmax over background/CSF/GM/WM;
//  - exclusive multi-label: CSF and WM sigmoid maps thresholded at 0.5, GM
//    assigned as the in-mask complement.  The complement needs a brain mask,
//    otherwise all background would come out as GM.
// Tie rules are fixed so reruns are regression-stable: argmax ties go to the
// lower code; exclusive equality at p_csf == p_wm >= threshold goes to CSF.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "isoseg/losses.hpp"
#include "isoseg/volume.hpp"

namespace isoseg {

struct DecisionConfig {
  double threshold = 0.5;

  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0))
      throw ParameterError("decision: threshold must be in (0, 1), got " +
                           std::to_string(threshold));
  }
};

namespace labeldetail {

template <typename S>
void check_prob_range(const Volume<S>& probs, const char* where) {
  for (const S& p : probs.data)
    if (static_cast<double>(p) < -1e-6 || static_cast<double>(p) > 1.0 + 1e-6)
      throw ContractError(std::string(where) + ": probability " +
                          std::to_string(static_cast<double>(p)) + " outside [0, 1]");
}

}  // namespace labeldetail

/// Per-voxel argmax over the 4 softmax classes; ties break to the lower code.
template <typename S>
LabelVolume decide_single_label(const Volume<S>& probs) {
  if (probs.channels != kNumClasses)
    throw DimensionError("decide_single_label: expected " + std::to_string(kNumClasses) +
                         " channels, got " + std::to_string(probs.channels));
  labeldetail::check_prob_range(probs, "decide_single_label");
  LabelVolume out(probs.dims, 1);
  out.spacing = probs.spacing;
  const std::size_t V = probs.voxels();
  for (std::size_t i = 0; i < V; ++i) {
    double sum = 0.0, best = -1.0;
    std::uint8_t best_c = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const double p = static_cast<double>(probs.data[c * V + i]);
      sum += p;
      if (p > best) {  // strict: first (lowest) class wins ties
        best = p;
        best_c = static_cast<std::uint8_t>(c);
      }
    }
    if (std::abs(sum - 1.0) > 1e-5)
      throw ContractError("decide_single_label: voxel probabilities sum to " +
                          std::to_string(sum) + ", expected 1 within 1e-5");
    out.data[i] = best_c;
  }
  return out;
}

/// Exclusive decision from CSF/WM sigmoid maps (channel 0 = CSF, 1 = WM).
/// Inside the mask: CSF if p_csf >= t and p_csf >= p_wm; WM if p_wm >= t and
/// p_wm > p_csf; otherwise GM.  Outside the mask: background.
template <typename S>
LabelVolume decide_exclusive(const Volume<S>& probs, const MaskVolume* mask,
                             const DecisionConfig& cfg = {}) {
  cfg.validate();
  if (probs.channels != 2)
    throw DimensionError("decide_exclusive: expected 2 channels (CSF, WM), got " +
                         std::to_string(probs.channels));
  if (mask == nullptr)
    throw ConfigError("decide_exclusive: the GM complement needs a brain mask");
  if (mask->dims != probs.dims)
    throw DimensionError("decide_exclusive: mask dims " + dims_str(mask->dims) +
                         " vs probs " + dims_str(probs.dims));
  labeldetail::check_prob_range(probs, "decide_exclusive");
  LabelVolume out(probs.dims, 1);
  out.spacing = probs.spacing;
  const std::size_t V = probs.voxels();
  const double t = cfg.threshold;
  for (std::size_t i = 0; i < V; ++i) {
    if (mask->data[i] == 0) {
      out.data[i] = kBackground;
      continue;
    }
    const double pc = static_cast<double>(probs.data[i]);
    const double pw = static_cast<double>(probs.data[V + i]);
    if (pc >= t && pc >= pw)
      out.data[i] = kCsf;
    else if (pw >= t && pw > pc)
      out.data[i] = kWm;
    else
      out.data[i] = kGm;
  }
  return out;
}

/// Pooled voxel counts per code over a set of label maps.
inline ClassPrevalence compute_prevalence(const std::vector<const LabelVolume*>& maps) {
  if (maps.empty()) throw ParameterError("compute_prevalence: no label maps");
  ClassPrevalence prev;
  for (const LabelVolume* m : maps) {
    for (std::uint8_t code : m->data) {
      if (code >= kNumClasses)
        throw ContractError("compute_prevalence: invalid label code " + std::to_string(code));
      ++prev.counts[code];
    }
  }
  if (prev.labeled_total() == 0)
    throw DegenerateError("compute_prevalence: all voxels are background");
  return prev;
}

inline MaskVolume mask_from_labels(const LabelVolume& labels) {
  MaskVolume mask(labels.dims, 1);
  mask.spacing = labels.spacing;
  for (std::size_t i = 0; i < labels.data.size(); ++i) mask.data[i] = labels.data[i] != 0;
  return mask;
}

/// 4-channel one-hot encoding (training targets for the single-label head).
template <typename S>
Volume<S> one_hot_volume(const LabelVolume& labels) {
  Volume<S> out(labels.dims, kNumClasses);
  out.spacing = labels.spacing;
  const std::size_t V = labels.voxels();
  for (std::size_t i = 0; i < V; ++i) {
    const std::uint8_t code = labels.data[i];
    if (code >= kNumClasses)
      throw ContractError("one_hot_volume: invalid label code " + std::to_string(code));
    out.data[code * V + i] = S(1);
  }
  return out;
}

/// Binary indicator of one class (training targets for the exclusive head).
template <typename S>
Volume<S> binary_class_volume(const LabelVolume& labels, std::uint8_t code) {
  if (code >= kNumClasses)
    throw ParameterError("binary_class_volume: invalid class code " + std::to_string(code));
  Volume<S> out(labels.dims, 1);
  out.spacing = labels.spacing;
  for (std::size_t i = 0; i < labels.data.size(); ++i)
    out.data[i] = labels.data[i] == code ? S(1) : S(0);
  return out;
}

}  // namespace isoseg
