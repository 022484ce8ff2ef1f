#pragma once

// Soft F-beta similarity losses with prevalence-driven beta selection.
//
// score = (TP + eps*sigma0) / (TP + b2/(1+b2)*FN + 1/(1+b2)*FP + eps)
// with soft counts TP = sum(p*g), FN = sum((1-p)*g), FP = sum(p*(1-g)) and
// sigma0 = 1 iff the target is entirely empty (so empty-vs-empty scores 1).
// beta > 1 shifts weight from false positives to false negatives, i.e. favors
// recall; beta = 1 reduces to soft Dice.  Counts are pooled over the whole
// batch (classes absent from one sample still get stable gradients).

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "isoseg/autograd.hpp"
#include "isoseg/tensor.hpp"
#include "isoseg/volume.hpp"

namespace isoseg {

struct ClassPrevalence {
  // voxel counts by label code: background, CSF, GM, WM
  std::array<std::uint64_t, kNumClasses> counts{};

  std::uint64_t labeled_total() const { return counts[kCsf] + counts[kGm] + counts[kWm]; }

  /// Fraction of labeled voxels belonging to `code` (background excluded).
  double fraction(std::uint8_t code) const {
    const std::uint64_t tot = labeled_total();
    if (tot == 0) throw DegenerateError("prevalence: no labeled voxels");
    return static_cast<double>(counts[code]) / static_cast<double>(tot);
  }
};

/// beta_z = sqrt(((1+lambda)*total - n_z) / (n_z - lambda*total)).
/// At lambda = 0 this is sqrt((1-p)/p) for class fraction p.
inline double select_beta(std::uint64_t n_z, std::uint64_t total, double lambda) {
  if (lambda < 0) throw ParameterError("select_beta: lambda must be >= 0");
  if (total == 0) throw DegenerateError("select_beta: empty prevalence");
  const double nz = static_cast<double>(n_z), tot = static_cast<double>(total);
  const double denom = nz - lambda * tot;
  if (denom <= 0)
    throw ParameterError(
        "select_beta: prevalence/lambda incompatible: requires N_z/total > lambda, got " +
        std::to_string(nz / tot) + " <= " + std::to_string(lambda));
  const double numer = (1.0 + lambda) * tot - nz;
  if (numer <= 0)
    throw ParameterError(
        "select_beta: prevalence/lambda incompatible: requires N_z < (1+lambda)*total, got " +
        std::to_string(nz / tot) + " >= " + std::to_string(1.0 + lambda));
  return std::sqrt(numer / denom);
}

inline double select_beta(const ClassPrevalence& prev, std::uint8_t code, double lambda) {
  return select_beta(prev.counts[code], prev.labeled_total(), lambda);
}

struct LossConfig {
  double lambda = 0.1;
  double eps = 1e-6;
  // per-class beta by label code; unset (<= 0) entries are configuration errors
  // when that class is trained
  std::array<double, kNumClasses> beta{0.0, 0.0, 0.0, 0.0};
  double single_label_beta = 1.0;  // one shared beta across the 4 softmax classes

  double class_beta(std::uint8_t code) const {
    if (beta[code] <= 0.0)
      throw ConfigError(std::string("loss: no beta configured for class ") +
                        class_name(code));
    return beta[code];
  }
};

namespace lossdetail {

template <typename S>
void check_probs(const Tensor<S>& probs, const Tensor<S>& targets) {
  require_same_shape(probs, targets, "soft_fbeta");
  for (const S& p : probs.data)
    if (static_cast<double>(p) < -1e-6 || static_cast<double>(p) > 1.0 + 1e-6)
      throw ContractError("soft_fbeta: probability " + std::to_string(static_cast<double>(p)) +
                          " outside [0, 1]");
}

struct SoftCounts {
  double tp = 0.0, fn = 0.0, fp = 0.0, target_sum = 0.0;
};

template <typename S>
SoftCounts soft_counts(const Tensor<S>& probs, const Tensor<S>& targets) {
  SoftCounts c;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = static_cast<double>(probs.data[i]);
    const double g = static_cast<double>(targets.data[i]);
    c.tp += p * g;
    c.fn += (1.0 - p) * g;
    c.fp += p * (1.0 - g);
    c.target_sum += g;
  }
  return c;
}

inline double fbeta_from_counts(const SoftCounts& c, double beta, double eps) {
  const double b2 = beta * beta;
  const double wfn = b2 / (1.0 + b2), wfp = 1.0 / (1.0 + b2);
  const double sigma0 = c.target_sum == 0.0 ? 1.0 : 0.0;
  return (c.tp + eps * sigma0) / (c.tp + wfn * c.fn + wfp * c.fp + eps);
}

}  // namespace lossdetail

/// Plain (graph-free) score in [0, 1]; loss is 1 - score.
template <typename S>
double soft_fbeta_score(const Tensor<S>& probs, const Tensor<S>& targets, double beta,
                        double eps) {
  if (beta <= 0) throw ParameterError("soft_fbeta: beta must be > 0");
  if (eps <= 0) throw ParameterError("soft_fbeta: eps must be > 0");
  lossdetail::check_probs(probs, targets);
  return lossdetail::fbeta_from_counts(lossdetail::soft_counts(probs, targets), beta, eps);
}

/// Graph node computing the same score differentiably w.r.t. probs.
template <typename S>
GId<S> soft_fbeta_score(Graph<S>& g, GId<S> probs, const Tensor<S>& targets, double beta,
                        double eps) {
  if (beta <= 0) throw ParameterError("soft_fbeta: beta must be > 0");
  if (eps <= 0) throw ParameterError("soft_fbeta: eps must be > 0");
  lossdetail::check_probs(g.value(probs), targets);
  const double b2 = beta * beta;
  const double wfn = b2 / (1.0 + b2), wfp = 1.0 / (1.0 + b2);
  double target_sum = 0.0;
  for (const S& t : targets.data) target_sum += static_cast<double>(t);
  const double sigma0 = target_sum == 0.0 ? 1.0 : 0.0;

  const GId<S> tgt = g.leaf(targets, false);
  const GId<S> tp = sum_all(g, mul(g, probs, tgt));
  const GId<S> sp = sum_all(g, probs);
  // FN = sum(g) - TP, FP = sum(p) - TP
  const GId<S> fn = affine(g, tp, S(-1), static_cast<S>(target_sum));
  const GId<S> fp_node = sub(g, sp, tp);
  const GId<S> num = affine(g, tp, S(1), static_cast<S>(eps * sigma0));
  GId<S> den = add(g, tp, affine(g, fn, static_cast<S>(wfn), S(0)));
  den = add(g, den, affine(g, fp_node, static_cast<S>(wfp), static_cast<S>(eps)));
  return div(g, num, den);
}

/// One class's probability node paired with its binary target and label code.
template <typename S>
struct ClassTerm {
  GId<S> probs;
  const Tensor<S>* targets;
  std::uint8_t code;
};

/// Mean over trained classes of (1 - score), one beta per class.
template <typename S>
GId<S> multi_label_loss(Graph<S>& g, const std::vector<ClassTerm<S>>& classes,
                        const LossConfig& cfg) {
  if (classes.empty()) throw ConfigError("multi_label_loss: no classes");
  GId<S> sum{};
  bool first = true;
  for (const auto& term : classes) {
    const GId<S> score =
        soft_fbeta_score(g, term.probs, *term.targets, cfg.class_beta(term.code), cfg.eps);
    sum = first ? score : add(g, sum, score);
    first = false;
  }
  const S inv = static_cast<S>(1.0 / static_cast<double>(classes.size()));
  // loss = 1 - mean(score)
  return affine(g, sum, -inv, S(1));
}

/// Macro-averaged (1 - score) over all softmax classes with one shared beta.
/// `targets` must be one-hot with the same shape as the probability tensor.
template <typename S>
GId<S> single_label_loss(Graph<S>& g, GId<S> probs, const Tensor<S>& targets,
                         const LossConfig& cfg) {
  const Tensor<S>& pv = g.value(probs);
  require_same_shape(pv, targets, "single_label_loss");
  const std::size_t C = pv.shape[1], V = pv.spatial();
  if (C < 2) throw DimensionError("single_label_loss: needs >= 2 classes");
  for (std::size_t b = 0; b < pv.shape[0]; ++b)
    for (std::size_t i = 0; i < V; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += static_cast<double>(pv.data[(b * C + c) * V + i]);
      if (std::abs(s - 1.0) > 1e-5)
        throw ContractError("single_label_loss: per-voxel probabilities sum to " +
                            std::to_string(s) + ", expected 1 within 1e-5");
    }
  GId<S> sum{};
  std::vector<Tensor<S>> class_targets;
  class_targets.reserve(C);
  for (std::size_t c = 0; c < C; ++c) class_targets.push_back(slice_channels(targets, c, c + 1));
  for (std::size_t c = 0; c < C; ++c) {
    const GId<S> pc = slice_channels(g, probs, c, c + 1);
    const GId<S> score =
        soft_fbeta_score(g, pc, class_targets[c], cfg.single_label_beta, cfg.eps);
    sum = c == 0 ? score : add(g, sum, score);
  }
  const S inv = static_cast<S>(1.0 / static_cast<double>(C));
  return affine(g, sum, -inv, S(1));
}

}  // namespace isoseg
