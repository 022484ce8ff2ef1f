#pragma once

// End-to-end orchestration: intensity normalization, fold splits, the
// patch-sampled training loop (Adam + stepped lr decay), fused whole-volume
// prediction, and evaluation reports.  The heavyweight routines are concrete
// float functions compiled once in src/pipeline.cpp.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "isoseg/io.hpp"
#include "isoseg/labeling.hpp"
#include "isoseg/losses.hpp"
#include "isoseg/metrics.hpp"
#include "isoseg/model.hpp"
#include "isoseg/phantom.hpp"
#include "isoseg/volume.hpp"

namespace isoseg {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Intensity normalization: each channel is divided by the mean of its nonzero
// voxels, so nonzero voxels average to 1 and zeros stay exactly zero.

template <typename S>
void normalize_intensity(Volume<S>& image) {
  const std::size_t V = image.voxels();
  for (std::size_t c = 0; c < image.channels; ++c) {
    S* ch = image.data.data() + c * V;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < V; ++i)
      if (ch[i] != S{0}) {
        sum += static_cast<double>(ch[i]);
        ++n;
      }
    if (n == 0)
      throw DegenerateError("normalize_intensity: channel " + std::to_string(c) +
                            " has no nonzero voxels");
    const double mean = sum / static_cast<double>(n);
    if (mean == 0.0)
      throw DegenerateError("normalize_intensity: channel " + std::to_string(c) +
                            " has zero nonzero-mean");
    for (std::size_t i = 0; i < V; ++i)
      if (ch[i] != S{0}) ch[i] = static_cast<S>(static_cast<double>(ch[i]) / mean);
  }
}

// ---------------------------------------------------------------------------
// Cross-validation splits.

struct FoldSplit {
  std::vector<std::size_t> train;  // indices into the subject roster
  std::vector<std::size_t> val;
};

/// Seeded shuffle, then contiguous partition into k folds whose sizes differ
/// by at most one; fold f's slice is the validation set of split f.
std::vector<FoldSplit> kfold_split(std::size_t n_subjects, std::size_t k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training.

struct TrainingConfig {
  ModelConfig model;  // model.head selects the training strategy
  LossConfig loss;
  std::size_t epochs = 200;
  std::size_t batch_size = 2;
  std::size_t patches_per_epoch = 8;  // one "epoch" = this many sampled patches
  double lr0 = 5e-4;
  double lr_decay = 0.9;
  std::size_t lr_interval = 500;  // optimizer steps per decay
  std::uint64_t seed = 1;
  std::size_t folds = 5;
  std::size_t validate_every = 1;  // epochs between validation passes; 0 = never
  bool augment = true;             // random rotation-by-180 patch augmentation

  void validate() const {
    model.validate();
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (patches_per_epoch == 0) throw ConfigError("train: patches_per_epoch must be positive");
    if (!(lr0 > 0.0)) throw ConfigError("train: lr0 must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0))
      throw ConfigError("train: lr_decay must be in (0, 1]");
    if (lr_interval == 0) throw ConfigError("train: lr_interval must be positive");
    if (folds < 2) throw ConfigError("train: folds must be >= 2");
  }
};

struct TrainResult {
  ParamStore<float> best;  // best-validation snapshot (initialization if never validated)
  ParamStore<float> last;  // parameters after the final step
  double best_val_dsc = -1.0;
  std::size_t best_epoch = 0;                     // 1-based; 0 = never validated
  std::vector<double> epoch_loss;                 // mean training loss per epoch
  std::vector<std::size_t> val_epochs;            // 1-based epochs with a validation pass
  std::vector<double> val_dsc;                    // macro tissue DSC per validation pass
  std::array<std::uint64_t, kNumClasses> target_reads{};  // per-class target builds
  LossConfig resolved_loss;                       // betas filled in from prevalence
  std::string log;                                // human-readable per-epoch lines
};

/// Patch-sampled mini-batch optimization.  The exclusive strategy supervises
/// the CSF and WM channels against binary targets and never builds a GM
/// target (result.target_reads[kGm] stays zero); the single-label strategy
/// supervises the 4-class softmax against one-hot targets.  Unset per-class
/// betas (<= 0) are resolved from the training-set class prevalence before
/// the first step.  Deterministic under (config, data, seed).
TrainResult train(const TrainingConfig& cfg, const std::vector<const Subject*>& train_subjects,
                  const std::vector<const Subject*>& val_subjects);

// ---------------------------------------------------------------------------
// Fused whole-volume prediction.

struct PredictOptions {
  bool augment = true;      // fuse 4 rotated forward passes per patch
  std::size_t threads = 0;  // 0 = honor ISOSEG_THREADS, else 1
};

/// Runs the model over a 50%-overlap patch grid (4 augmented passes per patch
/// when enabled), inverse-transforms, and fuses with spline weights.  Volumes
/// smaller than the patch are zero-padded and the result cropped back.
/// Output channels follow cfg.out_channels().
Volume<float> predict_probabilities(const ModelConfig& cfg, ParamStore<float>& store,
                                    const Volume<float>& image,
                                    const PredictOptions& opts = {});

/// predict_probabilities + the head's decision rule.  The exclusive head
/// requires a brain mask for its GM complement; pass nullptr to derive one
/// from the nonzero voxels of the image.
LabelVolume predict_labels(const ModelConfig& cfg, ParamStore<float>& store,
                           const Volume<float>& image, const MaskVolume* mask,
                           const DecisionConfig& decision = {},
                           const PredictOptions& opts = {});

/// Union of nonzero voxels across channels.
MaskVolume mask_from_image(const Volume<float>& image);

// ---------------------------------------------------------------------------
// Evaluation reports.

struct ClassMetrics {
  double dsc = 0.0;
  double hd = 0.0;   // NaN when a surface is empty (degenerate)
  double asd = 0.0;  // NaN likewise
  double sensitivity = 0.0;
  double specificity = 0.0;
};

inline constexpr std::array<std::uint8_t, 3> kTissueClasses{kCsf, kGm, kWm};

struct SubjectEval {
  std::string id;
  std::array<ClassMetrics, 3> per_class;  // CSF, GM, WM
};

struct EvalCase {
  std::string id;
  const LabelVolume* pred = nullptr;
  const LabelVolume* truth = nullptr;
};

struct EvalReport {
  std::vector<SubjectEval> subjects;
  std::array<ClassMetrics, 3> mean;  // over subjects with finite entries

  std::string to_tsv() const;    // long form: subject, class, metrics
  std::string to_table() const;  // per-class DSC/HD/ASD column groups
};

/// Per-class, per-subject DSC/HD/ASD (+ sensitivity/specificity) and means.
/// Degenerate surface distances are recorded as NaN, not errors.
EvalReport evaluate(const std::vector<EvalCase>& cases, const Spacing3& spacing = {1, 1, 1});

/// Paired t-test on per-subject DSC between two prediction sets of the same
/// subjects (same ids, same order).  Zero-variance differences are surfaced
/// as degenerate rather than thrown.
struct PairedComparison {
  std::array<double, 3> mean_a{}, mean_b{};  // per tissue class
  std::array<TTestResult, 3> tests{};
  std::array<bool, 3> degenerate{};

  std::string to_table(const std::string& name_a, const std::string& name_b) const;
};

PairedComparison compare_dsc(const EvalReport& a, const EvalReport& b);

// ---------------------------------------------------------------------------
// Artifacts and configuration plumbing.

/// Subject on disk: <stem>_image, <stem>_labels, <stem>_mask volume pairs.
void save_subject(const std::string& stem, const Subject& subj);
Subject load_subject(const std::string& stem, const std::string& id);

/// Full resolved run record: version, seeds, every config knob, resolved
/// betas, and training outcome.
std::string render_run_manifest(const TrainingConfig& cfg, const TrainResult& result);

/// Consume "model.*", "loss.*", "train.*" keys; caller runs
/// reject_unknown_keys() once all parsers have had their turn.
TrainingConfig parse_training_config(ConfigFile& file);

/// Consume "phantom.*" keys.
PhantomSpec parse_phantom_spec(ConfigFile& file);

}  // namespace isoseg
