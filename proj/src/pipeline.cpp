#include "isoseg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "isoseg/adam.hpp"
#include "isoseg/autograd.hpp"
#include "isoseg/patching.hpp"
#include "isoseg/rng.hpp"

namespace isoseg {

namespace {

constexpr std::uint64_t kSampleStream = 0x73616d70;   // patch sampling + augmentation draws
constexpr std::uint64_t kDropoutStream = 0x64726f70;  // per-step dropout masks

/// Zero-pad at the high end so every axis reaches at least `extent`.
template <typename T>
Volume<T> pad_to(const Volume<T>& v, const Dims3& extent) {
  Dims3 nd = v.dims;
  bool need = false;
  for (std::size_t a = 0; a < 3; ++a)
    if (nd[a] < extent[a]) {
      nd[a] = extent[a];
      need = true;
    }
  if (!need) return v;
  Volume<T> out(nd, v.channels);
  out.spacing = v.spacing;
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t z = 0; z < v.dims[0]; ++z)
      for (std::size_t y = 0; y < v.dims[1]; ++y) {
        const T* src = &v.at(c, z, y, 0);
        std::copy(src, src + v.dims[2], &out.at(c, z, y, 0));
      }
  return out;
}

template <typename T>
Volume<T> crop_to(const Volume<T>& v, const Dims3& dims) {
  if (v.dims == dims) return v;
  Volume<T> out(dims, v.channels);
  out.spacing = v.spacing;
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t z = 0; z < dims[0]; ++z)
      for (std::size_t y = 0; y < dims[1]; ++y) {
        const T* src = &v.at(c, z, y, 0);
        std::copy(src, src + dims[2], &out.at(c, z, y, 0));
      }
  return out;
}

// --- instrumented target construction -------------------------------------
// Every target build bumps the per-class counter, so a run can prove which
// classes its strategy supervised (the exclusive strategy must never touch
// GM).

Tensor<float> binary_target(const LabelVolume& labels, std::uint8_t code, const Dims3& origin,
                            const Dims3& extent, std::array<std::uint64_t, kNumClasses>& reads) {
  ++reads[code];
  Tensor<float> t(Shape5{1, 1, extent[0], extent[1], extent[2]});
  std::size_t i = 0;
  for (std::size_t z = 0; z < extent[0]; ++z)
    for (std::size_t y = 0; y < extent[1]; ++y)
      for (std::size_t x = 0; x < extent[2]; ++x, ++i)
        t.data[i] =
            labels.at(0, origin[0] + z, origin[1] + y, origin[2] + x) == code ? 1.0f : 0.0f;
  return t;
}

Tensor<float> one_hot_target(const LabelVolume& labels, const Dims3& origin, const Dims3& extent,
                             std::array<std::uint64_t, kNumClasses>& reads) {
  for (std::size_t c = 0; c < kNumClasses; ++c) ++reads[c];
  Tensor<float> t(Shape5{1, kNumClasses, extent[0], extent[1], extent[2]});
  const std::size_t V = extent[0] * extent[1] * extent[2];
  std::size_t i = 0;
  for (std::size_t z = 0; z < extent[0]; ++z)
    for (std::size_t y = 0; y < extent[1]; ++y)
      for (std::size_t x = 0; x < extent[2]; ++x, ++i) {
        const std::uint8_t code = labels.at(0, origin[0] + z, origin[1] + y, origin[2] + x);
        if (code >= kNumClasses)
          throw ContractError("train: invalid label code " + std::to_string(code));
        t.data[code * V + i] = 1.0f;
      }
  return t;
}

/// Concatenate per-patch tensors {1,C,...} along the batch axis.
Tensor<float> stack_batch(const std::vector<Tensor<float>>& patches) {
  Shape5 shape = patches.front().shape;
  shape[0] = patches.size();
  Tensor<float> out(shape);
  const std::size_t per = patches.front().size();
  for (std::size_t b = 0; b < patches.size(); ++b) {
    if (patches[b].size() != per) throw InternalError("stack_batch: ragged patch sizes");
    std::copy(patches[b].data.begin(), patches[b].data.end(), out.data.begin() + b * per);
  }
  return out;
}

std::pair<double, double> tensor_range(const Tensor<float>& t) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (float v : t.data) {
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  return {lo, hi};
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream ss;
  ss << std::setprecision(prec) << v;
  return ss.str();
}

/// Macro tissue DSC of fused whole-volume predictions against ground truth.
double validation_macro_dsc(const ModelConfig& cfg, ParamStore<float>& store,
                            const std::vector<const Subject*>& subjects) {
  PredictOptions opts;
  opts.threads = 1;
  double sum = 0.0;
  for (const Subject* s : subjects) {
    const LabelVolume pred = predict_labels(cfg, store, s->image, &s->mask, {}, opts);
    double macro = 0.0;
    for (std::uint8_t c : kTissueClasses)
      macro += dsc(binary_class_volume<std::uint8_t>(pred, c),
                   binary_class_volume<std::uint8_t>(s->labels, c));
    sum += macro / static_cast<double>(kTissueClasses.size());
  }
  return sum / static_cast<double>(subjects.size());
}

std::size_t env_thread_cap() {
  const char* raw = std::getenv("ISOSEG_THREADS");
  if (!raw) return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (end == raw || *end != '\0' || v < 1) return 1;
  return static_cast<std::size_t>(v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Fold splits.

std::vector<FoldSplit> kfold_split(std::size_t n_subjects, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ParameterError("kfold_split: need at least 2 folds, got " + std::to_string(k));
  if (n_subjects < k)
    throw ParameterError("kfold_split: " + std::to_string(n_subjects) +
                         " subjects cannot fill " + std::to_string(k) + " folds");
  std::vector<std::size_t> order(n_subjects);
  for (std::size_t i = 0; i < n_subjects; ++i) order[i] = i;
  Rng rng(Rng::derive(seed, 0x666f6c64));  // "fold"
  for (std::size_t i = n_subjects - 1; i > 0; --i)
    std::swap(order[i], order[rng.below(i + 1)]);

  std::vector<FoldSplit> splits(k);
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t lo = f * n_subjects / k, hi = (f + 1) * n_subjects / k;
    for (std::size_t i = 0; i < n_subjects; ++i)
      (i >= lo && i < hi ? splits[f].val : splits[f].train).push_back(order[i]);
  }
  return splits;
}

// ---------------------------------------------------------------------------
// Training.

TrainResult train(const TrainingConfig& cfg, const std::vector<const Subject*>& train_subjects,
                  const std::vector<const Subject*>& val_subjects) {
  cfg.validate();
  if (train_subjects.empty()) throw ParameterError("train: no training subjects");
  for (const Subject* s : train_subjects) s->check_consistent();
  for (const Subject* s : val_subjects) s->check_consistent();
  const bool exclusive = cfg.model.head == HeadMode::exclusive;
  const std::size_t p = cfg.model.patch;
  const Dims3 extent{p, p, p};

  TrainResult result;
  result.resolved_loss = cfg.loss;
  if (exclusive) {
    // Resolve any unset class beta from the training-set prevalence.
    if (result.resolved_loss.beta[kCsf] <= 0.0 || result.resolved_loss.beta[kWm] <= 0.0) {
      std::vector<const LabelVolume*> maps;
      for (const Subject* s : train_subjects) maps.push_back(&s->labels);
      const ClassPrevalence prev = compute_prevalence(maps);
      for (std::uint8_t c : {kCsf, kWm})
        if (result.resolved_loss.beta[c] <= 0.0)
          result.resolved_loss.beta[c] = select_beta(prev, c, result.resolved_loss.lambda);
    }
  }
  const LossConfig& loss_cfg = result.resolved_loss;

  ParamStore<float> store = build_params<float>(cfg.model, cfg.seed);
  result.best = store;  // zero-epoch contract: checkpoint == initialization
  result.last = store;

  struct Prepared {
    Volume<float> image;
    LabelVolume labels;
  };
  std::vector<Prepared> prep;
  prep.reserve(train_subjects.size());
  for (const Subject* s : train_subjects)
    prep.push_back({pad_to(s->image, extent), pad_to(s->labels, extent)});

  Rng sample_rng(Rng::derive(cfg.seed, kSampleStream));
  const std::uint64_t dropout_base = Rng::derive(cfg.seed, kDropoutStream);
  std::map<std::string, AdamState> adam_states;
  const AdamConfig adam_cfg;
  std::size_t global_step = 0;
  std::ostringstream log;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t n_steps = 0;
    std::size_t remaining = cfg.patches_per_epoch;
    while (remaining > 0) {
      const std::size_t B = std::min(cfg.batch_size, remaining);
      remaining -= B;
      const double lr = lr_schedule(cfg.lr0, cfg.lr_decay, cfg.lr_interval, global_step);

      // Sample a mini-batch of augmented patches with per-class targets.
      std::vector<Tensor<float>> inputs;
      std::vector<Tensor<float>> csf_t, wm_t, onehot_t;
      for (std::size_t b = 0; b < B; ++b) {
        const Prepared& subj = prep[sample_rng.below(prep.size())];
        Dims3 origin;
        for (std::size_t a = 0; a < 3; ++a)
          origin[a] = sample_rng.below(subj.image.dims[a] - p + 1);
        const std::size_t t =
            cfg.augment ? static_cast<std::size_t>(sample_rng.below(kNumAugmentations)) : 0;
        inputs.push_back(apply_transform(extract_patch(subj.image, origin, extent), t));
        if (exclusive) {
          csf_t.push_back(apply_transform(
              binary_target(subj.labels, kCsf, origin, extent, result.target_reads), t));
          wm_t.push_back(apply_transform(
              binary_target(subj.labels, kWm, origin, extent, result.target_reads), t));
        } else {
          onehot_t.push_back(apply_transform(
              one_hot_target(subj.labels, origin, extent, result.target_reads), t));
        }
      }
      const Tensor<float> batch_input = stack_batch(inputs);
      Tensor<float> batch_csf, batch_wm, batch_onehot;
      if (exclusive) {
        batch_csf = stack_batch(csf_t);
        batch_wm = stack_batch(wm_t);
      } else {
        batch_onehot = stack_batch(onehot_t);
      }

      double loss_value = 0.0;
      try {
        Graph<float> g(Rng::derive(dropout_base, global_step));
        const GId<float> input = g.leaf(batch_input);
        std::map<std::string, GId<float>> param_ids;
        const GId<float> probs = forward_train(g, cfg.model, store, input, &param_ids);
        GId<float> loss_id;
        if (exclusive) {
          const std::vector<ClassTerm<float>> terms{
              {slice_channels(g, probs, 0, 1), &batch_csf, kCsf},
              {slice_channels(g, probs, 1, 2), &batch_wm, kWm}};
          loss_id = multi_label_loss(g, terms, loss_cfg);
        } else {
          loss_id = single_label_loss(g, probs, batch_onehot, loss_cfg);
        }
        loss_value = static_cast<double>(g.value(loss_id).data[0]);
        if (!std::isfinite(loss_value))
          throw InternalError("non-finite loss value");  // caught and annotated below
        g.backward(loss_id);
        for (const auto& [name, id] : param_ids)
          adam_step(store.param(name), g.grad(id), adam_states[name], adam_cfg, lr);
      } catch (const InternalError& e) {
        const auto [ilo, ihi] = tensor_range(batch_input);
        const auto [tlo, thi] =
            exclusive ? tensor_range(batch_csf) : tensor_range(batch_onehot);
        throw InternalError("train: aborted at step " + std::to_string(global_step) + " (lr " +
                            fmt(lr) + "): " + e.what() + "; input range [" + fmt(ilo) + ", " +
                            fmt(ihi) + "], target range [" + fmt(tlo) + ", " + fmt(thi) + "]");
      }
      loss_sum += loss_value;
      ++n_steps;
      ++global_step;
    }

    const double epoch_loss = loss_sum / static_cast<double>(n_steps);
    result.epoch_loss.push_back(epoch_loss);
    log << "epoch " << epoch << "/" << cfg.epochs << "  loss " << fmt(epoch_loss) << "  lr "
        << fmt(lr_schedule(cfg.lr0, cfg.lr_decay, cfg.lr_interval, global_step - 1));

    const bool validate = !val_subjects.empty() && cfg.validate_every > 0 &&
                          (epoch % cfg.validate_every == 0 || epoch == cfg.epochs);
    if (validate) {
      const double macro = validation_macro_dsc(cfg.model, store, val_subjects);
      result.val_epochs.push_back(epoch);
      result.val_dsc.push_back(macro);
      log << "  val-dsc " << fmt(macro);
      if (macro > result.best_val_dsc) {
        result.best_val_dsc = macro;
        result.best_epoch = epoch;
        result.best = store;
        log << "  (best)";
      }
    }
    log << "\n";
  }

  result.last = store;
  if (result.best_epoch == 0) result.best = store;  // never validated: keep the final state
  result.log = log.str();
  return result;
}

// ---------------------------------------------------------------------------
// Fused prediction.

Volume<float> predict_probabilities(const ModelConfig& cfg, ParamStore<float>& store,
                                    const Volume<float>& image, const PredictOptions& opts) {
  cfg.validate();
  if (image.channels != cfg.in_channels)
    throw DimensionError("predict: volume has " + std::to_string(image.channels) +
                         " channels, model expects " + std::to_string(cfg.in_channels));
  const std::size_t p = cfg.patch;
  const Dims3 extent{p, p, p};
  const Volume<float> padded = pad_to(image, extent);
  const PatchGrid grid = plan_patch_grid(padded.dims, extent);

  struct Job {
    Dims3 origin;
    std::size_t transform;
  };
  std::vector<Job> jobs;
  const std::size_t n_aug = opts.augment ? kNumAugmentations : 1;
  for (const Dims3& origin : grid.origins)
    for (std::size_t t = 0; t < n_aug; ++t) jobs.push_back({origin, t});

  std::vector<PatchPrediction<float>> preds(jobs.size());
  auto run_job = [&](std::size_t j) {
    const Job& job = jobs[j];
    const Tensor<float> patch =
        apply_transform(extract_patch(padded, job.origin, extent), job.transform);
    preds[j] = {job.origin, job.transform, forward_eval(cfg, store, patch)};
  };

  std::size_t threads = opts.threads ? opts.threads : env_thread_cap();
  threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  if (threads == 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run_job(j);
  } else {
    // Workers fill independent slots; the fusion pass below runs in fixed
    // order, so results do not depend on the thread count.
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&] {
      for (;;) {
        const std::size_t j = next.fetch_add(1);
        if (j >= jobs.size()) return;
        try {
          run_job(j);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  Volume<float> fused = fuse(grid, preds, cfg.out_channels());
  fused.spacing = image.spacing;
  return crop_to(fused, image.dims);
}

LabelVolume predict_labels(const ModelConfig& cfg, ParamStore<float>& store,
                           const Volume<float>& image, const MaskVolume* mask,
                           const DecisionConfig& decision, const PredictOptions& opts) {
  const Volume<float> probs = predict_probabilities(cfg, store, image, opts);
  if (cfg.head == HeadMode::single_label) return decide_single_label(probs);
  MaskVolume derived;
  if (!mask) {
    derived = mask_from_image(image);
    mask = &derived;
  }
  return decide_exclusive(probs, mask, decision);
}

MaskVolume mask_from_image(const Volume<float>& image) {
  MaskVolume mask(image.dims, 1);
  mask.spacing = image.spacing;
  const std::size_t V = image.voxels();
  for (std::size_t c = 0; c < image.channels; ++c) {
    const float* ch = image.data.data() + c * V;
    for (std::size_t i = 0; i < V; ++i)
      if (ch[i] != 0.0f) mask.data[i] = 1;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Evaluation.

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string cell(double v, int width, int prec) {
  std::ostringstream ss;
  if (std::isnan(v))
    ss << std::setw(width) << "n/a";
  else
    ss << std::setw(width) << std::fixed << std::setprecision(prec) << v;
  return ss.str();
}

}  // namespace

EvalReport evaluate(const std::vector<EvalCase>& cases, const Spacing3& spacing) {
  if (cases.empty()) throw ParameterError("evaluate: no subject pairs");
  EvalReport report;
  for (const EvalCase& ec : cases) {
    if (!ec.pred || !ec.truth) throw ParameterError("evaluate: null volume for '" + ec.id + "'");
    require_same_dims(*ec.pred, *ec.truth, "evaluate");
    SubjectEval se;
    se.id = ec.id;
    for (std::size_t i = 0; i < kTissueClasses.size(); ++i) {
      const std::uint8_t code = kTissueClasses[i];
      const MaskVolume bp = binary_class_volume<std::uint8_t>(*ec.pred, code);
      const MaskVolume bt = binary_class_volume<std::uint8_t>(*ec.truth, code);
      ClassMetrics& cm = se.per_class[i];
      cm.dsc = dsc(bp, bt);
      std::tie(cm.sensitivity, cm.specificity) = sensitivity_specificity(bp, bt);
      try {
        const SurfaceDistanceStats st = surface_distances(bp, bt, spacing);
        double hd = 0.0, sum = 0.0;
        for (double d : st.pred_to_truth) {
          hd = std::max(hd, d);
          sum += d;
        }
        double sum_t = 0.0;
        for (double d : st.truth_to_pred) {
          hd = std::max(hd, d);
          sum_t += d;
        }
        cm.hd = hd;
        cm.asd = (sum + sum_t) /
                 static_cast<double>(st.pred_to_truth.size() + st.truth_to_pred.size());
      } catch (const DegenerateError&) {
        cm.hd = kNan;
        cm.asd = kNan;
      }
    }
    report.subjects.push_back(std::move(se));
  }

  for (std::size_t i = 0; i < kTissueClasses.size(); ++i) {
    auto mean_of = [&](double ClassMetrics::* field) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const SubjectEval& se : report.subjects) {
        const double v = se.per_class[i].*field;
        if (!std::isnan(v)) {
          sum += v;
          ++n;
        }
      }
      return n ? sum / static_cast<double>(n) : kNan;
    };
    report.mean[i] = {mean_of(&ClassMetrics::dsc), mean_of(&ClassMetrics::hd),
                      mean_of(&ClassMetrics::asd), mean_of(&ClassMetrics::sensitivity),
                      mean_of(&ClassMetrics::specificity)};
  }
  return report;
}

std::string EvalReport::to_tsv() const {
  std::ostringstream ss;
  ss << "subject\tclass\tdsc\thd\tasd\tsensitivity\tspecificity\n";
  auto row = [&ss](const std::string& id, const char* cls, const ClassMetrics& m) {
    ss << id << "\t" << cls << "\t" << fmt(m.dsc) << "\t" << fmt(m.hd) << "\t" << fmt(m.asd)
       << "\t" << fmt(m.sensitivity) << "\t" << fmt(m.specificity) << "\n";
  };
  for (const SubjectEval& se : subjects)
    for (std::size_t i = 0; i < kTissueClasses.size(); ++i)
      row(se.id, class_name(kTissueClasses[i]), se.per_class[i]);
  for (std::size_t i = 0; i < kTissueClasses.size(); ++i)
    row("mean", class_name(kTissueClasses[i]), mean[i]);
  return ss.str();
}

std::string EvalReport::to_table() const {
  std::ostringstream ss;
  std::size_t idw = 7;  // fits "subject" and "mean"
  for (const SubjectEval& se : subjects) idw = std::max(idw, se.id.size());
  ss << std::left << std::setw(static_cast<int>(idw)) << "subject" << std::right;
  for (std::uint8_t code : kTissueClasses)
    ss << "  " << std::setw(26) << (std::string(class_name(code)) + " (DSC / HD / ASD)");
  ss << "\n";
  auto row = [&](const std::string& id, const std::array<ClassMetrics, 3>& per_class) {
    ss << std::left << std::setw(static_cast<int>(idw)) << id << std::right;
    for (const ClassMetrics& m : per_class)
      ss << "  " << cell(m.dsc, 8, 4) << cell(m.hd, 9, 3) << cell(m.asd, 9, 3);
    ss << "\n";
  };
  for (const SubjectEval& se : subjects) row(se.id, se.per_class);
  ss << std::string(idw + 3 * 28, '-') << "\n";
  row("mean", mean);
  return ss.str();
}

PairedComparison compare_dsc(const EvalReport& a, const EvalReport& b) {
  if (a.subjects.size() != b.subjects.size())
    throw ParameterError("compare_dsc: reports cover " + std::to_string(a.subjects.size()) +
                         " vs " + std::to_string(b.subjects.size()) + " subjects");
  for (std::size_t i = 0; i < a.subjects.size(); ++i)
    if (a.subjects[i].id != b.subjects[i].id)
      throw ParameterError("compare_dsc: subject mismatch at row " + std::to_string(i) + ": '" +
                           a.subjects[i].id + "' vs '" + b.subjects[i].id + "'");
  PairedComparison out;
  for (std::size_t i = 0; i < kTissueClasses.size(); ++i) {
    std::vector<double> da, db;
    for (std::size_t s = 0; s < a.subjects.size(); ++s) {
      da.push_back(a.subjects[s].per_class[i].dsc);
      db.push_back(b.subjects[s].per_class[i].dsc);
    }
    out.mean_a[i] = a.mean[i].dsc;
    out.mean_b[i] = b.mean[i].dsc;
    try {
      out.tests[i] = paired_t_test(da, db);
    } catch (const DegenerateError&) {
      out.degenerate[i] = true;
    }
  }
  return out;
}

std::string PairedComparison::to_table(const std::string& name_a,
                                       const std::string& name_b) const {
  std::ostringstream ss;
  ss << "paired t-test on per-subject DSC: " << name_a << " vs " << name_b << "\n";
  for (std::size_t i = 0; i < kTissueClasses.size(); ++i) {
    ss << "  " << std::left << std::setw(4) << class_name(kTissueClasses[i]) << std::right
       << "  mean " << fmt(mean_a[i], 4) << " vs " << fmt(mean_b[i], 4) << "  ";
    if (degenerate[i]) {
      ss << "zero-variance differences: not significant / degenerate\n";
    } else {
      ss << "t " << fmt(tests[i].t, 4) << " (df " << fmt(tests[i].df, 3) << "), p "
         << fmt(tests[i].p, 4) << (tests[i].p < 0.05 ? "  (significant at 0.05)" : "") << "\n";
    }
  }
  return ss.str();
}

// ---------------------------------------------------------------------------
// Artifacts.

void save_subject(const std::string& stem, const Subject& subj) {
  subj.check_consistent();
  save_volume(stem + "_image", subj.image);
  save_volume(stem + "_labels", subj.labels);
  save_volume(stem + "_mask", subj.mask);
}

Subject load_subject(const std::string& stem, const std::string& id) {
  Subject s;
  s.id = id;
  s.image = load_volume<float>(stem + "_image");
  s.labels = load_volume<std::uint8_t>(stem + "_labels");
  s.mask = load_volume<std::uint8_t>(stem + "_mask");
  s.check_consistent();
  return s;
}

std::string render_run_manifest(const TrainingConfig& cfg, const TrainResult& result) {
  std::ostringstream ss;
  ss << std::setprecision(10);
  ss << "# isoseg run manifest\n"
     << "version = " << kVersion << "\n"
     << "model.head = " << head_mode_name(cfg.model.head) << "\n"
     << "model.in_channels = " << cfg.model.in_channels << "\n"
     << "model.patch = " << cfg.model.patch << "\n"
     << "model.initial_stride = " << cfg.model.initial_stride << "\n"
     << "model.initial_convs = " << cfg.model.initial_convs << "\n"
     << "model.initial_width = " << cfg.model.initial_width << "\n"
     << "model.levels = " << cfg.model.levels << "\n"
     << "model.layers_per_block = " << cfg.model.layers_per_block << "\n"
     << "model.growth = " << cfg.model.growth << "\n"
     << "model.bottleneck_factor = " << cfg.model.bottleneck_factor << "\n"
     << "model.compression = " << cfg.model.compression << "\n"
     << "model.dropout = " << cfg.model.dropout << "\n"
     << "model.head_width = " << cfg.model.head_width << "\n"
     << "model.bn_eps = " << cfg.model.bn_eps << "\n"
     << "model.bn_momentum = " << cfg.model.bn_momentum << "\n"
     << "loss.lambda = " << result.resolved_loss.lambda << "\n"
     << "loss.eps = " << result.resolved_loss.eps << "\n"
     << "loss.beta_csf = " << result.resolved_loss.beta[kCsf] << "\n"
     << "loss.beta_gm = " << result.resolved_loss.beta[kGm] << "\n"
     << "loss.beta_wm = " << result.resolved_loss.beta[kWm] << "\n"
     << "loss.single_label_beta = " << result.resolved_loss.single_label_beta << "\n"
     << "train.epochs = " << cfg.epochs << "\n"
     << "train.batch_size = " << cfg.batch_size << "\n"
     << "train.patches_per_epoch = " << cfg.patches_per_epoch << "\n"
     << "train.lr0 = " << cfg.lr0 << "\n"
     << "train.lr_decay = " << cfg.lr_decay << "\n"
     << "train.lr_interval = " << cfg.lr_interval << "\n"
     << "train.seed = " << cfg.seed << "\n"
     << "train.folds = " << cfg.folds << "\n"
     << "train.validate_every = " << cfg.validate_every << "\n"
     << "train.augment = " << (cfg.augment ? 1 : 0) << "\n"
     << "result.best_epoch = " << result.best_epoch << "\n"
     << "result.best_val_dsc = " << result.best_val_dsc << "\n"
     << "result.target_reads = " << result.target_reads[kBackground] << " "
     << result.target_reads[kCsf] << " " << result.target_reads[kGm] << " "
     << result.target_reads[kWm] << "\n";
  return ss.str();
}

// ---------------------------------------------------------------------------
// Config parsing.

TrainingConfig parse_training_config(ConfigFile& file) {
  TrainingConfig cfg;
  const HeadMode mode = parse_head_mode(file.get_string("model.head", "exclusive"));
  const std::string preset = file.get_string("model.preset", "toy");
  if (preset == "toy")
    cfg.model = ModelConfig::toy(mode);
  else if (preset == "paper")
    cfg.model = ModelConfig::paper_scale(mode);
  else
    throw ConfigError("model.preset must be 'toy' or 'paper', got '" + preset + "'");

  auto u = [&file](const char* key, std::size_t fallback) {
    const long long v = file.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string(key) + " must be >= 0");
    return static_cast<std::size_t>(v);
  };
  cfg.model.patch = u("model.patch", cfg.model.patch);
  cfg.model.initial_stride = u("model.initial_stride", cfg.model.initial_stride);
  cfg.model.initial_convs = u("model.initial_convs", cfg.model.initial_convs);
  cfg.model.initial_width = u("model.initial_width", cfg.model.initial_width);
  cfg.model.levels = u("model.levels", cfg.model.levels);
  cfg.model.layers_per_block = u("model.layers_per_block", cfg.model.layers_per_block);
  cfg.model.growth = u("model.growth", cfg.model.growth);
  cfg.model.bottleneck_factor = u("model.bottleneck_factor", cfg.model.bottleneck_factor);
  cfg.model.compression = file.get_double("model.compression", cfg.model.compression);
  cfg.model.dropout = file.get_double("model.dropout", cfg.model.dropout);
  cfg.model.head_width = u("model.head_width", cfg.model.head_width);
  cfg.model.bn_eps = file.get_double("model.bn_eps", cfg.model.bn_eps);
  cfg.model.bn_momentum = file.get_double("model.bn_momentum", cfg.model.bn_momentum);

  cfg.loss.lambda = file.get_double("loss.lambda", cfg.loss.lambda);
  cfg.loss.eps = file.get_double("loss.eps", cfg.loss.eps);
  cfg.loss.beta[kCsf] = file.get_double("loss.beta_csf", cfg.loss.beta[kCsf]);
  cfg.loss.beta[kGm] = file.get_double("loss.beta_gm", cfg.loss.beta[kGm]);
  cfg.loss.beta[kWm] = file.get_double("loss.beta_wm", cfg.loss.beta[kWm]);
  cfg.loss.single_label_beta =
      file.get_double("loss.single_label_beta", cfg.loss.single_label_beta);

  cfg.epochs = u("train.epochs", cfg.epochs);
  cfg.batch_size = u("train.batch_size", cfg.batch_size);
  cfg.patches_per_epoch = u("train.patches_per_epoch", cfg.patches_per_epoch);
  cfg.lr0 = file.get_double("train.lr0", cfg.lr0);
  cfg.lr_decay = file.get_double("train.lr_decay", cfg.lr_decay);
  cfg.lr_interval = u("train.lr_interval", cfg.lr_interval);
  cfg.seed = static_cast<std::uint64_t>(file.get_int("train.seed", static_cast<long long>(cfg.seed)));
  cfg.folds = u("train.folds", cfg.folds);
  cfg.validate_every = u("train.validate_every", cfg.validate_every);
  cfg.augment = file.get_int("train.augment", cfg.augment ? 1 : 0) != 0;

  cfg.validate();
  return cfg;
}

PhantomSpec parse_phantom_spec(ConfigFile& file) {
  PhantomSpec spec;
  const long long d = file.get_int("phantom.dims", static_cast<long long>(spec.dims[0]));
  if (d < 1) throw ConfigError("phantom.dims must be positive");
  spec.dims = {static_cast<std::size_t>(d), static_cast<std::size_t>(d),
               static_cast<std::size_t>(d)};
  spec.seed = static_cast<std::uint64_t>(
      file.get_int("phantom.seed", static_cast<long long>(spec.seed)));
  spec.ellipsoid_fill = file.get_double("phantom.ellipsoid_fill", spec.ellipsoid_fill);
  spec.csf_pockets = static_cast<std::size_t>(
      file.get_int("phantom.csf_pockets", static_cast<long long>(spec.csf_pockets)));
  spec.field_cell = static_cast<std::size_t>(
      file.get_int("phantom.field_cell", static_cast<long long>(spec.field_cell)));
  spec.class_ratio[0] = file.get_double("phantom.ratio_csf", spec.class_ratio[0]);
  spec.class_ratio[1] = file.get_double("phantom.ratio_gm", spec.class_ratio[1]);
  spec.class_ratio[2] = file.get_double("phantom.ratio_wm", spec.class_ratio[2]);
  spec.noise_level = file.get_double("phantom.noise_level", spec.noise_level);
  spec.blur_sigma = file.get_double("phantom.blur_sigma", spec.blur_sigma);
  spec.validate();
  return spec;
}

}  // namespace isoseg
