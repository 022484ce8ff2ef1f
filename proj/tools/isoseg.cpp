// isoseg: volumetric tissue segmentation workbench.
//
// Subcommands: phantom, split, train, predict, evaluate, beta, gradcheck.
// Exit code 0 on success, otherwise the error category code (the message is
// prefixed with the category name, so scripts can match either).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "isoseg/fdsuite.hpp"
#include "isoseg/patching.hpp"
#include "isoseg/pipeline.hpp"

using namespace isoseg;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::string> roster_ids(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  const std::string tail = "_image.volmeta";
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > tail.size() && name.compare(name.size() - tail.size(), tail.size(), tail) == 0)
      ids.push_back(name.substr(0, name.size() - tail.size()));
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw IoError("no subjects (*_image.volmeta) under " + dir);
  return ids;
}

std::vector<Subject> load_roster(const std::string& dir) {
  std::vector<Subject> subjects;
  for (const std::string& id : roster_ids(dir)) {
    Subject s = load_subject((fs::path(dir) / id).string(), id);
    normalize_intensity(s.image);
    subjects.push_back(std::move(s));
  }
  return subjects;
}

TrainingConfig make_training_config(const std::string& config_path, const std::string& mode,
                                    std::optional<std::uint64_t> seed) {
  TrainingConfig cfg;
  if (!config_path.empty()) {
    ConfigFile file = ConfigFile::parse_file(config_path);
    cfg = parse_training_config(file);
    file.reject_unknown_keys();
  } else {
    cfg.model = ModelConfig::toy(HeadMode::exclusive);
  }
  if (!mode.empty()) cfg.model.head = parse_head_mode(mode);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::string out, config;
  std::size_t count = 1;
  std::uint64_t seed = 1;
  bool histograms = false;
};

int run_phantom(const PhantomArgs& a) {
  PhantomSpec spec;
  if (!a.config.empty()) {
    ConfigFile file = ConfigFile::parse_file(a.config);
    spec = parse_phantom_spec(file);
    file.reject_unknown_keys();
  }
  fs::create_directories(a.out);
  for (std::size_t i = 0; i < a.count; ++i) {
    spec.seed = a.seed + i;
    const Subject subj = generate_phantom(spec);
    save_subject((fs::path(a.out) / subj.id).string(), subj);
    std::array<std::size_t, kNumClasses> counts{};
    for (std::uint8_t v : subj.labels.data) ++counts[v];
    std::cout << subj.id << "  " << dims_str(subj.labels.dims) << "  CSF " << counts[kCsf]
              << "  GM " << counts[kGm] << "  WM " << counts[kWm];
    if (a.histograms) {
      const HistogramTable hist = export_histograms(subj);
      write_text_file((fs::path(a.out) / (subj.id + "_histogram.tsv")).string(), hist.to_tsv());
      std::cout << "  GM/WM overlap " << std::fixed << std::setprecision(3)
                << histogram_overlap(hist, 0, kGm, kWm) << "/"
                << histogram_overlap(hist, 1, kGm, kWm) << std::defaultfloat;
    }
    std::cout << "\n";
  }
  return 0;
}

struct SplitArgs {
  std::size_t count = 0, folds = 5;
  std::uint64_t seed = 1;
};

int run_split(const SplitArgs& a) {
  const auto splits = kfold_split(a.count, a.folds, a.seed);
  for (std::size_t f = 0; f < splits.size(); ++f) {
    std::cout << "fold " << f << ": val";
    for (std::size_t i : splits[f].val) std::cout << " " << i;
    std::cout << " | train";
    for (std::size_t i : splits[f].train) std::cout << " " << i;
    std::cout << "\n";
  }
  return 0;
}

struct TrainArgs {
  std::string data, out, config, mode;
  std::size_t fold = 0;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  const TrainingConfig cfg = make_training_config(a.config, a.mode, a.seed);
  const std::vector<Subject> subjects = load_roster(a.data);
  if (a.fold >= cfg.folds)
    throw ParameterError("train: fold " + std::to_string(a.fold) + " out of range (folds = " +
                         std::to_string(cfg.folds) + ")");
  const auto splits = kfold_split(subjects.size(), cfg.folds, cfg.seed);
  std::vector<const Subject*> tr, va;
  for (std::size_t i : splits[a.fold].train) tr.push_back(&subjects[i]);
  for (std::size_t i : splits[a.fold].val) va.push_back(&subjects[i]);

  std::cout << "training " << head_mode_name(cfg.model.head) << " on " << tr.size()
            << " subjects (" << va.size() << " validation), fold " << a.fold << "/"
            << cfg.folds << ", seed " << cfg.seed << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result = train(cfg, tr, va);
  const double dt = seconds_since(t0);

  fs::create_directories(a.out);
  const fs::path out(a.out);
  save_checkpoint((out / "checkpoint-best").string(), result.best);
  save_checkpoint((out / "checkpoint-final").string(), result.last);
  write_text_file((out / "run-manifest.txt").string(), render_run_manifest(cfg, result));
  write_text_file((out / "train.log").string(), result.log);

  if (cfg.model.head == HeadMode::exclusive)
    std::cout << "resolved betas: CSF " << result.resolved_loss.beta[kCsf] << ", WM "
              << result.resolved_loss.beta[kWm] << "\n";
  if (result.best_epoch > 0)
    std::cout << "best validation macro-DSC " << result.best_val_dsc << " at epoch "
              << result.best_epoch << "\n";
  std::cout << "done: " << cfg.epochs << " epochs in " << std::fixed << std::setprecision(1)
            << dt << " s; artifacts under " << a.out << "\n";
  return 0;
}

struct PredictArgs {
  std::string checkpoint, image, out, mask, config, mode;
  bool no_augment = false;
  std::size_t threads = 0;
};

int run_predict(const PredictArgs& a) {
  const TrainingConfig cfg = make_training_config(a.config, a.mode, std::nullopt);
  ParamStore<float> store = load_checkpoint<float>(a.checkpoint);
  Volume<float> image = load_volume<float>(a.image);
  normalize_intensity(image);

  MaskVolume mask_storage;
  const MaskVolume* mask = nullptr;
  if (!a.mask.empty()) {
    mask_storage = load_volume<std::uint8_t>(a.mask);
    mask = &mask_storage;
  }

  PredictOptions opts;
  opts.augment = !a.no_augment;
  opts.threads = a.threads;

  const auto t0 = std::chrono::steady_clock::now();
  const Volume<float> probs = predict_probabilities(cfg.model, store, image, opts);
  LabelVolume labels;
  if (cfg.model.head == HeadMode::single_label) {
    labels = decide_single_label(probs);
  } else {
    if (!mask) {
      mask_storage = mask_from_image(image);
      mask = &mask_storage;
    }
    labels = decide_exclusive(probs, mask, DecisionConfig{});
  }
  const double dt = seconds_since(t0);

  save_volume(a.out + "_probs", probs);
  save_volume(a.out + "_labels", labels);

  Dims3 padded = image.dims;
  const std::size_t p = cfg.model.patch;
  for (auto& d : padded) d = std::max(d, p);
  const PatchGrid grid = plan_patch_grid(padded, {p, p, p});
  std::cout << "fused " << grid.origins.size() << " patches x "
            << (opts.augment ? kNumAugmentations : 1) << " passes over "
            << dims_str(image.dims) << " in " << std::fixed << std::setprecision(2) << dt
            << " s -> " << a.out << "_{probs,labels}\n";
  return 0;
}

struct EvaluateArgs {
  std::string data, pred, pred_b, tsv;
};

EvalReport report_for(const std::vector<std::string>& ids, const std::string& truth_dir,
                      const std::string& pred_dir, std::vector<LabelVolume>& storage) {
  std::vector<EvalCase> cases;
  const std::size_t base = storage.size();
  for (const std::string& id : ids) {
    storage.push_back(load_volume<std::uint8_t>((fs::path(truth_dir) / (id + "_labels")).string()));
    storage.push_back(load_volume<std::uint8_t>((fs::path(pred_dir) / (id + "_labels")).string()));
  }
  for (std::size_t i = 0; i < ids.size(); ++i)
    cases.push_back({ids[i], &storage[base + 2 * i + 1], &storage[base + 2 * i]});
  return evaluate(cases, storage[base].spacing);
}

int run_evaluate(const EvaluateArgs& a) {
  const std::vector<std::string> ids = roster_ids(a.data);
  std::vector<LabelVolume> storage;
  storage.reserve(ids.size() * 4);
  const EvalReport rep = report_for(ids, a.data, a.pred, storage);
  std::cout << rep.to_table();
  if (!a.tsv.empty()) write_text_file(a.tsv, rep.to_tsv());
  if (!a.pred_b.empty()) {
    const EvalReport rep_b = report_for(ids, a.data, a.pred_b, storage);
    std::cout << "\n[" << a.pred_b << "]\n" << rep_b.to_table() << "\n"
              << compare_dsc(rep, rep_b).to_table(a.pred, a.pred_b);
  }
  return 0;
}

struct BetaArgs {
  double lambda = 0.1;
  // published training-set prevalences of the reference experiment
  double csf = 0.2184, gm = 0.467, wm = 0.3145;
  std::string from_data;
};

int run_beta(const BetaArgs& a) {
  std::array<double, 3> frac{a.csf, a.gm, a.wm};
  if (!a.from_data.empty()) {
    std::vector<Subject> subjects = load_roster(a.from_data);
    std::vector<const LabelVolume*> maps;
    for (const Subject& s : subjects) maps.push_back(&s.labels);
    const ClassPrevalence prev = compute_prevalence(maps);
    frac = {prev.fraction(kCsf), prev.fraction(kGm), prev.fraction(kWm)};
  }
  // select_beta takes counts; scale fractions to a large integer total
  const std::uint64_t total = 1'000'000'000ULL;
  std::array<double, 3> betas{};
  for (std::size_t i = 0; i < 3; ++i)
    betas[i] = select_beta(
        static_cast<std::uint64_t>(std::llround(frac[i] * static_cast<double>(total))), total,
        a.lambda);
  std::cout << "lambda = " << a.lambda << "\n"
            << "class  prevalence  beta\n"
            << std::fixed << std::setprecision(4);
  const char* names[3] = {"CSF", "GM", "WM"};
  for (std::size_t i = 0; i < 3; ++i)
    std::cout << std::left << std::setw(7) << names[i] << std::right << std::setw(10) << frac[i]
              << std::setw(8) << betas[i] << "\n";
  std::cout << "published reference betas: CSF 1.5, WM 1.0 (GM excluded from exclusive"
               " training)\n"
               "note: the prevalence formula above does not reproduce that 1.5 / 1.0 pair at"
               " these fractions;\n      training defaults follow the formula.\n";
  return 0;
}

int run_gradcheck() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<FdCaseResult> results = run_fd_suite();
  std::size_t failed = 0;
  for (const FdCaseResult& r : results) {
    std::cout << (r.pass() ? "PASS" : "FAIL") << "  " << std::left << std::setw(36) << r.name
              << std::right << "  max rel err " << std::scientific << std::setprecision(2)
              << r.max_rel_error << " (tol " << r.tolerance << ", " << std::defaultfloat
              << r.checked << " components)\n";
    failed += r.pass() ? 0 : 1;
  }
  std::cout << results.size() << " cases in " << std::fixed << std::setprecision(1)
            << seconds_since(t0) << " s\n";
  if (failed)
    throw InternalError("gradient check failed for " + std::to_string(failed) + " case(s)");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"isoseg: volumetric tissue segmentation workbench"};
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "generate synthetic two-channel subjects");
  phantom->add_option("--out", pa.out, "output directory")->required();
  phantom->add_option("--count", pa.count, "number of subjects (seeds seed..seed+count-1)");
  phantom->add_option("--seed", pa.seed, "base seed");
  phantom->add_option("--config", pa.config, "phantom.* config file");
  phantom->add_flag("--histograms", pa.histograms, "also write intensity histogram TSVs");

  SplitArgs sa;
  auto* split = app.add_subcommand("split", "print the seeded cross-validation folds");
  split->add_option("--count", sa.count, "number of subjects")->required();
  split->add_option("--folds", sa.folds, "fold count");
  split->add_option("--seed", sa.seed, "shuffle seed");

  TrainArgs ta;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "train one cross-validation fold");
  train_cmd->add_option("--data", ta.data, "subject directory")->required();
  train_cmd->add_option("--out", ta.out, "artifact directory")->required();
  train_cmd->add_option("--config", ta.config, "model/loss/train config file");
  train_cmd->add_option("--mode", ta.mode, "override head: exclusive | single_label");
  train_cmd->add_option("--fold", ta.fold, "fold index");
  auto* seed_opt = train_cmd->add_option("--seed", train_seed, "override the config seed");

  PredictArgs pra;
  auto* predict = app.add_subcommand("predict", "fused whole-volume segmentation");
  predict->add_option("--checkpoint", pra.checkpoint, "checkpoint prefix")->required();
  predict->add_option("--image", pra.image, "input volume stem")->required();
  predict->add_option("--out", pra.out, "output stem")->required();
  predict->add_option("--mask", pra.mask, "brain mask stem (exclusive head)");
  predict->add_option("--config", pra.config, "model config file (must match checkpoint)");
  predict->add_option("--mode", pra.mode, "override head: exclusive | single_label");
  predict->add_flag("--no-augment", pra.no_augment, "single pass per patch");
  predict->add_option("--threads", pra.threads, "worker threads (default ISOSEG_THREADS or 1)");

  EvaluateArgs ea;
  auto* eval_cmd = app.add_subcommand("evaluate", "score predictions against ground truth");
  eval_cmd->add_option("--data", ea.data, "truth subject directory")->required();
  eval_cmd->add_option("--pred", ea.pred, "prediction directory")->required();
  eval_cmd->add_option("--pred-b", ea.pred_b, "second prediction set for a paired t-test");
  eval_cmd->add_option("--tsv", ea.tsv, "also write the long-form TSV here");

  BetaArgs ba;
  auto* beta = app.add_subcommand("beta", "class-prevalence beta selection");
  beta->add_option("--lambda", ba.lambda, "recall margin");
  beta->add_option("--csf", ba.csf, "CSF fraction of labeled voxels");
  beta->add_option("--gm", ba.gm, "GM fraction");
  beta->add_option("--wm", ba.wm, "WM fraction");
  beta->add_option("--from-data", ba.from_data, "compute prevalences from a subject directory");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (phantom->parsed()) return run_phantom(pa);
    if (split->parsed()) return run_split(sa);
    if (train_cmd->parsed()) {
      if (seed_opt->count()) ta.seed = train_seed;
      return run_train(ta);
    }
    if (predict->parsed()) return run_predict(pra);
    if (eval_cmd->parsed()) return run_evaluate(ea);
    if (beta->parsed()) return run_beta(ba);
    if (gradcheck->parsed()) return run_gradcheck();
  } catch (const Error& e) {
    std::cerr << "isoseg: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "isoseg: internal: " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::internal);
  }
  return 0;
}
