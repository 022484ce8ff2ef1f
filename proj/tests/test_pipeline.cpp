#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <unistd.h>

#include "doctest.h"
#include "isoseg/adam.hpp"
#include "isoseg/phantom.hpp"
#include "isoseg/pipeline.hpp"
#include "isoseg/rng.hpp"

using namespace isoseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("isoseg_pipe_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

/// Smallest config the walker accepts: patch 8, one level.
ModelConfig mini_model(HeadMode mode) {
  ModelConfig c = ModelConfig::toy(mode);
  c.patch = 8;
  c.levels = 1;
  c.layers_per_block = 1;
  c.growth = 2;
  c.initial_width = 4;
  c.initial_convs = 1;
  c.head_width = 8;
  c.dropout = 0.0;
  return c;
}

TrainingConfig mini_train(HeadMode mode, std::uint64_t seed) {
  TrainingConfig cfg;
  cfg.model = mini_model(mode);
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.patches_per_epoch = 2;
  cfg.seed = seed;
  cfg.validate_every = 0;
  return cfg;
}

Subject cube_phantom(std::size_t extent, std::uint64_t seed) {
  PhantomSpec spec;
  spec.dims = {extent, extent, extent};
  spec.seed = seed;
  return generate_phantom(spec);
}

bool stores_equal(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.params.size() != b.params.size() || a.buffers.size() != b.buffers.size()) return false;
  for (const auto& [name, t] : a.params) {
    auto it = b.params.find(name);
    if (it == b.params.end() || it->second.data != t.data) return false;
  }
  for (const auto& [name, v] : a.buffers) {
    auto it = b.buffers.find(name);
    if (it == b.buffers.end() || it->second != v) return false;
  }
  return true;
}

/// Head conv zeroed: logits are 0 everywhere, so the output probabilities are
/// constant (sigmoid -> 0.5, softmax -> 0.25) regardless of the input.
ParamStore<float> constant_stub(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore<float> store = build_params<float>(cfg, seed);
  for (auto& v : store.param("head.out.w").data) v = 0.0f;
  for (auto& v : store.param("head.out.bias").data) v = 0.0f;
  return store;
}

}  // namespace

// ---------------------------------------------------------------------------
// Normalization.

TEST_CASE("normalize_intensity") {
  SUBCASE("hand example: nonzero {2, 4} maps to {2/3, 4/3}") {
    Volume<float> v({1, 1, 3}, 1);
    v.data = {2.0f, 0.0f, 4.0f};
    normalize_intensity(v);
    CHECK(v.data[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-7));
    CHECK(v.data[1] == 0.0f);
    CHECK(v.data[2] == doctest::Approx(4.0 / 3.0).epsilon(1e-7));
  }

  SUBCASE("random volume: per-channel nonzero mean lands on 1, zeros survive") {
    Rng rng(11);
    Volume<float> v({6, 5, 7}, 2);
    for (auto& x : v.data)
      x = rng.uniform() < 0.3 ? 0.0f : static_cast<float>(20.0 + 10.0 * rng.uniform());
    v.data[3] = 0.0f;
    normalize_intensity(v);
    for (std::size_t c = 0; c < 2; ++c) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < v.voxels(); ++i) {
        const float x = v.data[c * v.voxels() + i];
        if (x != 0.0f) {
          sum += x;
          ++n;
        }
      }
      CHECK(sum / static_cast<double>(n) == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(v.data[3] == 0.0f);

    SUBCASE("idempotent within 1e-7") {
      Volume<float> w = v;
      normalize_intensity(w);
      for (std::size_t i = 0; i < v.size(); ++i)
        CHECK(std::abs(w.data[i] - v.data[i]) < 1e-7f);
    }
  }

  SUBCASE("channels normalize independently") {
    Volume<float> v({1, 1, 2}, 2);
    v.data = {2.0f, 2.0f, 800.0f, 800.0f};
    normalize_intensity(v);
    for (float x : v.data) CHECK(x == doctest::Approx(1.0));
  }

  SUBCASE("all-zero channel is an error") {
    Volume<float> v({2, 2, 2}, 2);
    for (std::size_t i = 0; i < v.voxels(); ++i) v.data[i] = 1.0f;  // channel 1 left zero
    CHECK_THROWS_AS(normalize_intensity(v), DegenerateError);
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule.

TEST_CASE("stepped lr decay") {
  CHECK(lr_schedule(0.0005, 0.9, 500, 0) == 0.0005);
  CHECK(lr_schedule(0.0005, 0.9, 500, 499) == 0.0005);
  CHECK(lr_schedule(0.0005, 0.9, 500, 500) == 0.0005 * 0.9);  // 0.00045 exactly
  CHECK(lr_schedule(0.0005, 0.9, 500, 999) == 0.0005 * 0.9);
  CHECK(lr_schedule(0.0005, 0.9, 500, 1000) == doctest::Approx(0.000405).epsilon(1e-12));
  for (std::size_t s = 1; s < 2000; ++s)
    CHECK(lr_schedule(0.0005, 0.9, 500, s) <= lr_schedule(0.0005, 0.9, 500, s - 1));
  CHECK_THROWS_AS(lr_schedule(0.0005, 0.9, 0, 1), ParameterError);
}

// ---------------------------------------------------------------------------
// Fold splits.

TEST_CASE("kfold_split") {
  SUBCASE("10 subjects, 5 folds: validation slices of 2") {
    const auto splits = kfold_split(10, 5, 3);
    REQUIRE(splits.size() == 5);
    std::vector<int> seen(10, 0);
    for (const FoldSplit& f : splits) {
      CHECK(f.val.size() == 2);
      CHECK(f.train.size() == 8);
      for (std::size_t i : f.val) ++seen[i];
      // no subject sits in both halves of one split
      for (std::size_t i : f.val)
        CHECK(std::find(f.train.begin(), f.train.end(), i) == f.train.end());
    }
    for (int s : seen) CHECK(s == 1);  // validation slices partition the roster
  }

  SUBCASE("uneven split sizes differ by at most one") {
    const auto splits = kfold_split(11, 5, 1);
    std::size_t lo = 11, hi = 0;
    for (const FoldSplit& f : splits) {
      lo = std::min(lo, f.val.size());
      hi = std::max(hi, f.val.size());
      CHECK(f.val.size() + f.train.size() == 11);
    }
    CHECK(lo >= 2);
    CHECK(hi <= 3);
  }

  SUBCASE("seed determinism") {
    const auto a = kfold_split(10, 5, 42), b = kfold_split(10, 5, 42);
    for (std::size_t f = 0; f < 5; ++f) {
      CHECK(a[f].val == b[f].val);
      CHECK(a[f].train == b[f].train);
    }
    const auto c = kfold_split(10, 5, 43);
    bool same = true;
    for (std::size_t f = 0; f < 5; ++f) same = same && a[f].val == c[f].val;
    CHECK_FALSE(same);
  }

  SUBCASE("errors") {
    CHECK_THROWS_AS(kfold_split(4, 5, 1), ParameterError);  // fewer subjects than folds
    CHECK_THROWS_AS(kfold_split(10, 1, 1), ParameterError);
  }
}

// ---------------------------------------------------------------------------
// Training loop.

TEST_CASE("zero epochs returns the initialization") {
  const Subject s = cube_phantom(16, 21);
  TrainingConfig cfg = mini_train(HeadMode::exclusive, 5);
  cfg.epochs = 0;
  const TrainResult r = train(cfg, {&s}, {});
  const ParamStore<float> init = build_params<float>(cfg.model, cfg.seed);
  CHECK(stores_equal(r.best, init));
  CHECK(stores_equal(r.last, init));
  CHECK(r.epoch_loss.empty());
}

TEST_CASE("training is deterministic under the seed") {
  const Subject s = cube_phantom(16, 22);
  TrainingConfig cfg = mini_train(HeadMode::exclusive, 9);
  cfg.epochs = 2;
  const TrainResult a = train(cfg, {&s}, {});
  const TrainResult b = train(cfg, {&s}, {});
  CHECK(stores_equal(a.last, b.last));
  CHECK(a.epoch_loss == b.epoch_loss);

  cfg.seed = 10;
  const TrainResult c = train(cfg, {&s}, {});
  CHECK_FALSE(stores_equal(a.last, c.last));
}

TEST_CASE("strategy instrumentation: exclusive never builds a GM target") {
  const Subject s = cube_phantom(16, 23);

  TrainingConfig ex = mini_train(HeadMode::exclusive, 4);
  const TrainResult re = train(ex, {&s}, {});
  CHECK(re.target_reads[kGm] == 0);
  CHECK(re.target_reads[kBackground] == 0);
  CHECK(re.target_reads[kCsf] == ex.patches_per_epoch);
  CHECK(re.target_reads[kWm] == ex.patches_per_epoch);

  TrainingConfig sl = mini_train(HeadMode::single_label, 4);
  const TrainResult rs = train(sl, {&s}, {});
  CHECK(rs.target_reads[kGm] == sl.patches_per_epoch);  // one-hot touches every class
}

TEST_CASE("unset exclusive betas resolve from training prevalence") {
  const Subject s = cube_phantom(16, 24);
  TrainingConfig cfg = mini_train(HeadMode::exclusive, 6);
  const TrainResult r = train(cfg, {&s}, {});
  const ClassPrevalence prev = compute_prevalence({&s.labels});
  CHECK(r.resolved_loss.beta[kCsf] == select_beta(prev, kCsf, cfg.loss.lambda));
  CHECK(r.resolved_loss.beta[kWm] == select_beta(prev, kWm, cfg.loss.lambda));
  CHECK(r.resolved_loss.beta[kGm] == 0.0);  // untouched: GM is not trained

  SUBCASE("explicit betas are left alone") {
    cfg.loss.beta[kCsf] = 1.75;
    const TrainResult r2 = train(cfg, {&s}, {});
    CHECK(r2.resolved_loss.beta[kCsf] == 1.75);
    CHECK(r2.resolved_loss.beta[kWm] == select_beta(prev, kWm, cfg.loss.lambda));
  }
}

TEST_CASE("non-finite input aborts with step/lr/range diagnostics") {
  Subject s = cube_phantom(16, 25);
  for (auto& v : s.image.data) v = std::numeric_limits<float>::infinity();
  TrainingConfig cfg = mini_train(HeadMode::exclusive, 7);
  cfg.loss.beta[kCsf] = cfg.loss.beta[kWm] = 1.0;
  try {
    train(cfg, {&s}, {});
    FAIL("expected InternalError");
  } catch (const InternalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 0") != std::string::npos);
    CHECK(msg.find("lr ") != std::string::npos);
    CHECK(msg.find("input range") != std::string::npos);
    CHECK(msg.find("target range") != std::string::npos);
  }
}

TEST_CASE("validation pass records history and snapshots the best model") {
  const Subject tr = cube_phantom(16, 26), va = cube_phantom(16, 27);
  TrainingConfig cfg = mini_train(HeadMode::exclusive, 8);
  cfg.epochs = 3;
  cfg.validate_every = 1;
  const TrainResult r = train(cfg, {&tr}, {&va});
  REQUIRE(r.val_epochs.size() == 3);
  CHECK(r.val_epochs == std::vector<std::size_t>{1, 2, 3});
  CHECK(r.val_dsc.size() == 3);
  CHECK(r.best_val_dsc == *std::max_element(r.val_dsc.begin(), r.val_dsc.end()));
  CHECK(r.best_epoch >= 1);
  CHECK(r.log.find("val-dsc") != std::string::npos);
  for (double d : r.val_dsc) {
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
}

TEST_CASE("fifty toy epochs: window-5 smoothed loss decreases strictly") {
  const Subject a = cube_phantom(32, 31), b = cube_phantom(32, 32);
  TrainingConfig cfg;
  cfg.model = ModelConfig::toy(HeadMode::exclusive);
  cfg.epochs = 50;
  cfg.batch_size = 2;
  cfg.patches_per_epoch = 4;
  cfg.seed = 12;
  cfg.validate_every = 0;
  const TrainResult r = train(cfg, {&a, &b}, {});
  REQUIRE(r.epoch_loss.size() == 50);
  for (double l : r.epoch_loss) {
    CHECK(l > 0.0);
    CHECK(l < 1.0 + 1e-6);
  }
  std::vector<double> smooth;
  for (std::size_t i = 4; i < r.epoch_loss.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = i - 4; j <= i; ++j) s += r.epoch_loss[j];
    smooth.push_back(s / 5.0);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] < smooth[i - 1]);
}

// ---------------------------------------------------------------------------
// Fused prediction.

TEST_CASE("constant stub predicts constants and uniform labels") {
  SUBCASE("exclusive head: 0.5 everywhere, CSF inside the mask") {
    const ModelConfig cfg = mini_model(HeadMode::exclusive);
    ParamStore<float> store = constant_stub(cfg, 3);
    Volume<float> img({12, 11, 10}, 2);
    Rng rng(5);
    for (auto& v : img.data) v = static_cast<float>(0.5 + rng.uniform());  // all nonzero
    const Volume<float> probs = predict_probabilities(cfg, store, img);
    CHECK(probs.channels == 2);
    CHECK(probs.dims == img.dims);
    for (float p : probs.data) CHECK(std::abs(p - 0.5) < 1e-12);

    const LabelVolume labels = predict_labels(cfg, store, img, nullptr);
    for (std::uint8_t l : labels.data) CHECK(l == kCsf);  // (0.5, 0.5) decides CSF

    MaskVolume mask(img.dims, 1);  // only one corner voxel inside
    mask.data[0] = 1;
    const LabelVolume masked = predict_labels(cfg, store, img, &mask);
    CHECK(masked.data[0] == kCsf);
    for (std::size_t i = 1; i < masked.data.size(); ++i) CHECK(masked.data[i] == kBackground);
  }

  SUBCASE("single-label head: 0.25 everywhere, four-way tie is background") {
    const ModelConfig cfg = mini_model(HeadMode::single_label);
    ParamStore<float> store = constant_stub(cfg, 3);
    Volume<float> img({9, 9, 9}, 2);
    for (auto& v : img.data) v = 1.0f;
    const Volume<float> probs = predict_probabilities(cfg, store, img);
    CHECK(probs.channels == 4);
    for (float p : probs.data) CHECK(std::abs(p - 0.25) < 1e-12);
    const LabelVolume labels = predict_labels(cfg, store, img, nullptr);
    for (std::uint8_t l : labels.data) CHECK(l == kBackground);
  }
}

TEST_CASE("prediction is deterministic and thread-count independent") {
  const ModelConfig cfg = mini_model(HeadMode::exclusive);
  ParamStore<float> store = build_params<float>(cfg, 17);
  Volume<float> img({12, 12, 12}, 2);
  Rng rng(6);
  for (auto& v : img.data) v = static_cast<float>(rng.normal());

  const Volume<float> p1 = predict_probabilities(cfg, store, img);
  const Volume<float> p2 = predict_probabilities(cfg, store, img);
  CHECK(p1.data == p2.data);  // bitwise

  ::setenv("ISOSEG_THREADS", "3", 1);
  const Volume<float> p3 = predict_probabilities(cfg, store, img);
  ::unsetenv("ISOSEG_THREADS");
  CHECK(p1.data == p3.data);

  PredictOptions seq;
  seq.threads = 2;
  const Volume<float> p4 = predict_probabilities(cfg, store, img, seq);
  CHECK(p1.data == p4.data);
}

TEST_CASE("volumes smaller than the patch are padded and cropped back") {
  const ModelConfig cfg = mini_model(HeadMode::exclusive);
  ParamStore<float> store = constant_stub(cfg, 2);
  Volume<float> img({6, 10, 9}, 2);  // axis 0 below the patch extent
  for (auto& v : img.data) v = 2.0f;
  const Volume<float> probs = predict_probabilities(cfg, store, img);
  CHECK(probs.dims == img.dims);
  for (float p : probs.data) CHECK(std::abs(p - 0.5) < 1e-12);
}

TEST_CASE("channel mismatch is rejected") {
  const ModelConfig cfg = mini_model(HeadMode::exclusive);
  ParamStore<float> store = build_params<float>(cfg, 1);
  Volume<float> img({8, 8, 8}, 3);
  CHECK_THROWS_AS(predict_probabilities(cfg, store, img), DimensionError);
}

// ---------------------------------------------------------------------------
// Evaluation reports.

namespace {

LabelVolume three_class_volume() {
  LabelVolume v({6, 6, 6}, 1);
  for (std::size_t z = 1; z < 5; ++z)
    for (std::size_t y = 1; y < 5; ++y)
      for (std::size_t x = 1; x < 5; ++x) v.at(0, z, y, x) = kGm;
  v.at(0, 2, 2, 2) = kCsf;
  v.at(0, 3, 3, 3) = kWm;
  v.at(0, 2, 3, 2) = kWm;
  return v;
}

}  // namespace

TEST_CASE("evaluate: perfect prediction scores 1 / 0 / 0") {
  const LabelVolume truth = three_class_volume();
  const EvalReport rep = evaluate({{"s1", &truth, &truth}});
  REQUIRE(rep.subjects.size() == 1);
  for (const ClassMetrics& m : rep.subjects[0].per_class) {
    CHECK(m.dsc == 1.0);
    CHECK(m.hd == 0.0);
    CHECK(m.asd == 0.0);
    CHECK(m.sensitivity == 1.0);
    CHECK(m.specificity == 1.0);
  }
  for (const ClassMetrics& m : rep.mean) {
    CHECK(m.dsc == 1.0);
    CHECK(m.hd == 0.0);
  }
}

TEST_CASE("evaluate: report layout and degenerate classes") {
  LabelVolume truth = three_class_volume();
  LabelVolume pred = truth;
  // remove WM entirely from both: DSC convention 1, distances undefined
  for (auto& v : truth.data)
    if (v == kWm) v = kGm;
  for (auto& v : pred.data)
    if (v == kWm) v = kGm;
  const EvalReport rep = evaluate({{"s1", &pred, &truth}});
  const ClassMetrics& wm = rep.subjects[0].per_class[2];
  CHECK(wm.dsc == 1.0);
  CHECK(std::isnan(wm.hd));
  CHECK(std::isnan(wm.asd));

  const std::string table = rep.to_table();
  CHECK(table.find("CSF (DSC / HD / ASD)") != std::string::npos);
  CHECK(table.find("GM (DSC / HD / ASD)") != std::string::npos);
  CHECK(table.find("WM (DSC / HD / ASD)") != std::string::npos);
  CHECK(table.find("mean") != std::string::npos);
  CHECK(table.find("n/a") != std::string::npos);

  const std::string tsv = rep.to_tsv();
  std::size_t lines = 0;
  for (char c : tsv)
    if (c == '\n') ++lines;
  CHECK(lines == 1 + 3 + 3);  // header + subject rows + mean rows

  SUBCASE("errors") {
    CHECK_THROWS_AS(evaluate({}), ParameterError);
    LabelVolume other({5, 5, 5}, 1);
    CHECK_THROWS_AS(evaluate({{"s1", &pred, &other}}), DimensionError);
  }
}

TEST_CASE("paired DSC comparison surfaces zero variance as degenerate") {
  const LabelVolume truth = three_class_volume();
  LabelVolume pred_a = truth;
  LabelVolume pred_b = truth;
  pred_b.at(0, 1, 1, 1) = kWm;  // perturb one run
  LabelVolume truth2 = truth;
  truth2.at(0, 4, 4, 4) = kCsf;
  LabelVolume pred_b2 = truth2;
  pred_b2.at(0, 1, 2, 1) = kCsf;

  const EvalReport ra = evaluate({{"s1", &pred_a, &truth}, {"s2", &truth2, &truth2}});
  const EvalReport rb = evaluate({{"s1", &pred_b, &truth}, {"s2", &pred_b2, &truth2}});

  SUBCASE("identical reports: all classes degenerate") {
    const PairedComparison cmp = compare_dsc(ra, ra);
    for (bool d : cmp.degenerate) CHECK(d);
    const std::string table = cmp.to_table("a", "a");
    CHECK(table.find("not significant / degenerate") != std::string::npos);
  }

  SUBCASE("differing reports give a finite test where variance exists") {
    const PairedComparison cmp = compare_dsc(ra, rb);
    bool any_test = false;
    for (std::size_t i = 0; i < 3; ++i)
      if (!cmp.degenerate[i]) {
        any_test = true;
        CHECK(std::isfinite(cmp.tests[i].t));
        CHECK(cmp.tests[i].p > 0.0);
        CHECK(cmp.tests[i].p <= 1.0);
      }
    CHECK(any_test);
  }

  SUBCASE("subject mismatch is rejected") {
    EvalReport rc = ra;
    rc.subjects[1].id = "other";
    CHECK_THROWS_AS(compare_dsc(ra, rc), ParameterError);
    rc.subjects.pop_back();
    CHECK_THROWS_AS(compare_dsc(ra, rc), ParameterError);
  }
}

// ---------------------------------------------------------------------------
// Artifacts and configuration.

TEST_CASE("subject save/load round-trips bitwise") {
  TempDir tmp;
  const Subject s = cube_phantom(16, 40);
  save_subject(tmp / "p1", s);
  const Subject t = load_subject(tmp / "p1", s.id);
  CHECK(t.image.data == s.image.data);
  CHECK(t.labels.data == s.labels.data);
  CHECK(t.mask.data == s.mask.data);
  CHECK(t.image.dims == s.image.dims);
}

TEST_CASE("training config parsing") {
  SUBCASE("defaults plus overrides") {
    ConfigFile f = ConfigFile::parse(
        "model.head = single_label\n"
        "model.patch = 16\n"
        "train.epochs = 3\n"
        "train.seed = 99\n"
        "loss.beta_csf = 2.5\n");
    const TrainingConfig cfg = parse_training_config(f);
    f.reject_unknown_keys();
    CHECK(cfg.model.head == HeadMode::single_label);
    CHECK(cfg.model.patch == 16);
    CHECK(cfg.model.growth == ModelConfig::toy(HeadMode::single_label).growth);
    CHECK(cfg.epochs == 3);
    CHECK(cfg.seed == 99);
    CHECK(cfg.loss.beta[kCsf] == 2.5);
  }

  SUBCASE("paper preset") {
    ConfigFile f = ConfigFile::parse("model.preset = paper\nmodel.head = exclusive\n");
    const TrainingConfig cfg = parse_training_config(f);
    CHECK(cfg.model.patch == 128);
    CHECK(cfg.model.growth == 12);
  }

  SUBCASE("unknown keys are fatal") {
    ConfigFile f = ConfigFile::parse("model.patch = 16\ntrain.bogus = 1\n");
    parse_training_config(f);
    CHECK_THROWS_AS(f.reject_unknown_keys(), ConfigError);
  }

  SUBCASE("bad values") {
    ConfigFile f = ConfigFile::parse("model.head = both\n");
    CHECK_THROWS_AS(parse_training_config(f), ConfigError);
    ConfigFile g = ConfigFile::parse("model.preset = huge\n");
    CHECK_THROWS_AS(parse_training_config(g), ConfigError);
    ConfigFile h = ConfigFile::parse("model.patch = 13\n");  // not divisible
    CHECK_THROWS_AS(parse_training_config(h), ConfigError);
  }

  SUBCASE("phantom keys") {
    ConfigFile f = ConfigFile::parse(
        "phantom.dims = 24\nphantom.seed = 5\nphantom.noise_level = 0.5\n");
    const PhantomSpec spec = parse_phantom_spec(f);
    f.reject_unknown_keys();
    CHECK(spec.dims == Dims3{24, 24, 24});
    CHECK(spec.seed == 5);
    CHECK(spec.noise_level == 0.5);
  }
}

TEST_CASE("run manifest records the resolved run") {
  const Subject s = cube_phantom(16, 41);
  TrainingConfig cfg = mini_train(HeadMode::exclusive, 13);
  const TrainResult r = train(cfg, {&s}, {});
  const std::string m = render_run_manifest(cfg, r);
  CHECK(m.find("version = 0.1.0") != std::string::npos);
  CHECK(m.find("model.head = exclusive") != std::string::npos);
  CHECK(m.find("train.seed = 13") != std::string::npos);
  CHECK(m.find("loss.beta_csf = ") != std::string::npos);
  CHECK(m.find("result.target_reads = 0 2 0 2") != std::string::npos);
}
