#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "dscl/train.hpp"

using namespace dscl;

namespace {

DatasetSpec tiny_spec() {
  DatasetSpec s;
  s.class_counts = {40, 16, 8};
  s.image_size = 16;
  s.test_per_class = 4;
  s.num_motifs = 6;
  s.sharing_degree = 1;
  s.motif_size = 6;
  s.seed = 5;
  return s;
}

const SynthDataset& tiny_dataset() {
  static const SynthDataset ds = [] {
    const DatasetSpec s = tiny_spec();
    return generate_dataset(s, bank_for(s));
  }();
  return ds;
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.input_size = 16;
  c.conv_channels = {4, 8, 8};
  c.head_hidden = 8;
  c.d_proj = 8;
  c.patch_size = 8;
  return c;
}

Stage1Config tiny_stage1() {
  Stage1Config c;
  c.epochs = 1;
  c.batch_size = 16;
  c.queue_capacity = 32;
  c.probe_per_class = 4;
  c.augment.out_size = 16;
  c.loss.patches = 2;
  c.seed = 11;
  return c;
}

std::string csv_of(const Stage1Result& r) {
  std::ostringstream os;
  write_metrics_csv(os, r.metrics);
  return os.str();
}

std::vector<Tensor> param_values(const EncoderParams& p) {
  std::vector<Tensor> out;
  for (const auto& v : p.all()) out.push_back(v.value());
  return out;
}

}  // namespace

TEST(Schedule, CosineClosedForm) {
  const double peak = 0.05;
  EXPECT_NEAR(cosine_lr(peak, 0, 300), peak, 1e-12);
  EXPECT_NEAR(cosine_lr(peak, 100, 300), 0.75 * peak, 1e-12);
  EXPECT_NEAR(cosine_lr(peak, 150, 300), 0.5 * peak, 1e-12);
  EXPECT_NEAR(cosine_lr(peak, 200, 300), 0.25 * peak, 1e-12);
  EXPECT_NEAR(cosine_lr(peak, 300, 300), 0.0, 1e-12);
}

TEST(Schedule, StepMilestones) {
  const Stage2Config c;
  EXPECT_DOUBLE_EQ(c.lr_at_epoch(0), 1.0);
  EXPECT_DOUBLE_EQ(c.lr_at_epoch(19), 1.0);
  EXPECT_DOUBLE_EQ(c.lr_at_epoch(20), 0.1);
  EXPECT_NEAR(c.lr_at_epoch(35), 0.01, 1e-15);
}

TEST(Optimizer, MomentumWithDecayMatchesHandComputation) {
  Var w = Var::parameter(Tensor(Shape{1}, 1.0));
  SgdMomentum opt({w}, 0.9, 0.1);
  // L = 2w, so g = 2 at every step.
  for (int i = 0; i < 2; ++i) {
    opt.zero_grad();
    sum(scale(w, 2.0)).backward();
    opt.step(0.5);
  }
  const double v1 = 2.0 + 0.1 * 1.0;
  const double w1 = 1.0 - 0.5 * v1;
  const double v2 = 0.9 * v1 + 2.0 + 0.1 * w1;
  EXPECT_NEAR(w.value()[0], w1 - 0.5 * v2, 1e-15);
}

TEST(Metrics, CsvHeaderAndBlankFields) {
  MetricsRow a;
  a.step = 0;
  a.lr = 0.05;
  a.queue_fill = 0.5;
  MetricsRow b = a;
  b.step = 1;
  b.loss_dscl = 7.25;
  b.loss_pbsd = 0.1;
  b.p_plus_head = 0.125;
  std::ostringstream os;
  write_metrics_csv(os, {a, b});
  EXPECT_EQ(os.str(),
            "step,epoch,loss_dscl,loss_pbsd,lr,queue_fill,mean_ratio_head,mean_ratio_tail,p_plus_head,p_plus_tail\n"
            "0,0,,,0.05,0.5,,,,\n"
            "1,0,7.25,0.1,0.05,0.5,,,0.125,\n");
}

TEST(Metrics, NumbersRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, std::numbers::pi, 1e-300, -2.5e17}) {
    EXPECT_EQ(std::stod(format_number(v)), v);
  }
}

TEST(Stage1, OneEpochOneRowPerStepAndQueueGrowth) {
  const auto& ds = tiny_dataset();
  const Stage1Config cfg = tiny_stage1();
  const Stage1Result r = stage1_train(ds, tiny_encoder(), cfg);
  const std::size_t steps = (ds.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  ASSERT_EQ(r.metrics.size(), steps);
  for (std::size_t s = 0; s < steps; ++s) {
    EXPECT_EQ(r.metrics[s].step, s);
    const double expected = std::min<double>(1.0, static_cast<double>((s + 1) * cfg.batch_size) / 32.0);
    EXPECT_DOUBLE_EQ(r.metrics[s].queue_fill, expected) << "step " << s;
  }
  // Queue is empty at step 0 and half full at step 1 (the warm-up threshold).
  EXPECT_EQ(r.warmup_steps, 1u);
  EXPECT_FALSE(r.metrics[0].loss_dscl.has_value());
  EXPECT_TRUE(r.metrics[1].loss_dscl.has_value());
  EXPECT_TRUE(r.metrics[1].loss_pbsd.has_value());
  // Probe columns only on the last step of the epoch.
  EXPECT_FALSE(r.metrics[0].p_plus_head.has_value());
  EXPECT_TRUE(r.metrics.back().p_plus_head.has_value());
  EXPECT_TRUE(r.metrics.back().p_plus_tail.has_value());
  EXPECT_EQ(r.checkpoint.step, steps);
}

TEST(Stage1, RepeatedRunsAreBitIdentical) {
  const auto& ds = tiny_dataset();
  Stage1Config cfg = tiny_stage1();
  cfg.epochs = 2;
  const Stage1Result a = stage1_train(ds, tiny_encoder(), cfg);
  const Stage1Result b = stage1_train(ds, tiny_encoder(), cfg);
  EXPECT_EQ(csv_of(a), csv_of(b));
  EXPECT_EQ(param_values(a.checkpoint.online), param_values(b.checkpoint.online));
  EXPECT_EQ(param_values(*a.checkpoint.ema), param_values(*b.checkpoint.ema));
}

TEST(Stage1, ThreadCountDoesNotChangeResults) {
  const auto& ds = tiny_dataset();
  Stage1Config cfg = tiny_stage1();
  cfg.epochs = 2;
  const Stage1Result a = stage1_train(ds, tiny_encoder(), cfg, 1);
  const Stage1Result b = stage1_train(ds, tiny_encoder(), cfg, 8);
  EXPECT_EQ(csv_of(a), csv_of(b));
  EXPECT_EQ(param_values(a.checkpoint.online), param_values(b.checkpoint.online));
}

TEST(Stage1, SeedChangesTrajectory) {
  const auto& ds = tiny_dataset();
  Stage1Config cfg = tiny_stage1();
  const Stage1Result a = stage1_train(ds, tiny_encoder(), cfg);
  cfg.seed += 1;
  const Stage1Result b = stage1_train(ds, tiny_encoder(), cfg);
  EXPECT_NE(csv_of(a), csv_of(b));
}

// With lambda = 0 the patch branch must not touch the update at all.
TEST(Stage1, ZeroLambdaMatchesPatchFreeRun) {
  const auto& ds = tiny_dataset();
  Stage1Config with = tiny_stage1();
  with.loss.lambda = 0.0;
  Stage1Config without = tiny_stage1();
  without.loss.patch_mode = PatchMode::none;
  const Stage1Result a = stage1_train(ds, tiny_encoder(), with);
  const Stage1Result b = stage1_train(ds, tiny_encoder(), without);
  EXPECT_EQ(param_values(a.checkpoint.online), param_values(b.checkpoint.online));
  for (std::size_t s = 0; s < a.metrics.size(); ++s) EXPECT_EQ(a.metrics[s].loss_dscl, b.metrics[s].loss_dscl);
}

TEST(Stage1, WarmupOnlyRunLeavesOnlineEncoderUntouched) {
  const auto& ds = tiny_dataset();
  Stage1Config cfg = tiny_stage1();
  cfg.warmup_fill = 1.0;
  cfg.queue_capacity = 4096;  // never reaches the threshold in one epoch
  const Stage1Result r = stage1_train(ds, tiny_encoder(), cfg);
  const EncoderParams init = init_encoder(tiny_encoder(), derive_seed(cfg.seed, {0x1A17}));
  EXPECT_EQ(param_values(r.checkpoint.online), param_values(init));
  EXPECT_EQ(r.warmup_steps, r.metrics.size());
}

TEST(Stage1, SummaryReportsPerClassPositives) {
  const auto& ds = tiny_dataset();
  Stage1Config cfg = tiny_stage1();
  cfg.epochs = 3;
  const Stage1Result r = stage1_train(ds, tiny_encoder(), cfg);
  const Json s = r.summary();
  EXPECT_EQ(s.at("steps").get<std::size_t>(), r.metrics.size());
  ASSERT_EQ(s.at("mean_positives_per_class").size(), 3u);
  // Largest class dominates the queue.
  EXPECT_GT(s["mean_positives_per_class"][0].get<double>(), s["mean_positives_per_class"][2].get<double>());
  EXPECT_TRUE(s.contains("empty_positive_fallbacks"));
}

TEST(Stage1, CheckpointReloadGivesIdenticalEvaluation) {
  const auto& ds = tiny_dataset();
  const Stage1Result r = stage1_train(ds, tiny_encoder(), tiny_stage1());
  const auto path = std::filesystem::temp_directory_path() / "dscl_test_train_ckpt.bin";
  save_checkpoint(r.checkpoint, path);
  const EncoderConfig enc = tiny_encoder();
  const Checkpoint back = load_checkpoint(path, &enc);
  std::filesystem::remove(path);
  Stage2Config s2;
  s2.epochs = 4;
  s2.milestones = {2, 3};
  const LinearClassifier a = stage2_train_linear(r.checkpoint.online, ds, s2);
  const LinearClassifier b = stage2_train_linear(back.online, ds, s2);
  EXPECT_EQ(a.weight.value(), b.weight.value());
  EXPECT_EQ(evaluate_splits(a, r.checkpoint.online, ds.test, ds.spec.class_counts).to_json(),
            evaluate_splits(b, back.online, ds.test, ds.spec.class_counts).to_json());
}

TEST(Stage2, BackboneIsNotModified) {
  const auto& ds = tiny_dataset();
  const EncoderParams backbone = init_encoder(tiny_encoder(), 3);
  const auto before = param_values(backbone);
  Stage2Config s2;
  s2.epochs = 3;
  s2.milestones = {1, 2};
  (void)stage2_train_linear(backbone, ds, s2);
  EXPECT_EQ(param_values(backbone), before);
  for (const auto& v : backbone.all()) EXPECT_FALSE(v.has_grad());
}

TEST(Stage2, FeatureExtractionIsThreadInvariant) {
  const auto& ds = tiny_dataset();
  const EncoderParams backbone = init_encoder(tiny_encoder(), 3);
  EXPECT_EQ(extract_features(backbone, ds.train, 1, 8), extract_features(backbone, ds.train, 4, 8));
}

TEST(Stage2, ScalerStandardisesColumns) {
  Rng rng(1);
  Tensor x(Shape{500, 4});
  for (std::size_t r = 0; r < 500; ++r)
    for (std::size_t j = 0; j < 4; ++j) x.at(r, j) = 3.0 * static_cast<double>(j) + (1.0 + j) * rng.normal();
  const Tensor y = FeatureScaler::fit(x).apply(x);
  for (std::size_t j = 0; j < 4; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t r = 0; r < 500; ++r) m += y.at(r, j);
    m /= 500.0;
    for (std::size_t r = 0; r < 500; ++r) v += std::pow(y.at(r, j) - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 500.0, 0.25, 1e-12);  // 1 / d
  }
}

TEST(Stage2, LinearProbeSeparatesCleanClusters) {
  Rng rng(2);
  const std::size_t K = 4, n = 200;
  Tensor x(Shape{n, K});
  std::vector<ClassId> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = i % K;
    for (std::size_t j = 0; j < K; ++j) x.at(i, j) = (j == y[i] ? 3.0 : 0.0) + 0.1 * rng.normal();
  }
  Stage2Config s2;
  s2.epochs = 10;
  s2.milestones = {5, 8};
  const LinearClassifier clf = train_linear_on_features(x, y, K, s2);
  EXPECT_EQ(clf.predict(x), y);
}

TEST(Stage2, ClassifierJsonRoundTripIsExact) {
  Rng rng(4);
  Tensor x(Shape{40, 3});
  std::vector<ClassId> y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    y[i] = i % 2;
    for (std::size_t j = 0; j < 3; ++j) x.at(i, j) = rng.normal() + static_cast<double>(y[i]);
  }
  Stage2Config s2;
  s2.epochs = 3;
  s2.milestones = {1, 2};
  const LinearClassifier a = train_linear_on_features(x, y, 2, s2);
  const LinearClassifier b = classifier_from_json(Json::parse(classifier_to_json(a).dump()));
  EXPECT_EQ(a.logits(x), b.logits(x));
}

TEST(Loss, CrossEntropyLimits) {
  const std::vector<ClassId> y{0, 2, 1};
  Tensor perfect(Shape{3, 3}, 0.0);
  for (std::size_t r = 0; r < 3; ++r) perfect.at(r, y[r]) = 60.0;
  EXPECT_NEAR(cross_entropy(Var::constant(perfect), y).item(), 0.0, 1e-20);
  EXPECT_NEAR(cross_entropy(Var::constant(Tensor(Shape{3, 3}, 0.7)), y).item(), std::log(3.0), 1e-15);
}

TEST(Sampler, BalancedIsUniformOverClasses) {
  std::vector<ClassId> labels;
  const std::vector<std::size_t> counts{1000, 100, 10, 1};
  for (std::size_t k = 0; k < counts.size(); ++k) labels.insert(labels.end(), counts[k], k);
  const ClassSampler s(labels, 4, true);
  Rng rng(9);
  std::vector<double> hits(4, 0.0);
  const double N = 10000;
  for (int i = 0; i < N; ++i) hits[labels[s.draw(rng)]] += 1.0;
  const double sigma = std::sqrt(N * 0.25 * 0.75);
  for (double h : hits) EXPECT_NEAR(h, N * 0.25, 3.0 * sigma);
}

TEST(Sampler, InstanceModeIsProportionalToCounts) {
  std::vector<ClassId> labels;
  const std::vector<std::size_t> counts{1000, 100, 10, 1};
  for (std::size_t k = 0; k < counts.size(); ++k) labels.insert(labels.end(), counts[k], k);
  const ClassSampler s(labels, 4, false);
  Rng rng(9);
  std::vector<double> hits(4, 0.0);
  const double N = 10000;
  for (int i = 0; i < N; ++i) hits[labels[s.draw(rng)]] += 1.0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double p = static_cast<double>(counts[k]) / static_cast<double>(labels.size());
    EXPECT_NEAR(hits[k], N * p, 3.0 * std::sqrt(N * p * (1.0 - p)) + 1.0);
  }
}

TEST(Splits, Thresholds) {
  EXPECT_EQ(split_of(101), Split::many);
  EXPECT_EQ(split_of(100), Split::medium);
  EXPECT_EQ(split_of(20), Split::medium);
  EXPECT_EQ(split_of(19), Split::few);
  EXPECT_EQ(split_of(1), Split::few);
}

TEST(Splits, OverallIsMeanOfPerClassAccuracy) {
  // Class 0 has 4 test items (3 right), class 1 has 1 (right), class 2 has 2 (0 right).
  const std::vector<ClassId> truth{0, 0, 0, 0, 1, 2, 2};
  const std::vector<ClassId> pred{0, 0, 0, 1, 1, 0, 1};
  const SplitReport r = evaluate_predictions(pred, truth, {500, 50, 5});
  EXPECT_DOUBLE_EQ(r.overall, (0.75 + 1.0 + 0.0) / 3.0);
  EXPECT_DOUBLE_EQ(*r.many, 0.75);
  EXPECT_DOUBLE_EQ(*r.medium, 1.0);
  EXPECT_DOUBLE_EQ(*r.few, 0.0);
}

TEST(Splits, EmptyClassIsExcludedWithWarning) {
  const std::vector<ClassId> truth{0, 0};
  const std::vector<ClassId> pred{0, 1};
  const SplitReport r = evaluate_predictions(pred, truth, {500, 5});
  EXPECT_DOUBLE_EQ(r.overall, 0.5);
  EXPECT_FALSE(r.few.has_value());
  ASSERT_EQ(r.warnings.size(), 1u);
}

TEST(Splits, RandomPredictorScoresChance) {
  const std::size_t K = 20, per = 500;
  std::vector<ClassId> truth, pred;
  Rng rng(6);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < per; ++i) {
      truth.push_back(k);
      pred.push_back(rng.index(K));
    }
  const SplitReport r = evaluate_predictions(pred, truth, DatasetSpec::desk_default().class_counts);
  const double sigma = std::sqrt(0.05 * 0.95 / static_cast<double>(K * per));
  EXPECT_NEAR(r.overall, 1.0 / K, 3.0 * sigma);
}

TEST(Config, Stage1Validation) {
  Stage1Config c;
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = Stage1Config{};
  c.ema_momentum = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = Stage1Config{};
  c.loss.tau = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  Stage2Config s;
  s.milestones = {30, 20};
  EXPECT_THROW(s.validate(), ConfigError);
}
