#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "m2m/training.hpp"
#include "test_util.hpp"

using namespace m2m;
using m2m::testing::random_tensor;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.encoder.stage_channels = {8};
  cfg.encoder.heads = {2};
  cfg.volume = {4, 2, 2, 2};
  cfg.tabular_features = 3;
  return cfg;
}

std::vector<VolumeSample> tiny_data(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<VolumeSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    VolumeSample s{random_tensor({1, 4, 2, 2, 2}, rng), random_tensor({1, 4, 2, 2, 1}, rng),
                   {rng.normal(), rng.normal(), rng.normal()}, label};
    s.tabular[0] += 2.0 * label;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<const VolumeSample*> ptrs(const std::vector<VolumeSample>& v, std::size_t from,
                                      std::size_t to) {
  std::vector<const VolumeSample*> out;
  for (std::size_t i = from; i < to; ++i) out.push_back(&v[i]);
  return out;
}

TrainConfig short_run(std::size_t epochs) {
  TrainConfig t;
  t.total_epochs = epochs;
  t.warmup_epochs = 1;
  t.batch_size = 4;
  t.lr_max = 0.01;
  return t;
}

}  // namespace

TEST(Schedule, DefaultSettings) {
  TrainConfig cfg;  // 0.001, 20 warmup, 100 total
  EXPECT_NEAR(lr_at_epoch(9, cfg), 0.0005, 1e-18);
  EXPECT_NEAR(lr_at_epoch(99, cfg), 0.0, 1e-18);
  EXPECT_NEAR(lr_at_epoch(0, cfg), 0.001 / 20.0, 1e-18);
  EXPECT_THROW(lr_at_epoch(100, cfg), ContractError);
}

TEST(Schedule, CosineMidpointAndContinuity) {
  TrainConfig cfg;
  cfg.warmup_epochs = 19;  // cosine span 80, midpoint e = 59
  EXPECT_NEAR(lr_at_epoch(59, cfg), 0.0005, 1e-15);
  cfg.warmup_epochs = 20;
  EXPECT_EQ(lr_at_epoch(19, cfg), cfg.lr_max);
  EXPECT_EQ(lr_at_epoch(20, cfg), cfg.lr_max);
  for (std::size_t e = 1; e < cfg.total_epochs; ++e)
    ASSERT_LE(std::abs(lr_at_epoch(e, cfg) - lr_at_epoch(e - 1, cfg)), cfg.lr_max / 20.0 + 1e-15);
}

TEST(Schedule, Validation) {
  TrainConfig cfg;
  cfg.warmup_epochs = 100;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.warmup_epochs = 1;
  cfg.folds = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(AdamW, FirstStepClosedForm) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Tensor theta = Tensor::vector({1.0});
  MomentBuffers mb;
  adamw_update(theta, Tensor::vector({0.5}), mb, 1, 0.1, cfg);
  // m̂ = 0.5, v̂ = 0.25.
  EXPECT_NEAR(theta[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(theta[0], 0.9, 1e-8);

  cfg.weight_decay = 0.01;
  Tensor decayed = Tensor::vector({1.0});
  MomentBuffers mb2;
  adamw_update(decayed, Tensor::vector({0.5}), mb2, 1, 0.1, cfg);
  EXPECT_NEAR(decayed[0], 0.899, 1e-8);

  cfg.weight_decay = 0.0;
  Tensor still = Tensor::vector({1.0, -2.0});
  MomentBuffers mb3;
  adamw_update(still, Tensor::vector({0.0, 0.0}), mb3, 1, 0.1, cfg);
  EXPECT_EQ(still, Tensor::vector({1.0, -2.0}));
}

TEST(AdamW, SecondStepMatchesRecurrence) {
  TrainConfig cfg;
  Tensor theta = Tensor::vector({0.3});
  MomentBuffers mb;
  adamw_update(theta, Tensor::vector({0.2}), mb, 1, 0.05, cfg);
  const double after1 = theta[0];
  adamw_update(theta, Tensor::vector({-0.4}), mb, 2, 0.05, cfg);
  const double m = 0.9 * (0.1 * 0.2) + 0.1 * -0.4;
  const double v = 0.999 * (0.001 * 0.04) + 0.001 * 0.16;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(theta[0], after1 - 0.05 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * after1), 1e-15);
}

TEST(AdamW, SkipsParametersWithoutAdjoints) {
  ParamStore p;
  p.add("used", Tensor::vector({1.0}));
  p.add("unused", Tensor::vector({1.0}));
  Tape tape;
  Binder bind(tape, p);
  Adjoints g = backward(sum(mul(bind("used"), bind("used"))));
  OptimizerState st;
  adamw_step(p, g, st, 0.1, TrainConfig{});
  EXPECT_NE(p.at("used")[0], 1.0);
  EXPECT_EQ(p.at("unused")[0], 1.0);
  EXPECT_EQ(st.step, 1u);
}

TEST(Folds, BalancedTen) {
  std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  auto folds = stratified_folds(labels, 5, 7);
  for (const auto& f : folds) {
    ASSERT_EQ(f.size(), 2u);
    EXPECT_EQ(labels[f[0]] + labels[f[1]], 1);
  }
}

TEST(Folds, PartitionAndStratificationProperty) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 10 + rng.below(90);
    const std::size_t k = 2 + rng.below(4);
    std::vector<int> labels(n);
    for (auto& l : labels) l = rng.uniform() < 0.3 ? 1 : 0;
    for (std::size_t i = 0; i < k; ++i) labels[i] = 1, labels[k + i] = 0;
    auto folds = stratified_folds(labels, k, trial);
    std::set<std::size_t> seen;
    std::size_t total = 0;
    std::vector<std::size_t> pos;
    for (const auto& f : folds) {
      total += f.size();
      seen.insert(f.begin(), f.end());
      std::size_t p = 0;
      for (std::size_t i : f) p += labels[i];
      pos.push_back(p);
    }
    ASSERT_EQ(total, n);
    ASSERT_EQ(seen.size(), n);
    ASSERT_LE(*std::max_element(pos.begin(), pos.end()) - *std::min_element(pos.begin(), pos.end()), 1u);
  }
}

TEST(Folds, InfeasibleIsConfigError) {
  EXPECT_THROW(stratified_folds({0, 0, 0, 1, 1}, 3, 0), ConfigError);
  EXPECT_THROW(stratified_folds({0, 1}, 1, 0), ConfigError);
}

TEST(TrainFold, ZeroEpochsReturnsInitialParams) {
  auto data = tiny_data(8, 1);
  ModelConfig model = tiny_model();
  TrainConfig cfg = short_run(0);
  FoldResult r = train_fold(ptrs(data, 0, 6), ptrs(data, 6, 8), model, cfg, M2MConfig{}, 3);
  EXPECT_TRUE(r.history.empty());
  Rng rng({cfg.seed, 1, 3});
  ParamStore init = init_model(model, cfg.modalities, rng);
  for (const auto& [name, value] : init) EXPECT_EQ(r.params.at(name), value) << name;
  EXPECT_EQ(r.val_predictions.size(), 2u);
}

TEST(TrainFold, ErrorsOnBadSplits) {
  auto data = tiny_data(8, 2);
  std::vector<const VolumeSample*> one_class{&data[0], &data[2], &data[4]};
  EXPECT_THROW(train_fold(one_class, {}, tiny_model(), short_run(2), M2MConfig{}),
               StratificationError);
  EXPECT_THROW(train_fold(ptrs(data, 0, 6), ptrs(data, 5, 8), tiny_model(), short_run(2), M2MConfig{}),
               ContractError);
}

TEST(TrainFold, LambdaZeroMatchesAlignmentOff) {
  auto data = tiny_data(8, 3);
  M2MConfig m2m;
  m2m.lambda = 0.0;
  TrainConfig on = short_run(3), off = short_run(3);
  off.toggles.alignment = false;
  FoldResult a = train_fold(ptrs(data, 0, 8), {}, tiny_model(), on, m2m);
  FoldResult b = train_fold(ptrs(data, 0, 8), {}, tiny_model(), off, m2m);
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.history[e].ce, b.history[e].ce);
    EXPECT_EQ(a.history[e].total, b.history[e].total);
  }
  for (const auto& [name, value] : a.params) EXPECT_EQ(b.params.at(name), value) << name;
  EXPECT_GT(a.history[0].m2m, 0.0);  // measured even though it carries no weight
  EXPECT_EQ(b.history[0].m2m, 0.0);
}

TEST(TrainFold, DeterministicAndRecordsLosses) {
  auto data = tiny_data(10, 4);
  TrainConfig cfg = short_run(3);
  FoldResult a = train_fold(ptrs(data, 0, 8), ptrs(data, 8, 10), tiny_model(), cfg, M2MConfig{});
  FoldResult b = train_fold(ptrs(data, 0, 8), ptrs(data, 8, 10), tiny_model(), cfg, M2MConfig{});
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.history[e].total, b.history[e].total);
    EXPECT_NEAR(a.history[e].total, a.history[e].ce + 0.1 * a.history[e].m2m, 1e-12);
    EXPECT_EQ(a.history[e].lr, lr_at_epoch(e, cfg));
  }
  EXPECT_EQ(a.val_metrics.roc_auc, b.val_metrics.roc_auc);
  EXPECT_EQ(a.val_predictions[0].logits, b.val_predictions[0].logits);
}

TEST(CrossValidate, DeterministicReport) {
  auto data = tiny_data(10, 5);
  TrainConfig cfg = short_run(2);
  cfg.folds = 2;
  CrossValidationResult a = cross_validate(data, tiny_model(), cfg, M2MConfig{});
  CrossValidationResult b = cross_validate(data, tiny_model(), cfg, M2MConfig{});
  ASSERT_EQ(a.report.folds.size(), 2u);
  EXPECT_EQ(a.report.mean.roc_auc, b.report.mean.roc_auc);
  EXPECT_EQ(a.report.std.pr_auc, b.report.std.pr_auc);
  EXPECT_EQ(a.fold_indices, b.fold_indices);
  EXPECT_GE(a.report.std.accuracy, 0.0);
}

TEST(CrossValidate, ExplicitFoldsAreUsedVerbatim) {
  auto data = tiny_data(8, 6);
  TrainConfig cfg = short_run(2);
  const std::vector<std::vector<std::size_t>> folds{{0, 1, 2, 3}, {4, 5, 6, 7}};
  CrossValidationResult r = cross_validate(data, tiny_model(), cfg, M2MConfig{}, folds);
  EXPECT_EQ(r.fold_indices, folds);
  ASSERT_EQ(r.predictions.size(), 2u);
  ASSERT_EQ(r.params.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(r.predictions[k][j].label, data[folds[k][j]].label);
  EXPECT_THROW(cross_validate(data, tiny_model(), cfg, M2MConfig{}, {{0, 1, 2, 3}, {4, 5, 6}}), ContractError);
  EXPECT_THROW(cross_validate(data, tiny_model(), cfg, M2MConfig{}, {{0, 1, 2, 3}, {3, 4, 5, 6, 7}}), ContractError);
  EXPECT_THROW(cross_validate(data, tiny_model(), cfg, M2MConfig{}, {{0, 1, 2, 3, 4, 5, 6, 7, 8}}), ContractError);
}

TEST(TrainAlignment, TrainsEncodersOnlyAndLowersM2M) {
  auto data = tiny_data(8, 7);
  ModelConfig model = tiny_model();
  model.volume = {4, 4, 4, 2};
  Rng rng(8);
  for (auto& s : data) {
    s.fmri = random_tensor({1, 4, 4, 4, 2}, rng);
    s.smri = random_tensor({1, 4, 4, 4, 1}, rng);
    // Shared spatial structure so patches have partners to find.
    for (std::size_t v = 0; v < 64; ++v)
      for (std::size_t t = 0; t < 2; ++t) s.fmri[v * 2 + t] += 2.0 * s.smri[v];
  }
  TrainConfig cfg = short_run(8);
  FoldResult r = train_alignment(ptrs(data, 0, 8), model, cfg, M2MConfig{});
  ASSERT_EQ(r.history.size(), 8u);
  for (const auto& [name, value] : r.params)
    EXPECT_TRUE(name.rfind(model.fmri_prefix(), 0) == 0 || name.rfind(model.smri_prefix(), 0) == 0) << name;
  EXPECT_LT(r.history.back().m2m, r.history.front().m2m);
  for (const auto& e : r.history) EXPECT_EQ(e.total, e.m2m);
  EXPECT_TRUE(r.val_predictions.empty());
}

TEST(TrainFold, LossFallsOverFirstEpochsOnSeparableData) {
  std::vector<double> drops;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto data = tiny_data(16, 100 + seed);
    TrainConfig cfg = short_run(5);
    cfg.seed = seed;
    FoldResult r = train_fold(ptrs(data, 0, 16), {}, tiny_model(), cfg, M2MConfig{});
    drops.push_back(r.history.front().total - r.history.back().total);
  }
  std::nth_element(drops.begin(), drops.begin() + 2, drops.end());
  EXPECT_GT(drops[2], 0.0);
}
