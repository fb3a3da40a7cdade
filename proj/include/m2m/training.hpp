#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "m2m/alignment.hpp"
#include "m2m/autograd.hpp"
#include "m2m/metrics.hpp"
#include "m2m/model.hpp"
#include "m2m/params.hpp"
#include "m2m/rng.hpp"

namespace m2m {

struct TrainConfig {
  double lr_max = 0.001;
  std::size_t warmup_epochs = 20;
  std::size_t total_epochs = 100;
  std::size_t folds = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  Modalities modalities;
  ModuleToggles toggles;

  void validate() const {
    if (total_epochs > 0 && warmup_epochs >= total_epochs)
      throw ConfigError("warmup_epochs must be smaller than total_epochs");
    if (folds < 2) throw ConfigError("folds must be at least 2");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr_max > 0.0)) throw ConfigError("lr_max must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("betas must lie in [0, 1)");
    modalities.validate();
  }
};

// Linear warmup over the first warmup_epochs, then cosine decay to zero at the
// final epoch.
inline double lr_at_epoch(std::size_t e, const TrainConfig& cfg) {
  if (e >= cfg.total_epochs)
    throw ContractError("epoch " + std::to_string(e) + " is outside [0, " +
                        std::to_string(cfg.total_epochs) + ")");
  const double lr_min = 0.0;
  if (e < cfg.warmup_epochs)
    return cfg.lr_max * static_cast<double>(e + 1) / static_cast<double>(cfg.warmup_epochs);
  const std::size_t span = cfg.total_epochs - 1 - cfg.warmup_epochs;
  if (span == 0) return lr_min;
  const double progress = static_cast<double>(e - cfg.warmup_epochs) / static_cast<double>(span);
  return lr_min + 0.5 * (cfg.lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct MomentBuffers {
  Tensor m;
  Tensor v;
};

struct OptimizerState {
  std::map<std::string, MomentBuffers> moments;
  std::size_t step = 0;
};

// One AdamW update of a single tensor at the given step count (>= 1):
// θ' = θ - lr·(m̂/(√v̂ + eps) + wd·θ).
inline void adamw_update(Tensor& theta, const Tensor& grad, MomentBuffers& mb, std::size_t step,
                         double lr, const TrainConfig& cfg) {
  if (theta.dims() != grad.dims()) throw ShapeError("adamw: gradient dims differ from parameter");
  if (mb.m.dims() != theta.dims()) {
    mb.m = Tensor::zeros(theta.dims());
    mb.v = Tensor::zeros(theta.dims());
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    mb.m[i] = cfg.beta1 * mb.m[i] + (1.0 - cfg.beta1) * grad[i];
    mb.v[i] = cfg.beta2 * mb.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = mb.m[i] / bc1;
    const double vhat = mb.v[i] / bc2;
    theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * theta[i]);
  }
}

// Applies one step to every parameter that received an adjoint.
inline void adamw_step(ParamStore& params, const Adjoints& grads, OptimizerState& state, double lr,
                       const TrainConfig& cfg) {
  ++state.step;
  for (auto& [name, theta] : params) {
    if (!grads.contains(name)) continue;
    adamw_update(theta, grads.at(name), state.moments[name], state.step, lr, cfg);
  }
}

struct EpochLosses {
  std::size_t epoch = 0;
  double ce = 0.0;
  double m2m = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

struct Prediction {
  std::array<double, 2> logits{};
  double score = 0.0;  // softmax probability of class 1
  int label = 0;
};

struct SampleLoss {
  Var total;
  double ce = 0.0;
  double m2m = 0.0;
};

// CE + λ·M2M for one sample on the caller's tape. The M2M term exists only
// when alignment is enabled and both imaging modalities are present; with
// λ = 0 it is measured but kept off the graph.
inline SampleLoss sample_loss(Binder& bind, const ModelConfig& model, const TrainConfig& cfg,
                              const M2MConfig& m2m, const VolumeSample& s) {
  ForwardOutput f = forward(bind, model, cfg.modalities, cfg.toggles, s);
  SampleLoss out;
  Var ce = cross_entropy(f.logits, static_cast<std::size_t>(s.label));
  out.ce = ce.value().item();
  out.total = ce;
  if (cfg.toggles.alignment && f.fmri && f.smri) {
    Var align = m2m_loss(f.fmri->tokens, f.fmri->grid, f.smri->tokens, m2m);
    out.m2m = align.value().item();
    if (m2m.lambda > 0.0) out.total = ce + scale(align, m2m.lambda);
  }
  return out;
}

inline Prediction predict(const ParamStore& params, const ModelConfig& model,
                          const TrainConfig& cfg, const VolumeSample& s) {
  Tape tape;
  Binder bind(tape, params);
  ForwardOutput f = forward(bind, model, cfg.modalities, cfg.toggles, s);
  Prediction p;
  p.logits = {f.logits.value()[0], f.logits.value()[1]};
  p.score = 1.0 / (1.0 + std::exp(p.logits[0] - p.logits[1]));
  p.label = s.label;
  return p;
}

inline FoldMetrics evaluate(const std::vector<Prediction>& preds) {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::array<double, 2>> logits;
  for (const auto& p : preds) {
    scores.push_back(p.score);
    labels.push_back(p.label);
    logits.push_back(p.logits);
  }
  return {pr_auc(scores, labels), roc_auc(scores, labels), accuracy(logits, labels)};
}

struct FoldResult {
  ParamStore params;
  std::vector<EpochLosses> history;
  std::vector<Prediction> val_predictions;
  FoldMetrics val_metrics;
};

// Trains a freshly initialized model on `train` and scores `val`. Deterministic
// for a fixed seed and fold index. The val set may be empty (no metrics).
inline FoldResult train_fold(const std::vector<const VolumeSample*>& train,
                             const std::vector<const VolumeSample*>& val, const ModelConfig& model,
                             const TrainConfig& cfg, const M2MConfig& m2m,
                             std::size_t fold_index = 0) {
  cfg.validate();
  m2m.validate();
  bool has[2] = {false, false};
  for (const VolumeSample* s : train) {
    if (s->label != 0 && s->label != 1) throw ContractError("labels must be 0 or 1");
    has[s->label] = true;
  }
  for (const VolumeSample* a : train)
    for (const VolumeSample* b : val)
      if (a == b) throw ContractError("train and validation sets overlap");
  if (!has[0] || !has[1]) throw StratificationError("training split contains a single class");

  FoldResult result;
  Rng init_rng({cfg.seed, 1, fold_index});
  result.params = init_model(model, cfg.modalities, init_rng);
  OptimizerState opt;

  std::vector<std::size_t> order(train.size());
  for (std::size_t e = 0; e < cfg.total_epochs; ++e) {
    const double lr = lr_at_epoch(e, cfg);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng({cfg.seed, 2, fold_index, e});
    shuffle_rng.shuffle(order);
    EpochLosses rec{e, 0.0, 0.0, 0.0, lr};
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tape tape;
      Binder bind(tape, result.params);
      Var batch_total;
      for (std::size_t k = start; k < end; ++k) {
        SampleLoss sl = sample_loss(bind, model, cfg, m2m, *train[order[k]]);
        batch_total = batch_total.valid() ? batch_total + sl.total : sl.total;
        rec.ce += sl.ce;
        rec.m2m += sl.m2m;
      }
      Var loss = scale(batch_total, 1.0 / static_cast<double>(end - start));
      const Adjoints grads = backward(loss);
      adamw_step(result.params, grads, opt, lr, cfg);
    }
    const double n = static_cast<double>(train.size());
    rec.ce /= n;
    rec.m2m /= n;
    rec.total = rec.ce + (cfg.toggles.alignment ? m2m.lambda : 0.0) * rec.m2m;
    if (!cfg.toggles.alignment) rec.m2m = 0.0;
    result.history.push_back(rec);
  }

  for (const VolumeSample* s : val) result.val_predictions.push_back(predict(result.params, model, cfg, *s));
  if (!val.empty()) result.val_metrics = evaluate(result.val_predictions);
  return result;
}

// Encoders alone, trained on the M2M loss with no classifier. Only the fMRI
// and sMRI encoder weights are created; schedule, batching and optimizer match
// train_fold.
inline FoldResult train_alignment(const std::vector<const VolumeSample*>& train, const ModelConfig& model,
                                  const TrainConfig& cfg, const M2MConfig& m2m) {
  cfg.validate();
  m2m.validate();
  model.validate();
  if (train.empty()) throw ContractError("alignment training needs at least one subject");
  FoldResult result;
  Rng init_rng({cfg.seed, 4});
  const std::array<std::size_t, 3> spatial{model.volume[0], model.volume[1], model.volume[2]};
  init_volume_encoder(result.params, model.fmri_prefix(), model.encoder, spatial, model.volume[3], init_rng,
                      model.init_std);
  if (!model.share_encoder_weights)
    init_volume_encoder(result.params, model.smri_prefix(), model.encoder, spatial, 1, init_rng, model.init_std);
  OptimizerState opt;
  std::vector<std::size_t> order(train.size());
  for (std::size_t e = 0; e < cfg.total_epochs; ++e) {
    const double lr = lr_at_epoch(e, cfg);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng({cfg.seed, 5, e});
    shuffle_rng.shuffle(order);
    EpochLosses rec{e, 0.0, 0.0, 0.0, lr};
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tape tape;
      Binder bind(tape, result.params);
      Var batch_total;
      for (std::size_t k = start; k < end; ++k) {
        const VolumeSample& s = *train[order[k]];
        EncodedTokens f = encode_volume(bind, model.fmri_prefix(), model.encoder, s.fmri);
        EncodedTokens st = encode_volume(bind, model.smri_prefix(), model.encoder, s.smri);
        Var loss = m2m_loss(f.tokens, f.grid, st.tokens, m2m);
        rec.m2m += loss.value().item();
        batch_total = batch_total.valid() ? batch_total + loss : loss;
      }
      const Adjoints grads = backward(scale(batch_total, 1.0 / static_cast<double>(end - start)));
      adamw_step(result.params, grads, opt, lr, cfg);
    }
    rec.m2m /= static_cast<double>(train.size());
    rec.total = rec.m2m;
    result.history.push_back(rec);
  }
  return result;
}

// Stratified fold assignment: each class is shuffled (seeded) and dealt
// round-robin, so per-fold class counts differ by at most one.
inline std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& labels,
                                                              std::size_t folds,
                                                              std::uint64_t seed) {
  if (folds < 2) throw ConfigError("folds must be at least 2");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  const std::size_t minority = std::min(by_class[0].size(), by_class[1].size());
  if (folds > minority)
    throw StratificationError("cannot stratify " + std::to_string(folds) +
                              " folds with a minority class of " + std::to_string(minority));
  std::vector<std::vector<std::size_t>> out(folds);
  std::size_t next = 0;
  for (int c = 0; c < 2; ++c) {
    Rng rng({seed, 3, static_cast<std::uint64_t>(c)});
    rng.shuffle(by_class[c]);
    for (std::size_t idx : by_class[c]) out[next++ % folds].push_back(idx);
  }
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

struct CrossValidationResult {
  MetricsReport report;
  std::vector<std::vector<std::size_t>> fold_indices;
  std::vector<std::vector<EpochLosses>> histories;
  std::vector<std::vector<Prediction>> predictions;
  std::vector<ParamStore> params;
};

// Cross-validation over the given fold partition (lists of validation indices).
inline CrossValidationResult cross_validate(const std::vector<VolumeSample>& data, const ModelConfig& model,
                                            const TrainConfig& cfg, const M2MConfig& m2m,
                                            std::vector<std::vector<std::size_t>> folds) {
  cfg.validate();
  std::vector<bool> seen(data.size(), false);
  for (const auto& f : folds)
    for (std::size_t i : f) {
      if (i >= data.size() || seen[i]) throw ContractError("fold lists must partition the subjects");
      seen[i] = true;
    }
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw ContractError("fold lists must partition the subjects");
  CrossValidationResult out;
  out.fold_indices = std::move(folds);
  std::vector<FoldMetrics> per_fold;
  for (std::size_t k = 0; k < out.fold_indices.size(); ++k) {
    std::vector<const VolumeSample*> train, val;
    std::vector<bool> in_val(data.size(), false);
    for (std::size_t i : out.fold_indices[k]) in_val[i] = true;
    for (std::size_t i = 0; i < data.size(); ++i) (in_val[i] ? val : train).push_back(&data[i]);
    FoldResult fr = train_fold(train, val, model, cfg, m2m, k);
    per_fold.push_back(fr.val_metrics);
    out.histories.push_back(std::move(fr.history));
    out.predictions.push_back(std::move(fr.val_predictions));
    out.params.push_back(std::move(fr.params));
  }
  out.report = MetricsReport::aggregate(std::move(per_fold));
  return out;
}

// Stratified folds drawn from cfg.folds and cfg.seed.
inline CrossValidationResult cross_validate(const std::vector<VolumeSample>& data,
                                            const ModelConfig& model, const TrainConfig& cfg,
                                            const M2MConfig& m2m) {
  cfg.validate();
  std::vector<int> labels;
  for (const auto& s : data) labels.push_back(s.label);
  return cross_validate(data, model, cfg, m2m, stratified_folds(labels, cfg.folds, cfg.seed));
}

}  // namespace m2m
