// m2m_cli: data generation, training, cross-validation, gradient checks,
// alignment analysis and exports.
//
// Exit codes: 0 success, 1 contract/config error (or a failed gradient check),
// 2 IO error (unreadable/unwritable files, malformed input files).

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "m2m/config_json.hpp"
#include "m2m/dataset_io.hpp"
#include "m2m/export.hpp"
#include "m2m/selfcheck.hpp"
#include "m2m/synthdata.hpp"
#include "m2m/training.hpp"

namespace {

using namespace m2m;

constexpr double kGradTolerance = 1e-4;

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string scale = "tiny";
  std::string source;
  std::optional<double> percentile;
  std::size_t subject = 0;
  std::size_t top_k = 3;
  std::size_t holdout = 4;
  std::optional<std::size_t> val_fold;
  std::vector<std::string> predictions;
};

RunConfig load_config(const Options& o) {
  if (o.config.empty()) return RunConfig{};
  return parse_run_config(read_text(o.config));
}

// Config for commands that consume a checkpoint: --config wins, else the
// config stored with the checkpoint.
RunConfig config_for_checkpoint(const Options& o) {
  if (!o.config.empty()) return load_config(o);
  Json meta;
  load_checkpoint(o.checkpoint, &meta);
  if (!meta.is_object() || !meta.contains("config"))
    throw ConfigError("checkpoint has no stored config; pass --config");
  return run_config_from_json(meta["config"]);
}

void echo_config(const Json& j) { std::cout << "resolved config:\n" << j.dump(2) << "\n"; }

struct Data {
  std::vector<VolumeSample> samples;
  std::optional<GroundTruth> truth;
  std::vector<int> folds;
};

Data load_data(const RunConfig& cfg, const std::string& dir) {
  Data d;
  if (dir.empty()) {
    SyntheticDataset gen = generate_dataset(cfg.data);
    d.samples = std::move(gen.samples);
    d.truth = std::move(gen.truth);
    return d;
  }
  StoredDataset stored = read_dataset(dir);
  d.samples = std::move(stored.samples);
  d.folds = std::move(stored.folds);
  return d;
}

std::vector<int> labels_of(const std::vector<VolumeSample>& s) {
  std::vector<int> out;
  for (const auto& v : s) out.push_back(v.label);
  return out;
}

// Stored fold assignment when complete and matching the configured count,
// else freshly stratified folds.
std::vector<std::vector<std::size_t>> resolve_folds(const Data& d, const TrainConfig& t) {
  const bool stored = !d.folds.empty() && std::all_of(d.folds.begin(), d.folds.end(), [&](int f) {
    return f >= 0 && static_cast<std::size_t>(f) < t.folds;
  });
  if (!stored) return stratified_folds(labels_of(d.samples), t.folds, t.seed);
  std::vector<std::vector<std::size_t>> out(t.folds);
  for (std::size_t i = 0; i < d.folds.size(); ++i) out[static_cast<std::size_t>(d.folds[i])].push_back(i);
  return out;
}

std::string losses_csv(const std::vector<EpochLosses>& h) {
  std::string out = "epoch,ce,m2m,total,lr\n";
  char buf[160];
  for (const auto& e : h) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.ce, e.m2m, e.total, e.lr);
    out += buf;
  }
  return out;
}

std::string predictions_csv(const std::vector<std::size_t>& subjects, const std::vector<Prediction>& preds) {
  std::string out = "subject,label,logit0,logit1,score\n";
  char buf[160];
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Prediction& p = preds[i];
    std::snprintf(buf, sizeof buf, "%zu,%d,%.17g,%.17g,%.17g\n", subjects[i], p.label, p.logits[0], p.logits[1],
                  p.score);
    out += buf;
  }
  return out;
}

Json checkpoint_meta(const RunConfig& cfg) { return Json{{"config", to_json(cfg)}}; }

std::string require_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  return o.out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Options& o) {
  RunConfig cfg = load_config(o);
  cfg.data.validate();
  echo_config(to_json(cfg));
  const std::string out = require_out(o);
  SyntheticDataset d = generate_dataset(cfg.data);
  std::vector<int> fold_of(d.samples.size(), -1);
  const auto folds = stratified_folds(labels_of(d.samples), cfg.train.folds, cfg.train.seed);
  for (std::size_t k = 0; k < folds.size(); ++k)
    for (std::size_t i : folds[k]) fold_of[i] = static_cast<int>(k);
  write_dataset(out, d.samples, fold_of, to_json(cfg.data));
  Json truth{{"correspondence", d.truth.correspondence}, {"f_centers", d.truth.f_centers},
             {"s_centers", d.truth.s_centers}};
  write_text(fs::path(out) / "truth.json", truth.dump(2) + "\n");
  std::cout << "wrote " << d.samples.size() << " subjects to " << out << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  RunConfig cfg = load_config(o);
  cfg.validate();
  echo_config(to_json(cfg));
  const fs::path out = require_out(o);
  Data d = load_data(cfg, o.data);
  std::vector<const VolumeSample*> train, val;
  std::vector<std::size_t> val_ids;
  if (o.val_fold) {
    const auto folds = resolve_folds(d, cfg.train);
    if (*o.val_fold >= folds.size()) throw ConfigError("--val-fold out of range");
    std::vector<bool> in_val(d.samples.size(), false);
    for (std::size_t i : folds[*o.val_fold]) in_val[i] = true;
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
      (in_val[i] ? val : train).push_back(&d.samples[i]);
      if (in_val[i]) val_ids.push_back(i);
    }
  } else {
    for (const auto& s : d.samples) train.push_back(&s);
  }
  FoldResult r = train_fold(train, val, cfg.model, cfg.train, cfg.m2m, o.val_fold.value_or(0));
  ensure_dir(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  write_text(out / "losses.csv", losses_csv(r.history));
  save_checkpoint(out / "checkpoint", r.params, checkpoint_meta(cfg));
  if (!val.empty()) {
    write_text(out / "predictions.csv", predictions_csv(val_ids, r.val_predictions));
    write_text(out / "metrics.json", to_json(MetricsReport::aggregate({r.val_metrics})).dump(2) + "\n");
  }
  if (!r.history.empty())
    std::printf("final epoch: ce %.6f m2m %.6f total %.6f\n", r.history.back().ce, r.history.back().m2m,
                r.history.back().total);
  return 0;
}

int cmd_cv(const Options& o) {
  RunConfig cfg = load_config(o);
  cfg.validate();
  echo_config(to_json(cfg));
  const fs::path out = require_out(o);
  Data d = load_data(cfg, o.data);
  CrossValidationResult r = cross_validate(d.samples, cfg.model, cfg.train, cfg.m2m, resolve_folds(d, cfg.train));
  ensure_dir(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  for (std::size_t k = 0; k < r.fold_indices.size(); ++k) {
    const fs::path fold = out / ("fold" + std::to_string(k));
    ensure_dir(fold);
    write_text(fold / "losses.csv", losses_csv(r.histories[k]));
    write_text(fold / "predictions.csv", predictions_csv(r.fold_indices[k], r.predictions[k]));
    save_checkpoint(fold / "checkpoint", r.params[k], checkpoint_meta(cfg));
  }
  const Json metrics = to_json(r.report);
  write_text(out / "metrics.json", metrics.dump(2) + "\n");
  std::printf("%-9s %-18s %-18s %-18s\n", "", "PR-AUC", "ROC-AUC", "Accuracy");
  std::printf("%-9s %.4f ± %.4f    %.4f ± %.4f    %.4f ± %.4f\n", "mean±std", r.report.mean.pr_auc,
              r.report.std.pr_auc, r.report.mean.roc_auc, r.report.std.roc_auc, r.report.mean.accuracy,
              r.report.std.accuracy);
  return 0;
}

int cmd_gradcheck(const Options& o) {
  if (o.scale != "tiny") throw ConfigError("unknown --scale '" + o.scale + "' (supported: tiny)");
  echo_config(Json{{"scale", o.scale}, {"h", 1e-5}, {"tolerance", kGradTolerance},
                   {"full_model", to_json(gradcheck_toy_model())}});
  const std::vector<NamedGradCheck> checks = gradient_suite(1e-5);
  Json report{{"checks", Json::array()}};
  double worst = 0.0;
  for (const auto& c : checks) {
    worst = std::max(worst, c.report.max_rel_err);
    report["checks"].push_back(Json{{"name", c.name},
                                    {"max_rel_err", c.report.max_rel_err},
                                    {"worst_param", c.report.worst_param},
                                    {"entries", c.report.entries_checked},
                                    {"passed", c.report.passed(kGradTolerance)}});
  }
  report["max_rel_err"] = worst;
  report["tolerance"] = kGradTolerance;
  report["passed"] = worst < kGradTolerance;
  std::cout << report.dump(2) << "\n";
  if (!o.out.empty()) write_text(o.out, report.dump(2) + "\n");
  return worst < kGradTolerance ? 0 : 1;
}

int cmd_align_analyze(const Options& o) {
  RunConfig cfg = load_config(o);
  cfg.validate();
  echo_config(to_json(cfg));
  const fs::path out = require_out(o);
  Data d = load_data(cfg, o.data);
  ParamStore params;
  std::vector<std::size_t> eval_ids;
  ensure_dir(out);
  if (!o.checkpoint.empty()) {
    params = load_checkpoint(o.checkpoint);
    for (std::size_t i = 0; i < d.samples.size(); ++i) eval_ids.push_back(i);
  } else {
    if (o.holdout == 0 || o.holdout >= d.samples.size())
      throw ConfigError("--holdout must leave at least one training subject");
    const std::size_t n_train = d.samples.size() - o.holdout;
    std::vector<const VolumeSample*> train;
    for (std::size_t i = 0; i < n_train; ++i) train.push_back(&d.samples[i]);
    for (std::size_t i = n_train; i < d.samples.size(); ++i) eval_ids.push_back(i);
    FoldResult r = train_alignment(train, cfg.model, cfg.train, cfg.m2m);
    params = std::move(r.params);
    write_text(out / "losses.csv", losses_csv(r.history));
    save_checkpoint(out / "checkpoint", params, checkpoint_meta(cfg));
  }
  Json subjects = Json::array();
  double recall = 0.0, corr = 0.0, chance = 0.0;
  for (std::size_t i : eval_ids) {
    const bool truth = d.truth.has_value();
    AlignmentStats st = alignment_stats(params, cfg.model, d.samples[i], truth ? &d.truth->f_maps[i] : nullptr,
                                        truth ? &d.truth->s_maps[i] : nullptr,
                                        truth ? &d.truth->correspondence : nullptr);
    recall += st.recall_at_1;
    corr += st.correspondence_recall;
    chance = st.chance;
    Json s{{"subject", i}, {"recall_at_1", st.recall_at_1}, {"mean_positive", st.mean_positive},
           {"mean_negative", st.mean_negative}};
    if (truth) s["correspondence_recall"] = st.correspondence_recall;
    subjects.push_back(s);
  }
  const double n = static_cast<double>(eval_ids.size());
  Json report{{"patches", chance > 0.0 ? static_cast<std::size_t>(1.0 / chance + 0.5) : 0},
              {"chance", chance},
              {"recall_at_1", recall / n},
              {"correspondence_recall", d.truth ? Json(corr / n) : Json(nullptr)},
              {"subjects", subjects}};
  write_text(out / "alignment.json", report.dump(2) + "\n");
  std::printf("recall@1 %.4f (chance %.4f, ratio %.2f)\n", recall / n, chance, recall / n / chance);
  return 0;
}

int cmd_export_attn(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  RunConfig cfg = config_for_checkpoint(o);
  cfg.validate();
  echo_config(to_json(cfg));
  const std::string out = require_out(o);
  Data d = load_data(cfg, o.data);
  if (o.subject >= d.samples.size()) throw ConfigError("--subject out of range");
  const ParamStore params = load_checkpoint(o.checkpoint);
  const AttentionTrace trace = capture_attention(params, cfg.model, cfg.train, d.samples[o.subject]);
  const AttentionExport e = make_attention_export(trace, o.source, o.percentile, o.top_k);
  write_text(out, format_attention_csv(e));
  if (!e.top_keys.empty()) {
    std::cout << "top time indices:";
    for (std::size_t k : e.top_keys) std::cout << ' ' << k;
    std::cout << "\n";
  }
  return 0;
}

int cmd_export_embed(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  RunConfig cfg = config_for_checkpoint(o);
  cfg.validate();
  echo_config(to_json(cfg));
  const std::string out = require_out(o);
  Data d = load_data(cfg, o.data);
  const ParamStore params = load_checkpoint(o.checkpoint);
  std::vector<std::vector<double>> rows;
  for (const auto& s : d.samples) rows.push_back(pooled_embedding(params, cfg.model, cfg.train, s));
  write_text(out, format_embedding_csv(rows, labels_of(d.samples)));
  return 0;
}

// Reads one predictions CSV (columns label and score; logit0/logit1 optional).
FoldMetrics metrics_from_csv(const std::string& path) {
  const std::string text = read_text(path);
  std::vector<std::string_view> lines;
  std::string_view rest(text);
  while (!rest.empty()) {
    const std::size_t nl = rest.find('\n');
    lines.push_back(rest.substr(0, nl));
    rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
  }
  if (lines.empty()) throw ParseError(0, 0, "missing header row");
  const auto header = csv_detail::split(lines[0]);
  auto col = [&](std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return c;
    return std::nullopt;
  };
  const auto label_col = col("label"), score_col = col("score"), l0 = col("logit0"), l1 = col("logit1");
  if (!label_col || !score_col) throw ParseError(0, header.size(), "predictions need 'label' and 'score' columns");
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::array<double, 2>> logits;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    if (csv_detail::trim(lines[r]).empty()) continue;
    const auto cells = csv_detail::split(lines[r]);
    if (cells.size() != header.size()) throw ParseError(r, std::min(cells.size(), header.size()) + 1, "column count");
    auto num = [&](std::size_t c) {
      double v;
      if (!csv_detail::parse_double(cells[c], v)) throw ParseError(r, c + 1, "non-numeric cell");
      return v;
    };
    const double label = num(*label_col);
    if (label != 0.0 && label != 1.0) throw ParseError(r, *label_col + 1, "label must be 0 or 1");
    labels.push_back(static_cast<int>(label));
    scores.push_back(num(*score_col));
    // Without logits the score acts as P(class 1); 0.5 ties resolve to class 0.
    if (l0 && l1) logits.push_back({num(*l0), num(*l1)});
    else logits.push_back({0.5, scores.back()});
  }
  return {pr_auc(scores, labels), roc_auc(scores, labels), accuracy(logits, labels)};
}

int cmd_metrics(const Options& o) {
  if (o.predictions.empty()) throw ConfigError("--predictions needs at least one file");
  echo_config(Json{{"predictions", o.predictions}});
  std::vector<FoldMetrics> folds;
  for (const auto& p : o.predictions) folds.push_back(metrics_from_csv(p));
  const Json report = to_json(MetricsReport::aggregate(std::move(folds)));
  std::cout << report.dump(2) << "\n";
  if (!o.out.empty()) write_text(o.out, report.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal fusion with many-to-many contrastive alignment"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub, bool data = true) {
    sub->add_option("--config", o.config, "JSON run config");
    sub->add_option("--out", o.out, "output directory or file");
    if (data) sub->add_option("--data", o.data, "dataset directory written by gen-data (default: generate from config)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset to disk");
  add_common(gen, false);
  auto* train = app.add_subcommand("train", "train one model and save a checkpoint");
  add_common(train);
  train->add_option("--val-fold", o.val_fold, "hold out this stratified fold for validation");
  auto* cv = app.add_subcommand("cv", "stratified k-fold cross-validation");
  add_common(cv);
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--scale", o.scale, "model scale (tiny)");
  grad->add_option("--out", o.out, "write the report JSON here");
  auto* align = app.add_subcommand("align-analyze", "train encoders on M2M alone and measure patch retrieval");
  add_common(align);
  align->add_option("--checkpoint", o.checkpoint, "evaluate these encoder weights instead of training");
  align->add_option("--holdout", o.holdout, "subjects held out for evaluation");
  auto* attn = app.add_subcommand("export-attn", "export an attention matrix as CSV");
  add_common(attn);
  attn->add_option("--checkpoint", o.checkpoint, "checkpoint directory")->required();
  attn->add_option("--source", o.source,
                   "joint-spatial | refine-fmri | refine-smri | refine-tabular | temporal | temporal-self")
      ->required();
  attn->add_option("--percentile", o.percentile, "keep entries at or above this percentile");
  attn->add_option("--subject", o.subject, "subject index");
  attn->add_option("--top-k", o.top_k, "time indices reported for temporal sources");
  auto* embed = app.add_subcommand("export-embed", "export pooled per-subject embeddings as CSV");
  add_common(embed);
  embed->add_option("--checkpoint", o.checkpoint, "checkpoint directory")->required();
  auto* metrics = app.add_subcommand("metrics", "metrics from prediction CSVs (one per fold)");
  metrics->add_option("--predictions", o.predictions, "CSV files with label and score columns")->required();
  metrics->add_option("--out", o.out, "write the report JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*cv) return cmd_cv(o);
    if (*grad) return cmd_gradcheck(o);
    if (*align) return cmd_align_analyze(o);
    if (*attn) return cmd_export_attn(o);
    if (*embed) return cmd_export_embed(o);
    if (*metrics) return cmd_metrics(o);
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
