#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m2m/alignment.hpp"
#include "m2m/model.hpp"
#include "m2m/synthdata.hpp"
#include "m2m/training.hpp"

namespace m2m {

inline constexpr const char* kAttentionSources[] = {"joint-spatial", "refine-fmri",   "refine-smri",
                                                    "refine-tabular", "temporal", "temporal-self"};

// Keeps the top (100 − p)% entries: k = ceil(n·(100 − p)/100), then every entry
// ≥ the k-th largest score, so ties at the cut are all kept. p = 100 keeps none.
inline std::vector<bool> threshold_mask(std::span<const double> scores, double p) {
  if (!(p >= 0.0 && p <= 100.0)) throw ContractError("percentile must lie in [0, 100]");
  const std::size_t n = scores.size();
  // The 1e-9 slack stops n·(100 − p)/100 landing a hair above an integer.
  const auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * (100.0 - p) / 100.0 - 1e-9));
  std::vector<bool> keep(n, false);
  if (k == 0) return keep;
  std::vector<double> sorted(scores.begin(), scores.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end(),
                   std::greater<>());
  const double cut = sorted[k - 1];
  for (std::size_t i = 0; i < n; ++i) keep[i] = scores[i] >= cut;
  return keep;
}

// Key indices ranked by mean attention over query rows; ties go to the lower index.
inline std::vector<std::size_t> top_key_indices(const Tensor& scores, std::size_t k) {
  const std::size_t q = scores.dim(0), m = scores.dim(1);
  std::vector<double> mean(m, 0.0);
  for (std::size_t r = 0; r < q; ++r)
    for (std::size_t c = 0; c < m; ++c) mean[c] += scores.at(r, c) / static_cast<double>(q);
  std::vector<std::size_t> idx(m);
  for (std::size_t c = 0; c < m; ++c) idx[c] = c;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return mean[a] > mean[b]; });
  idx.resize(std::min(k, m));
  return idx;
}

struct AttentionExport {
  std::string source;
  Tensor scores;  // (queries, keys)
  std::optional<double> percentile;
  std::vector<bool> kept;
  std::vector<std::size_t> top_keys;  // temporal sources only
};

inline AttentionTrace capture_attention(const ParamStore& params, const ModelConfig& model,
                                        const TrainConfig& cfg, const VolumeSample& sample) {
  Tape tape;
  Binder bind(tape, params);
  AttentionTrace trace;
  forward(bind, model, cfg.modalities, cfg.toggles, sample, &trace);
  return trace;
}

inline AttentionExport make_attention_export(const AttentionTrace& trace, const std::string& source,
                                             std::optional<double> percentile, std::size_t top_k = 3) {
  if (std::find(std::begin(kAttentionSources), std::end(kAttentionSources), source) == std::end(kAttentionSources))
    throw ConfigError("unknown attention source '" + source + "'");
  auto it = trace.find(source);
  if (it == trace.end())
    throw ConfigError("attention source '" + source + "' is not produced under the current modalities/toggles");
  AttentionExport out{source, it->second, percentile, {}, {}};
  if (percentile) out.kept = threshold_mask(out.scores.data(), *percentile);
  if (source == "temporal" || source == "temporal-self") out.top_keys = top_key_indices(out.scores, top_k);
  return out;
}

inline std::string format_attention_csv(const AttentionExport& e) {
  std::string out = e.percentile ? "query_idx,key_idx,score,kept\n" : "query_idx,key_idx,score\n";
  const std::size_t m = e.scores.dim(1);
  char buf[96];
  for (std::size_t r = 0; r < e.scores.dim(0); ++r)
    for (std::size_t c = 0; c < m; ++c) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g", r, c, e.scores.at(r, c));
      out += buf;
      if (e.percentile) out += e.kept[r * m + c] ? ",1" : ",0";
      out += '\n';
    }
  return out;
}

// Classifier input (concatenated pooled modality features) for one sample.
inline std::vector<double> pooled_embedding(const ParamStore& params, const ModelConfig& model,
                                            const TrainConfig& cfg, const VolumeSample& sample) {
  Tape tape;
  Binder bind(tape, params);
  ForwardOutput f = forward(bind, model, cfg.modalities, cfg.toggles, sample);
  const auto d = f.pooled.value().data();
  return {d.begin(), d.end()};
}

inline std::string format_embedding_csv(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels) {
  std::string out = "subject,label";
  const std::size_t dim = rows.empty() ? 0 : rows[0].size();
  for (std::size_t k = 0; k < dim; ++k) out += ",e" + std::to_string(k);
  out += '\n';
  char buf[32];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(labels[i]);
    for (double v : rows[i]) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alignment analysis on encoder outputs.

// Voxel extent of one output token of the encoder.
inline std::array<std::size_t, 3> output_patch_extent(const EncoderConfig& cfg) {
  std::size_t f = 1;
  for (std::size_t s = 1; s < cfg.stage_channels.size(); ++s) f *= cfg.merge;
  return {cfg.patch[0] * f, cfg.patch[1] * f, cfg.patch[2] * f};
}

struct AlignmentStats {
  std::size_t patches = 0;
  double recall_at_1 = 0.0;  // anchor (t, i) retrieves sMRI patch i
  double chance = 0.0;       // 1 / N
  double correspondence_recall = 0.0;  // retrieved patch is a planted partner; needs ground truth
  double mean_positive = 0.0;
  double mean_negative = 0.0;
};

// Retrieval over S[t] = F_t·Sᵀ for one subject. With ground-truth maps, also
// scores whether the retrieved sMRI patch's dominant component corresponds to
// the anchor's dominant functional component.
inline AlignmentStats alignment_stats(const ParamStore& params, const ModelConfig& model, const VolumeSample& sample,
                                      const Tensor* f_maps = nullptr, const Tensor* s_maps = nullptr,
                                      const Correspondence* corr = nullptr) {
  const LatentFeature lf = encode_volume(sample.fmri, model.encoder, params, model.fmri_prefix());
  const LatentFeature ls = encode_volume(sample.smri, model.encoder, params, model.smri_prefix());
  const SimilarityMatrix S = similarity_matrix(lf, ls);
  const std::size_t T = S.steps(), n = S.patches();
  std::vector<std::size_t> f_dom, s_dom;
  const bool truth = f_maps && s_maps && corr;
  if (truth) {
    const auto extent = output_patch_extent(model.encoder);
    f_dom = dominant_component(patch_mass(*f_maps, extent));
    s_dom = dominant_component(patch_mass(*s_maps, extent));
  }
  AlignmentStats st;
  st.patches = n;
  st.chance = 1.0 / static_cast<double>(n);
  std::size_t hits = 0, corr_hits = 0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = S.S.data().data() + (t * n + i) * n;
      const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + n) - row);
      hits += best == i ? 1 : 0;
      if (truth) corr_hits += (*corr)[f_dom[i]][s_dom[best]] ? 1 : 0;
      for (std::size_t j = 0; j < n; ++j) (j == i ? st.mean_positive : st.mean_negative) += row[j];
    }
  const double anchors = static_cast<double>(T * n);
  st.recall_at_1 = static_cast<double>(hits) / anchors;
  st.correspondence_recall = truth ? static_cast<double>(corr_hits) / anchors : 0.0;
  st.mean_positive /= anchors;
  st.mean_negative /= n > 1 ? anchors * static_cast<double>(n - 1) : 1.0;
  return st;
}

}  // namespace m2m
