#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "m2m/errors.hpp"

namespace m2m {

namespace metric_detail {
inline void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw ContractError("scores and labels differ in length");
  for (int l : labels)
    if (l != 0 && l != 1) throw ContractError("labels must be 0 or 1");
}
}  // namespace metric_detail

// Mann-Whitney ROC-AUC: P(score_pos > score_neg) + ½ P(tie) over all
// positive/negative pairs, computed from mid-ranks.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  metric_detail::check_inputs(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0)
    throw MetricUndefinedError("ROC-AUC needs both classes present");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

// Average precision: mean over positives of the precision at each positive's
// rank in descending-score order. Equal scores keep their input order.
inline double pr_auc(std::span<const double> scores, std::span<const int> labels) {
  metric_detail::check_inputs(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double tp = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]] != 1) continue;
    tp += 1.0;
    sum += tp / static_cast<double>(r + 1);
  }
  if (tp == 0.0) throw MetricUndefinedError("PR-AUC needs at least one positive");
  return sum / tp;
}

// argmax over two logits; equal logits predict class 0.
inline int predict_class(const std::array<double, 2>& logits) {
  return logits[1] > logits[0] ? 1 : 0;
}

inline double accuracy(std::span<const std::array<double, 2>> logits, std::span<const int> labels) {
  if (logits.empty()) throw ContractError("accuracy of an empty set");
  if (logits.size() != labels.size()) throw ContractError("logits and labels differ in length");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (predict_class(logits[i]) == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(logits.size());
}

struct FoldMetrics {
  double pr_auc = 0.0;
  double roc_auc = 0.0;
  double accuracy = 0.0;
};

// Per-fold metrics with their mean and population standard deviation.
struct MetricsReport {
  std::vector<FoldMetrics> folds;
  FoldMetrics mean;
  FoldMetrics std;

  static MetricsReport aggregate(std::vector<FoldMetrics> folds) {
    MetricsReport r;
    r.folds = std::move(folds);
    if (r.folds.empty()) return r;
    const double n = static_cast<double>(r.folds.size());
    auto stat = [&](double FoldMetrics::*field, double& mean, double& sd) {
      double s = 0.0;
      for (const auto& f : r.folds) s += f.*field;
      mean = s / n;
      double v = 0.0;
      for (const auto& f : r.folds) v += (f.*field - mean) * (f.*field - mean);
      sd = std::sqrt(v / n);
    };
    stat(&FoldMetrics::pr_auc, r.mean.pr_auc, r.std.pr_auc);
    stat(&FoldMetrics::roc_auc, r.mean.roc_auc, r.std.roc_auc);
    stat(&FoldMetrics::accuracy, r.mean.accuracy, r.std.accuracy);
    return r;
  }
};

}  // namespace m2m
