#include <gtest/gtest.h>

#include <cmath>

#include "m2m/metrics.hpp"
#include "m2m/rng.hpp"

using namespace m2m;

namespace {

// Explicit O(n²) pair counting.
double roc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

// Rank walk: repeatedly pick the highest remaining score (earliest index on ties).
double ap_walk(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<bool> used(s.size(), false);
  double tp = 0.0, sum = 0.0;
  for (std::size_t r = 1; r <= s.size(); ++r) {
    std::size_t best = s.size();
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!used[i] && (best == s.size() || s[i] > s[best])) best = i;
    used[best] = true;
    if (y[best] == 1) {
      tp += 1.0;
      sum += tp / static_cast<double>(r);
    }
  }
  return sum / tp;
}

}  // namespace

TEST(RocAuc, Examples) {
  EXPECT_EQ(roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(roc_auc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{0, 1, 1}), 0.5);
  EXPECT_NEAR(roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75,
              1e-15);
}

TEST(RocAuc, Errors) {
  EXPECT_THROW(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), MetricUndefinedError);
  EXPECT_THROW(roc_auc(std::vector<double>{0.1}, std::vector<int>{0, 1}), ContractError);
  EXPECT_THROW(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 2}), ContractError);
}

TEST(PrAuc, Examples) {
  EXPECT_EQ(pr_auc(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 1, 0}), 1.0);
  EXPECT_NEAR(pr_auc(std::vector<double>{0.9, 0.5, 0.1}, std::vector<int>{1, 0, 1}),
              (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  for (std::size_t n : {1u, 4u, 9u}) {
    std::vector<double> s(n);
    std::vector<int> y(n, 0);
    for (std::size_t i = 0; i < n; ++i) s[i] = static_cast<double>(n - i);
    y.back() = 1;
    EXPECT_NEAR(pr_auc(s, y), 1.0 / static_cast<double>(n), 1e-15);
  }
  EXPECT_THROW(pr_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}), MetricUndefinedError);
}

TEST(PrAuc, TiesKeepInputOrder) {
  // Equal scores: the positive listed first is ranked first.
  EXPECT_EQ(pr_auc(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(pr_auc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
}

TEST(Accuracy, Examples) {
  using L = std::array<double, 2>;
  EXPECT_EQ(accuracy(std::vector<L>{{0, 1}, {2, 1}}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(accuracy(std::vector<L>{{0, 1}, {2, 1}}, std::vector<int>{0, 1}), 0.0);
  EXPECT_EQ(accuracy(std::vector<L>{{0, 0}}, std::vector<int>{1}), 0.0);
  EXPECT_THROW(accuracy(std::vector<L>{}, std::vector<int>{}), ContractError);
}

TEST(Metrics, MatchBruteForceOracles) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(49);
    std::vector<double> s(n);
    std::vector<int> y(n);
    // Coarse scores so ties are common.
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(8)) / 8.0;
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    ASSERT_NEAR(roc_auc(s, y), roc_pairs(s, y), 1e-9);
    ASSERT_NEAR(pr_auc(s, y), ap_walk(s, y), 1e-9);
  }
}

TEST(RocAuc, InvariantUnderMonotoneTransforms) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + rng.below(30);
    std::vector<double> s(n), t(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.normal();
      t[i] = std::exp(3.0 * s[i]) - 7.0;
      y[i] = i % 2 ? 1 : static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    ASSERT_EQ(roc_auc(s, y), roc_auc(t, y));
  }
}

TEST(Metrics, RandomPredictorSanityBands) {
  Rng rng(3);
  double roc = 0.0, pr = 0.0, prevalence = 0.0;
  const int trials = 1000;
  for (int trial = 0; trial < trials; ++trial) {
    const std::size_t n = 40;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform();
      y[i] = rng.uniform() < 0.3 ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    roc += roc_auc(s, y);
    pr += pr_auc(s, y);
    double pos = 0.0;
    for (int v : y) pos += v;
    prevalence += pos / static_cast<double>(n);
  }
  EXPECT_NEAR(roc / trials, 0.5, 0.02);
  // Average precision of a random ranking sits slightly above prevalence.
  EXPECT_NEAR(pr / trials, prevalence / trials, 0.06);
}

TEST(MetricsReport, Aggregate) {
  MetricsReport r = MetricsReport::aggregate({{0.6, 0.6, 0.6}, {0.8, 0.8, 0.8}});
  EXPECT_NEAR(r.mean.roc_auc, 0.7, 1e-15);
  EXPECT_NEAR(r.std.roc_auc, 0.1, 1e-15);
  MetricsReport same = MetricsReport::aggregate({{0.5, 0.7, 0.9}, {0.5, 0.7, 0.9}, {0.5, 0.7, 0.9}});
  EXPECT_DOUBLE_EQ(same.mean.accuracy, 0.9);
  EXPECT_NEAR(same.std.accuracy, 0.0, 1e-15);
  EXPECT_EQ(same.std.pr_auc, 0.0);
}
