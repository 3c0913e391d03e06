// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "deepj/error.hpp"

namespace deepj {

struct Metrics {
  double recall = 0.0;
  double f1 = 0.0;
  double auroc = 0.0;
  double auprc = 0.0;

  bool operator==(const Metrics&) const = default;
};

inline void check_scored(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw InputError("metrics: score and label counts differ");
  if (scores.empty()) throw InputError("metrics: no predictions");
  for (int l : labels)
    if (l != 0 && l != 1) throw InputError("metrics: labels must be 0 or 1");
}

// Mean of per-class recall at `threshold` (score >= threshold predicts 1).
// A class with no members is left out of the mean.
inline double macro_recall(const std::vector<double>& scores, const std::vector<int>& labels,
                           double threshold = 0.5) {
  check_scored(scores, labels);
  double hit[2] = {0, 0}, total[2] = {0, 0};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int pred = scores[i] >= threshold ? 1 : 0;
    total[labels[i]] += 1;
    if (pred == labels[i]) hit[labels[i]] += 1;
  }
  double sum = 0;
  int classes = 0;
  for (int c = 0; c < 2; ++c) {
    if (total[c] == 0) continue;
    sum += hit[c] / total[c];
    ++classes;
  }
  return sum / classes;
}

// Mean of per-class F1; a class with 2TP + FP + FN = 0 scores 0.
inline double macro_f1(const std::vector<double>& scores, const std::vector<int>& labels, double threshold = 0.5) {
  check_scored(scores, labels);
  double sum = 0;
  for (int c = 0; c < 2; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const int pred = scores[i] >= threshold ? 1 : 0;
      if (pred == c && labels[i] == c) tp += 1;
      if (pred == c && labels[i] != c) fp += 1;
      if (pred != c && labels[i] == c) fn += 1;
    }
    const double denom = 2 * tp + fp + fn;
    sum += denom == 0 ? 0.0 : 2 * tp / denom;
  }
  return sum / 2;
}

inline void require_both_classes(const std::vector<int>& labels) {
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size()))
    throw InputError("metrics: AUROC/AUPRC undefined for single-class labels");
}

// Mann-Whitney statistic; tied positive/negative pairs count one half.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_scored(scores, labels);
  require_both_classes(labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tie groups.
  double rank_sum = 0, positives = 0;
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start;
    while (end < order.size() && scores[order[end]] == scores[order[start]]) ++end;
    const double avg_rank = 0.5 * static_cast<double>(start + 1 + end);
    for (std::size_t k = start; k < end; ++k)
      if (labels[order[k]] == 1) {
        rank_sum += avg_rank;
        positives += 1;
      }
    start = end;
  }
  const double negatives = static_cast<double>(scores.size()) - positives;
  return (rank_sum - positives * (positives + 1) / 2) / (positives * negatives);
}

// Average precision: Σ_n (R_n − R_{n−1}) P_n over distinct thresholds,
// highest first.
inline double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_scored(scores, labels);
  require_both_classes(labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  double tp = 0, seen = 0, prev_recall = 0, ap = 0;
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start;
    while (end < order.size() && scores[order[end]] == scores[order[start]]) {
      tp += labels[order[end]];
      seen += 1;
      ++end;
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / seen);
    prev_recall = recall;
    start = end;
  }
  return ap;
}

inline Metrics evaluate(const std::vector<double>& scores, const std::vector<int>& labels, double threshold = 0.5) {
  return {macro_recall(scores, labels, threshold), macro_f1(scores, labels, threshold), auroc(scores, labels),
          auprc(scores, labels)};
}

struct Interval {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
};

// Mean with a two-sided Student-t interval; a single value or identical
// values give a zero-width interval.
inline Interval t_interval(const std::vector<double>& values, double level = 0.95) {
  if (values.empty()) throw InputError("confidence interval: no values");
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); }))
    return {values.front(), values.front(), values.front()};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) return {mean, mean, mean};
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double se = std::sqrt(ss / (n - 1)) / std::sqrt(n);
  const boost::math::students_t dist(n - 1);
  const double t = boost::math::quantile(boost::math::complement(dist, (1.0 - level) / 2));
  return {mean, mean - t * se, mean + t * se};
}

}  // namespace deepj
