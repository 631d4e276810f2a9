#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "ccn/error.hpp"

namespace ccn {

/// ROC AUC via the rank-sum statistic: P(score_pos > score_neg) with ties
/// counted half. O(n log n). Tied scores share their average rank; ranks are
/// kept doubled so the statistic stays an exact integer.
inline double compute_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DataError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  std::uint64_t pos = 0;
  std::uint64_t rank_sum_x2 = 0;  // sum over positives of 2 * (1-based average rank)
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // ranks i+1 .. j share the average (i + 1 + j) / 2
    const std::uint64_t avg_x2 = i + 1 + j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0) {
        ++pos;
        rank_sum_x2 += avg_x2;
      }
    }
    i = j;
  }
  const std::uint64_t neg = n - pos;
  if (pos == 0 || neg == 0) throw DataError("auc undefined: labels contain a single class");
  const std::uint64_t u_x2 = rank_sum_x2 - pos * (pos + 1);
  return static_cast<double>(u_x2) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

/// Mean after dropping the best and worst value when there are at least 5.
inline double trimmed_mean(std::vector<double> values) {
  if (values.empty()) throw DataError("trimmed_mean of no values");
  std::sort(values.begin(), values.end());
  std::span<const double> kept(values);
  if (kept.size() >= 5) kept = kept.subspan(1, kept.size() - 2);
  double s = 0.0;
  for (double v : kept) s += v;
  return s / static_cast<double>(kept.size());
}

}  // namespace ccn
