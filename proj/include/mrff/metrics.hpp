#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mrff/errors.hpp"

namespace mrff {

struct EvalRecord {
  double score = 0.0;  // predicted click probability
  int label = 0;
};

// Probability that a random positive outranks a random negative (ties 0.5),
// via the rank-sum (Mann-Whitney) statistic with averaged tie ranks.
inline double auc(std::span<const EvalRecord> records) {
  std::size_t pos = 0;
  for (const auto& r : records) pos += r.label == 1 ? 1 : 0;
  const std::size_t neg = records.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("AUC needs at least one positive and one negative");

  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return records[a].score < records[b].score; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && records[order[j + 1]].score == records[order[i]].score) ++j;
    // ranks i+1 .. j+1 share their mean
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (records[order[k]].label == 1) rank_sum += avg_rank;
    i = j + 1;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

inline constexpr double kLogLossClip = 1e-7;

inline double logloss(std::span<const EvalRecord> records) {
  if (records.empty()) throw DegenerateInputError("LogLoss of an empty record set");
  double total = 0.0;
  for (const auto& r : records) {
    const double p = std::clamp(r.score, kLogLossClip, 1.0 - kLogLossClip);
    total -= r.label == 1 ? std::log(p) : std::log(1.0 - p);
  }
  return total / static_cast<double>(records.size());
}

}  // namespace mrff
