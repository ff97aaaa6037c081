#include "wm/metrics.hpp"

#include <algorithm>
#include <stdexcept>

#include "wm/policy.hpp"

namespace wm {

double roc_auc(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores) {
  if (pos_scores.empty() || neg_scores.empty()) throw std::invalid_argument("roc_auc: empty score list");
  // sort-merge rank formulation, O(n log n)
  std::vector<double> neg = neg_scores;
  std::sort(neg.begin(), neg.end());
  double wins = 0.0;
  for (double p : pos_scores) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p) - neg.begin();
    const auto hi = std::upper_bound(neg.begin(), neg.end(), p) - neg.begin();
    wins += static_cast<double>(lo) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(pos_scores.size()) * static_cast<double>(neg_scores.size()));
}

double tpr_at_fpr(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores, double fpr) {
  if (pos_scores.empty() || neg_scores.empty()) throw std::invalid_argument("tpr_at_fpr: empty score list");
  if (!(fpr > 0.0 && fpr < 1.0)) throw std::invalid_argument("tpr_at_fpr: fpr must be in (0, 1)");
  const double threshold = upper_quantile(neg_scores, 1.0 - fpr);
  int64_t above = 0;
  for (double p : pos_scores)
    if (p > threshold) ++above;
  return static_cast<double>(above) / static_cast<double>(pos_scores.size());
}

double green_ratio(const KgwScheme& scheme, const std::vector<std::vector<int>>& texts) {
  if (texts.empty()) throw std::invalid_argument("green_ratio: no texts");
  int64_t green = 0, total = 0;
  const int64_t n = static_cast<int64_t>(texts.size());
#pragma omp parallel for schedule(dynamic) reduction(+ : green, total)
  for (int64_t i = 0; i < n; ++i) {
    const auto& t = texts[static_cast<size_t>(i)];
    if (static_cast<int>(t.size()) <= scheme.context_width) continue;
    const auto det = kgw_detect(scheme, t);
    green += det.green_count;
    total += det.n_scored;
  }
  if (total == 0) throw std::invalid_argument("green_ratio: no scorable positions");
  return static_cast<double>(green) / static_cast<double>(total);
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty input");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace wm
