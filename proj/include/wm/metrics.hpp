#pragma once

#include <vector>

#include "wm/kgw.hpp"

namespace wm {

// Mann-Whitney AUC with tie correction:
// (#{pos > neg} + 0.5 #{pos == neg}) / (|pos| |neg|).
double roc_auc(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores);

// Threshold at the (1 - fpr) upper quantile of the negatives; returns the
// fraction of positives strictly above it.
double tpr_at_fpr(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores, double fpr);

// Fraction of scored positions whose token is green under its own context.
double green_ratio(const KgwScheme& scheme, const std::vector<std::vector<int>>& texts);

double median(std::vector<double> values);

}  // namespace wm
