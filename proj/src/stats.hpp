// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>

namespace sg {

struct OlsFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
    bool degenerate = false;  // constant target: r2 defined as 0 and flagged
};

// Ordinary least squares of y on x. Throws if fewer than 3 points or the
// predictor has zero variance.
OlsFit ols_fit(std::span<const double> x, std::span<const double> y);

struct PairedTestResult {
    double statistic = 0.0;   // Wilcoxon W+ (sum of ranks of positive deltas)
    double p_value = 1.0;     // one-sided, H1: deltas > 0
    size_t n_nonzero = 0;
    double t_statistic = 0.0; // paired t-test on the same deltas, for comparison
    double t_p_value = 1.0;
};

// One-sided Wilcoxon signed-rank test with normal approximation, tie
// correction and continuity correction. Zero deltas are dropped; if all
// deltas are zero the p-value is 1. Requires at least 6 deltas.
PairedTestResult wilcoxon_signed_rank(std::span<const double> deltas);

// Standard normal CDF.
double normal_cdf(double z);

}  // namespace sg
