// SPDX-License-Identifier: Apache-2.0
#include "stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace sg {

OlsFit ols_fit(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) {
        throw std::invalid_argument("ols_fit: size mismatch");
    }
    const size_t n = x.size();
    if (n < 3) {
        throw std::invalid_argument("ols_fit: need at least 3 points");
    }
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);

    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (sxx == 0.0) {
        throw std::invalid_argument("ols_fit: predictor has zero variance");
    }

    OlsFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    if (syy == 0.0) {
        fit.r2 = 0.0;
        fit.degenerate = true;
        return fit;
    }
    double ss_res = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double e = y[i] - (fit.intercept + fit.slope * x[i]);
        ss_res += e * e;
    }
    fit.r2 = 1.0 - ss_res / syy;
    return fit;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

PairedTestResult wilcoxon_signed_rank(std::span<const double> deltas) {
    if (deltas.size() < 6) {
        throw std::invalid_argument("wilcoxon_signed_rank: need at least 6 deltas");
    }

    PairedTestResult res;

    // Paired t-test on the raw deltas, reported alongside.
    {
        const double n = static_cast<double>(deltas.size());
        double mean = 0.0;
        for (double d : deltas) mean += d;
        mean /= n;
        double var = 0.0;
        for (double d : deltas) var += (d - mean) * (d - mean);
        var /= (n - 1.0);
        if (var > 0.0) {
            res.t_statistic = mean / std::sqrt(var / n);
            // Normal approximation of the t distribution; adequate at n >= 6
            // for the reporting role this plays here.
            res.t_p_value = 1.0 - normal_cdf(res.t_statistic);
        } else {
            res.t_statistic = 0.0;
            res.t_p_value = mean > 0.0 ? 0.0 : 1.0;
        }
    }

    std::vector<double> mag;
    std::vector<int> sign;
    mag.reserve(deltas.size());
    for (double d : deltas) {
        if (d != 0.0) {
            mag.push_back(std::fabs(d));
            sign.push_back(d > 0.0 ? 1 : -1);
        }
    }
    res.n_nonzero = mag.size();
    if (mag.empty()) {
        res.statistic = 0.0;
        res.p_value = 1.0;
        return res;
    }

    // Midranks over |delta|, with tie bookkeeping for the variance correction.
    const size_t n = mag.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return mag[a] < mag[b]; });

    std::vector<double> rank(n, 0.0);
    double tie_term = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && mag[order[j + 1]] == mag[order[i]]) {
            ++j;
        }
        const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k) {
            rank[order[k]] = avg_rank;
        }
        const double t = static_cast<double>(j - i + 1);
        tie_term += t * t * t - t;
        i = j + 1;
    }

    double w_plus = 0.0;
    for (size_t k = 0; k < n; ++k) {
        if (sign[k] > 0) {
            w_plus += rank[k];
        }
    }
    res.statistic = w_plus;

    const double dn = static_cast<double>(n);
    const double mean = dn * (dn + 1.0) / 4.0;
    const double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) {
        // every nonzero |delta| identical and n small; fall back to sign info
        res.p_value = w_plus > mean ? 0.5 : 1.0;
        return res;
    }
    const double z = (w_plus - mean - 0.5) / std::sqrt(var);
    res.p_value = 1.0 - normal_cdf(z);
    if (res.p_value <= 0.0) {
        res.p_value = 1e-300;  // p lies in (0, 1]
    }
    return res;
}

}  // namespace sg
