#pragma once

#include "treet/estimator.hpp"

#include <vector>

namespace treet {

// Directed TE with separate history lengths: the Y side conditions on k past
// observations, the X side contributes lags 0..l. Columns are z-scored before
// training.
struct AnalyzeConfig {
    std::vector<int> k_list{3, 6, 9, 12, 15};
    int l = 2;
    bool both_directions = true;
    TrainConfig train;
};

struct AnalyzeRow {
    int k = 0;
    double te_xy = 0.0;
    double te_yx = 0.0;  // NaN when only one direction was requested
};

// In-place per-row standardization to zero mean, unit variance.
void zscore_rows(Eigen::MatrixXd& values);

// One directed estimate TE_{X->Y}(k, l) on a fixed stream.
double analyze_te_single(const TimeSeriesPair& data, int k, int l, const TrainConfig& cfg);

// Full (k x direction) grid.
std::vector<AnalyzeRow> analyze_te(const TimeSeriesPair& data, const AnalyzeConfig& cfg);

// Spearman rank correlation (ties broken by average rank).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace treet
