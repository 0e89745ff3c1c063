#pragma once

#include <vector>

namespace mmfuse {

// Area under the ROC curve via the Mann-Whitney U statistic computed from
// average ranks, so tied scores contribute half credit per positive/negative
// pair. Labels must be 0 or 1 and both classes must be present, otherwise
// MetricError. All-equal scores give exactly 0.5.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Product-moment correlation coefficient. Requires >= 2 points and nonzero
// variance in both arguments, otherwise MetricError.
double pearson(const std::vector<double>& y, const std::vector<double>& yhat);

// Coefficient of determination 1 - SS_res/SS_tot where SS_tot is taken around
// the mean of y. Can be negative when predictions are worse than the mean.
// Requires >= 2 points and nonzero variance in y, otherwise MetricError.
double r_squared(const std::vector<double>& y, const std::vector<double>& yhat);

}  // namespace mmfuse
