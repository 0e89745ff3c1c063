#include "mmfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>

#include "mmfuse/error.hpp"

namespace mmfuse {

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw MetricError("roc_auc: scores and labels differ in length");
  const size_t n = scores.size();
  size_t n_pos = 0;
  for (int lab : labels) {
    if (lab != 0 && lab != 1) throw MetricError("roc_auc: labels must be 0 or 1");
    n_pos += static_cast<size_t>(lab);
  }
  const size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw MetricError("roc_auc: both classes must be present");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Average ranks over tie groups are multiples of 1/2, so twice the positive
  // rank sum is an exact integer and so is twice the U statistic.
  unsigned long long rank_sum_pos_x2 = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const unsigned long long avg_rank_x2 = static_cast<unsigned long long>(i + 1 + j);
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos_x2 += avg_rank_x2;
    i = j;
  }
  const unsigned long long u_x2 =
      rank_sum_pos_x2 - static_cast<unsigned long long>(n_pos) * (n_pos + 1);
  const unsigned long long d_x2 =
      2ull * static_cast<unsigned long long>(n_pos) * static_cast<unsigned long long>(n_neg);

  // Return the nearest multiple of 2^-53 to U/(n_pos*n_neg), rounding halves
  // to even in exact integer arithmetic. Both k/2^53 and (2^53-k)/2^53 are
  // then representable doubles summing to exactly 1, which makes
  // roc_auc(s) == 1 - roc_auc(-s) hold bitwise: negating the scores reverses
  // the ranking, mapping U to n_pos*n_neg - U, and half-to-even rounding sends
  // complementary numerators to complementary integers k and 2^53 - k. The
  // quantization error is at most 2^-54.
  const unsigned __int128 num = static_cast<unsigned __int128>(u_x2) << 53;
  unsigned long long k = static_cast<unsigned long long>(num / d_x2);
  const unsigned long long rem = static_cast<unsigned long long>(num % d_x2);
  if (2 * rem > d_x2 || (2 * rem == d_x2 && (k & 1ull)))
    ++k;
  return static_cast<double>(k) / 9007199254740992.0;
}

namespace {

struct CenteredMoments {
  double mean_a = 0.0;
  double mean_b = 0.0;
  double ss_a = 0.0;
  double ss_b = 0.0;
  double cross = 0.0;
};

CenteredMoments centered_moments(const std::vector<double>& a,
                                 const std::vector<double>& b) {
  CenteredMoments m;
  const double n = static_cast<double>(a.size());
  for (double v : a) m.mean_a += v;
  for (double v : b) m.mean_b += v;
  m.mean_a /= n;
  m.mean_b /= n;
  for (size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - m.mean_a;
    const double db = b[i] - m.mean_b;
    m.ss_a += da * da;
    m.ss_b += db * db;
    m.cross += da * db;
  }
  return m;
}

}  // namespace

double pearson(const std::vector<double>& y, const std::vector<double>& yhat) {
  if (y.size() != yhat.size()) throw MetricError("pearson: length mismatch");
  if (y.size() < 2) throw MetricError("pearson: need at least 2 points");
  const CenteredMoments m = centered_moments(y, yhat);
  if (m.ss_a == 0.0 || m.ss_b == 0.0)
    throw MetricError("pearson: zero variance input");
  return m.cross / std::sqrt(m.ss_a * m.ss_b);
}

double r_squared(const std::vector<double>& y, const std::vector<double>& yhat) {
  if (y.size() != yhat.size()) throw MetricError("r_squared: length mismatch");
  if (y.size() < 2) throw MetricError("r_squared: need at least 2 points");
  double mean_y = 0.0;
  for (double v : y) mean_y += v;
  mean_y /= static_cast<double>(y.size());
  double ss_tot = 0.0;
  double ss_res = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
    ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  }
  if (ss_tot == 0.0) throw MetricError("r_squared: target has zero variance");
  return 1.0 - ss_res / ss_tot;
}

}  // namespace mmfuse
