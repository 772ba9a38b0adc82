#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "probegeo/error.hpp"

namespace probegeo {

// Rank-based AUROC (Mann-Whitney U): Pr(score+ > score-) + 0.5 Pr(score+ == score-).
// Labels are +1 / -1.
inline double auroc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw DataError("auroc: scores/labels length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos = 0, neg = 0, pos_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] > 0) {
        pos += 1;
        pos_rank_sum += mid_rank;
      } else {
        neg += 1;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) throw DataError("auroc: both classes must be present");
  return (pos_rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

template <typename A, typename B>
double auroc(const A& scores, const B& labels) {
  return auroc(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())),
               std::span<const double>(labels.data(), static_cast<std::size_t>(labels.size())));
}

struct FprRecall {
  double fpr = 0;
  double recall = 0;
};

// A row is accepted when score > tau (strict).
inline FprRecall fpr_recall(std::span<const double> scores, std::span<const double> labels,
                            double tau) {
  if (scores.size() != labels.size()) throw DataError("fpr_recall: length mismatch");
  double pos = 0, neg = 0, tp = 0, fp = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool accepted = scores[i] > tau;
    if (labels[i] > 0) {
      pos += 1;
      tp += accepted;
    } else {
      neg += 1;
      fp += accepted;
    }
  }
  if (pos == 0 || neg == 0) throw DataError("fpr_recall: both classes must be present");
  return {fp / neg, tp / pos};
}

template <typename A, typename B>
FprRecall fpr_recall(const A& scores, const B& labels, double tau) {
  return fpr_recall(
      std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())),
      std::span<const double>(labels.data(), static_cast<std::size_t>(labels.size())), tau);
}

struct CorrelationReport {
  double r = 0;
  double r_squared = 0;
  double p_value = 1;
  std::size_t n_pairs = 0;
};

// Pearson r with a two-sided p-value from t = r sqrt((n-2)/(1-r^2)), n-2 df.
inline CorrelationReport pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DataError("pearson: samples must have equal length");
  const std::size_t n = x.size();
  if (n < 3) throw DataError("pearson: need at least 3 pairs");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) throw DataError("pearson: zero variance in a sample");
  CorrelationReport rep;
  rep.n_pairs = n;
  rep.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  rep.r_squared = rep.r * rep.r;
  const double df = static_cast<double>(n - 2);
  if (rep.r_squared >= 1.0) {
    rep.p_value = 0.0;
  } else {
    const double t = rep.r * std::sqrt(df / (1.0 - rep.r_squared));
    boost::math::students_t dist(df);
    rep.p_value = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))),
                             0.0, 1.0);
  }
  return rep;
}

// Linear-interpolated quantile (the common "type 7" definition), q in [0,1].
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw DataError("quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return v[lo];
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace probegeo
