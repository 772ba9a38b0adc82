#pragma once

// Threshold calibration with false-positive-rate control. A row is accepted
// (predicted correct) when its probe score is strictly greater than tau.
//
//  plain     tau = 0 on the logit scale.
//  split_cp  tau = the ceil((1-alpha)(n+1))-th smallest negative calibration
//            score, so P(score > tau | y = -1) <= alpha under exchangeability.
//  meta_cp   quantile of quantiles: calibration tasks are cut into subtasks,
//            each gets a split_cp threshold, and tau is the
//            ceil((1-delta)(S+1))-th smallest of the S subtask thresholds.
//            A new task's own threshold then falls below tau with probability
//            >= 1-delta when tasks are exchangeable, bounding its FPR by alpha.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "probegeo/error.hpp"
#include "probegeo/metrics.hpp"
#include "probegeo/rng.hpp"

namespace probegeo {

enum class CalibrationMethod { plain, split_cp, meta_cp };

inline std::string_view to_string(CalibrationMethod m) {
  switch (m) {
    case CalibrationMethod::plain: return "plain";
    case CalibrationMethod::split_cp: return "split_cp";
    case CalibrationMethod::meta_cp: return "meta_cp";
  }
  return "?";
}

inline std::optional<CalibrationMethod> calibration_method_from_string(std::string_view s) {
  for (auto m : {CalibrationMethod::plain, CalibrationMethod::split_cp, CalibrationMethod::meta_cp})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

struct CalibrationResult {
  double tau = 0;
  CalibrationMethod method = CalibrationMethod::plain;
  double alpha = 0;
  std::optional<double> delta;
  std::vector<std::size_t> calibration_sizes;
  std::vector<double> subtask_thresholds;  // meta_cp only
  std::string warning;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

namespace detail {

// ceil with a guard against products such as 0.7 * 10 landing at 7.000000000000001.
inline long long robust_ceil(double x) {
  return static_cast<long long>(std::ceil(x - 1e-9 * std::max(1.0, std::abs(x))));
}

inline void check_level(double v, const char* name, bool allow_one) {
  if (!(v > 0.0 && (allow_one ? v <= 1.0 : v < 1.0)))
    throw ConfigError(std::string(name) + " must lie in (0,1)");
}

}  // namespace detail

inline CalibrationResult plain_threshold(double alpha = 0.3) {
  CalibrationResult r;
  r.method = CalibrationMethod::plain;
  r.alpha = alpha;
  r.tau = 0.0;
  return r;
}

inline CalibrationResult split_cp_threshold(std::vector<double> negative_scores, double alpha) {
  detail::check_level(alpha, "alpha", true);
  if (negative_scores.empty()) throw DataError("split_cp: empty calibration set");
  CalibrationResult r;
  r.method = CalibrationMethod::split_cp;
  r.alpha = alpha;
  const auto n = static_cast<long long>(negative_scores.size());
  r.calibration_sizes = {negative_scores.size()};
  const long long k = detail::robust_ceil((1.0 - alpha) * static_cast<double>(n + 1));
  if (k <= 0) {
    r.tau = -kInf;
  } else if (k > n) {
    r.tau = kInf;
    r.warning = "split_cp: " + std::to_string(n) + " negatives are too few for alpha=" +
                std::to_string(alpha) + "; rejecting everything";
  } else {
    std::nth_element(negative_scores.begin(), negative_scores.begin() + (k - 1), negative_scores.end());
    r.tau = negative_scores[static_cast<std::size_t>(k - 1)];
  }
  return r;
}

// Order statistic over precomputed per-subtask thresholds.
inline CalibrationResult meta_cp_from_subtasks(std::vector<double> subtask_thresholds, double alpha,
                                               double delta) {
  detail::check_level(alpha, "alpha", true);
  detail::check_level(delta, "delta", false);
  CalibrationResult r;
  r.method = CalibrationMethod::meta_cp;
  r.alpha = alpha;
  r.delta = delta;
  r.subtask_thresholds = subtask_thresholds;
  const auto S = static_cast<long long>(subtask_thresholds.size());
  const long long k = detail::robust_ceil((1.0 - delta) * static_cast<double>(S + 1));
  if (k > S) {
    r.tau = kInf;
    r.warning = "meta_cp: " + std::to_string(S) + " subtasks are too few for delta=" +
                std::to_string(delta) + "; rejecting everything";
    return r;
  }
  std::sort(subtask_thresholds.begin(), subtask_thresholds.end());
  r.tau = subtask_thresholds[static_cast<std::size_t>(std::max(1LL, k) - 1)];
  return r;
}

// Each task's negatives are shuffled and cut into subtasks of subtask_size
// rows; the remainder of each task is dropped.
inline CalibrationResult meta_cp_threshold(const std::vector<std::vector<double>>& task_negatives,
                                           double alpha, double delta, std::size_t subtask_size,
                                           std::uint64_t seed = 0) {
  if (subtask_size < 1) throw ConfigError("meta_cp: subtask size must be >= 1");
  std::size_t total = 0;
  for (const auto& t : task_negatives) total += t.size();
  if (total == 0) throw DataError("meta_cp: empty calibration set");
  std::vector<double> thresholds;
  std::vector<std::size_t> sizes;
  for (std::size_t k = 0; k < task_negatives.size(); ++k) {
    auto scores = task_negatives[k];
    auto rng = make_rng(seed, "meta_cp/subtasks", k);
    shuffle_in_place(scores, rng);
    for (std::size_t start = 0; start + subtask_size <= scores.size(); start += subtask_size) {
      std::vector<double> sub(scores.begin() + static_cast<std::ptrdiff_t>(start),
                              scores.begin() + static_cast<std::ptrdiff_t>(start + subtask_size));
      thresholds.push_back(split_cp_threshold(std::move(sub), alpha).tau);
      sizes.push_back(subtask_size);
    }
  }
  auto r = meta_cp_from_subtasks(std::move(thresholds), alpha, delta);
  r.calibration_sizes = std::move(sizes);
  return r;
}

// ---------------------------------------------------------------------------
// Reporting

struct ScoredTask {
  std::vector<double> scores;
  std::vector<double> labels;  // +1 / -1
};

struct CalibrationScenario {
  std::vector<std::vector<double>> cal_negatives;  // per calibration task
  std::vector<ScoredTask> test_tasks;
};

struct CalibrationRow {
  CalibrationMethod method = CalibrationMethod::plain;
  double mean_fpr = 0;
  double q80_fpr = 0;
  double mean_recall = 0;
  std::size_t evaluations = 0;
  std::vector<double> fprs;
  std::vector<double> recalls;
};

struct CalibrationOptions {
  double alpha = 0.3;
  double delta = 0.3;
  std::size_t subtask_size = 1000;
};

inline CalibrationResult calibrate(CalibrationMethod m, const CalibrationScenario& sc,
                                   const CalibrationOptions& opt, std::uint64_t seed) {
  switch (m) {
    case CalibrationMethod::plain: return plain_threshold(opt.alpha);
    case CalibrationMethod::split_cp: {
      std::vector<double> pooled;
      for (const auto& t : sc.cal_negatives) pooled.insert(pooled.end(), t.begin(), t.end());
      return split_cp_threshold(std::move(pooled), opt.alpha);
    }
    case CalibrationMethod::meta_cp:
      return meta_cp_threshold(sc.cal_negatives, opt.alpha, opt.delta, opt.subtask_size, seed);
  }
  throw ConfigError("unknown calibration method");
}

// Mean FPR, 80th-percentile FPR and mean recall over every (repetition, test task).
inline std::vector<CalibrationRow> calibration_report(
    const std::vector<CalibrationScenario>& repetitions,
    const std::vector<CalibrationMethod>& methods, const CalibrationOptions& opt,
    std::uint64_t seed = 0) {
  if (methods.empty()) throw ConfigError("calibration_report needs at least one method");
  std::vector<CalibrationRow> rows;
  for (auto m : methods) {
    CalibrationRow row;
    row.method = m;
    for (std::size_t r = 0; r < repetitions.size(); ++r) {
      const auto cal = calibrate(m, repetitions[r], opt, derive_seed(seed, "calibration", r));
      for (const auto& t : repetitions[r].test_tasks) {
        const auto fr = fpr_recall(t.scores, t.labels, cal.tau);
        row.fprs.push_back(fr.fpr);
        row.recalls.push_back(fr.recall);
      }
    }
    if (row.fprs.empty()) throw DataError("calibration_report: no test tasks");
    row.evaluations = row.fprs.size();
    row.mean_fpr = mean(row.fprs);
    row.q80_fpr = quantile(row.fprs, 0.8);
    row.mean_recall = mean(row.recalls);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace probegeo
