#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "msl/csv.hpp"
#include "msl/rng.hpp"
#include "msl/tensor.hpp"

namespace msl {

/// Split-conformal calibration over an adapted classifier's softmax outputs.
struct CPConfig {
  double alpha = 0.1;            // miscoverage level
  double cal_fraction = 0.5;     // share of the pool used for calibration

  void validate() const {
    if (!(alpha > 0 && alpha < 1)) throw config_error("conformal: alpha must be in (0,1)");
    if (!(cal_fraction > 0 && cal_fraction < 1))
      throw config_error("conformal: cal_fraction must be in (0,1)");
  }
};

/// Nonconformity of each labeled example: 1 minus the softmax probability
/// assigned to the true class; always in [0, 1].
inline std::vector<double> nc_scores(const Tensor<double>& probs, const std::vector<int>& labels) {
  if (probs.ndim() != 2) throw input_error("nc_scores: probs must be (n, Y)");
  const std::size_t n = probs.dim(0), y = probs.dim(1);
  if (labels.size() != n) throw input_error("nc_scores: one label per row required");
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < y; ++j) sum += probs.at2(i, j);
    if (std::abs(sum - 1.0) > 1e-6)
      throw input_error("nc_scores: probability row " + std::to_string(i) + " sums to " +
                        std::to_string(sum));
  }
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= y)
      throw input_error("nc_scores: label " + std::to_string(label) + " out of range");
    scores[i] = 1.0 - probs.at2(i, static_cast<std::size_t>(label));
  }
  return scores;
}

/// Finite-sample threshold: the ceil((n+1)(1-alpha))-th smallest calibration
/// score (1-indexed). When that index exceeds n the threshold is +infinity
/// and every prediction set includes all classes.
inline double conformal_threshold(std::vector<double> scores, double alpha) {
  if (scores.empty()) throw config_error("conformal_threshold: no calibration scores");
  if (!(alpha > 0 && alpha < 1)) throw config_error("conformal_threshold: alpha must be in (0,1)");
  const std::size_t n = scores.size();
  const double raw = std::ceil((static_cast<double>(n) + 1.0) * (1.0 - alpha));
  const auto index = static_cast<std::size_t>(raw);  // 1-indexed order statistic
  if (index > n) return std::numeric_limits<double>::infinity();
  std::nth_element(scores.begin(), scores.begin() + (index - 1), scores.end());
  return scores[index - 1];
}

/// Classes whose nonconformity does not exceed the threshold. May be empty.
struct PredictionSet {
  std::vector<int> classes;
  double threshold = 0;

  bool contains(int label) const {
    return std::find(classes.begin(), classes.end(), label) != classes.end();
  }
  std::size_t size() const { return classes.size(); }
};

inline PredictionSet prediction_set(const Tensor<double>& probs, std::size_t row, double q_hat) {
  if (probs.ndim() != 2 || row >= probs.dim(0))
    throw input_error("prediction_set: bad probability row");
  PredictionSet set;
  set.threshold = q_hat;
  const std::size_t y = probs.dim(1);
  for (std::size_t j = 0; j < y; ++j)
    if (1.0 - probs.at2(row, j) <= q_hat) set.classes.push_back(static_cast<int>(j));
  return set;
}

inline std::vector<PredictionSet> prediction_sets(const Tensor<double>& probs, double q_hat) {
  std::vector<PredictionSet> sets;
  sets.reserve(probs.dim(0));
  for (std::size_t i = 0; i < probs.dim(0); ++i) sets.push_back(prediction_set(probs, i, q_hat));
  return sets;
}

/// Fraction of examples whose true label landed in the prediction set.
inline double coverage(const std::vector<PredictionSet>& sets, const std::vector<int>& labels) {
  if (sets.size() != labels.size()) throw input_error("coverage: one set per example required");
  if (sets.empty()) throw input_error("coverage: no prediction sets");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < sets.size(); ++i)
    if (sets[i].contains(labels[i])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(sets.size());
}

/// Mean prediction-set size.
inline double inefficiency(const std::vector<PredictionSet>& sets) {
  if (sets.empty()) throw input_error("inefficiency: no prediction sets");
  std::size_t total = 0;
  for (const auto& s : sets) total += s.size();
  return static_cast<double>(total) / static_cast<double>(sets.size());
}

/// One calibration/validation evaluation of a labeled probability pool.
struct CpOutcome {
  std::size_t n_cal = 0;
  double q_hat = 0;
  double coverage = 0;
  double inefficiency = 0;
};

/// Splits the pool at cal_fraction (seeded shuffle), calibrates the
/// threshold on one part, and scores coverage/inefficiency on the other.
inline CpOutcome vbcp_evaluate(const Tensor<double>& probs, const std::vector<int>& labels,
                               const CPConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t n = probs.dim(0);
  if (labels.size() != n) throw input_error("vbcp_evaluate: one label per row required");
  if (n < 2) throw input_error("vbcp_evaluate: need at least 2 examples");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  auto n_cal = static_cast<std::size_t>(std::llround(cfg.cal_fraction * static_cast<double>(n)));
  n_cal = std::clamp<std::size_t>(n_cal, 1, n - 1);

  std::vector<double> all_scores = nc_scores(probs, labels);
  std::vector<double> cal_scores(n_cal);
  for (std::size_t i = 0; i < n_cal; ++i) cal_scores[i] = all_scores[order[i]];

  CpOutcome out;
  out.n_cal = n_cal;
  out.q_hat = conformal_threshold(std::move(cal_scores), cfg.alpha);
  const std::size_t n_val = n - n_cal;
  std::vector<PredictionSet> sets;
  sets.reserve(n_val);
  std::vector<int> val_labels;
  val_labels.reserve(n_val);
  for (std::size_t i = n_cal; i < n; ++i) {
    sets.push_back(prediction_set(probs, order[i], out.q_hat));
    val_labels.push_back(labels[order[i]]);
  }
  out.coverage = coverage(sets, val_labels);
  out.inefficiency = inefficiency(sets);
  return out;
}

struct CpReportRow {
  std::size_t task_id = 0;
  std::size_t n_cal = 0;
  double alpha = 0;
  double q_hat = 0;
  double coverage = 0;
  double inefficiency = 0;
};

inline void write_cp_report(const std::string& path, const std::vector<CpReportRow>& rows) {
  CsvWriter csv(path);
  csv.row({"task_id", "n_cal", "alpha", "q_hat", "coverage", "inefficiency"});
  for (const auto& r : rows)
    csv.row({csv_num(r.task_id), csv_num(r.n_cal), csv_num(r.alpha), csv_num(r.q_hat),
             csv_num(r.coverage), csv_num(r.inefficiency)});
}

}  // namespace msl
