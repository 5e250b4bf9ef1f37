#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mdml/dataset.hpp"

namespace mdml {

struct ScoredSample {
  double score = 0.0;  // anomaly score in [0, 1]
  int label = 0;       // 0 normal, 1 anomaly
  std::string family;
};

struct ThresholdResult {
  double tau_star = 0.0;
  double f1_at_tau = 0.0;
  std::size_t sweep_size = 0;
};

struct ConfusionMetrics {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double accuracy = 0.0;
  double f1 = 0.0;
};

// Anomaly is the positive class; a sample is flagged when score >= tau.
ConfusionMetrics confusion_metrics(std::span<const ScoredSample> samples, double tau);

// Exact F1 arg max. Candidates are the smallest score (flag everything),
// midpoints between consecutive distinct scores, and 1 (flag nothing below 1).
// The smallest maximizing candidate wins. Throws ParameterError unless both
// classes are present.
ThresholdResult select_threshold(std::span<const ScoredSample> samples);

// Mann-Whitney statistic with midranks: P(s+ > s-) + P(s+ = s-) / 2.
double auc_roc(std::span<const ScoredSample> samples);

// Step-interpolated average precision; tied scores enter the sweep together.
double average_precision(std::span<const ScoredSample> samples);

// Mean normal-confidence (1 - score) over ID minus the same over OOD.
double confidence_margin(std::span<const ScoredSample> id_samples, std::span<const ScoredSample> ood_samples);
double confidence_margin(std::span<const ScoredSample> samples);  // split by label

struct FamilyMetrics {
  std::size_t count = 0;
  double mean_score = 0.0;
  // Fraction flagged at tau: recall for anomaly families, false-positive
  // rate for normal families.
  double flagged_rate = 0.0;
  double auc_vs_normals = 0.0;  // this family against the pool's normal rows
};

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double accuracy = 0.0;
  double f1 = 0.0;
  double average_precision = 0.0;
  double auc_roc = 0.0;
  double margin = 0.0;
  double threshold = 0.0;
  std::size_t samples = 0;
  std::map<std::string, FamilyMetrics> per_family;
};

MetricsReport make_report(std::span<const ScoredSample> samples, double tau);

struct PoolEvaluation {
  ThresholdResult threshold;  // chosen on the validation pool
  MetricsReport meta_ood;
  MetricsReport held_out;
  bool has_held_out = false;
};

// Picks tau once on `validation` and reports both test pools at that tau.
PoolEvaluation evaluate_pools(std::span<const ScoredSample> validation, std::span<const ScoredSample> meta_test,
                              std::span<const ScoredSample> heldout_test);

// Joins per-row scores with labels and families from the dataset.
std::vector<ScoredSample> scored_samples(const FamilyDataset& ds, std::span<const std::size_t> rows,
                                         std::span<const double> scores);

struct ReportContext {
  std::string config_digest;
  std::uint64_t seed = 0;
};

// One JSON document; keys are emitted in a fixed order so output is stable.
std::string metrics_json(const PoolEvaluation& eval, const ReportContext& ctx);

}  // namespace mdml
