#include "mdml/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "mdml/errors.hpp"

namespace mdml {

namespace {

void require_both_classes(std::span<const ScoredSample> samples, const char* what) {
  bool pos = false;
  bool neg = false;
  for (const auto& s : samples) {
    if (s.label != 0 && s.label != 1) throw ParameterError(std::string(what) + ": labels must be 0 or 1");
    if (!std::isfinite(s.score)) throw ParameterError(std::string(what) + ": non-finite score");
    (s.label == 1 ? pos : neg) = true;
  }
  if (!pos || !neg) throw ParameterError(std::string(what) + ": needs both normal and anomaly samples");
}

// 2TP / (2TP + FP + FN): one rounding, so equal count ratios compare equal.
double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  if (tp == 0) return 0.0;
  return static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
}

}  // namespace

ConfusionMetrics confusion_metrics(std::span<const ScoredSample> samples, double tau) {
  ConfusionMetrics m;
  for (const auto& s : samples) {
    const bool flagged = s.score >= tau;
    if (s.label == 1) {
      (flagged ? m.tp : m.fn)++;
    } else {
      (flagged ? m.fp : m.tn)++;
    }
  }
  const std::size_t n = samples.size();
  m.precision = m.tp + m.fp == 0 ? 0.0 : static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  m.recall = m.tp + m.fn == 0 ? 0.0 : static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  m.accuracy = n == 0 ? 0.0 : static_cast<double>(m.tp + m.tn) / static_cast<double>(n);
  m.f1 = f1_from_counts(m.tp, m.fp, m.fn);
  return m;
}

ThresholdResult select_threshold(std::span<const ScoredSample> samples) {
  require_both_classes(samples, "select_threshold");
  // Scores ascending, with the number of positives at or above each position.
  std::vector<std::pair<double, int>> sorted;
  sorted.reserve(samples.size());
  std::size_t positives = 0;
  for (const auto& s : samples) {
    sorted.emplace_back(s.score, s.label);
    positives += static_cast<std::size_t>(s.label);
  }
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  std::vector<std::size_t> pos_at_or_above(n + 1, 0);
  for (std::size_t i = n; i-- > 0;) pos_at_or_above[i] = pos_at_or_above[i + 1] + static_cast<std::size_t>(sorted[i].second);

  std::vector<double> candidates{sorted.front().first};
  for (std::size_t i = 1; i < n; ++i) {
    if (sorted[i].first != sorted[i - 1].first) candidates.push_back(0.5 * (sorted[i - 1].first + sorted[i].first));
  }
  candidates.push_back(1.0);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  ThresholdResult best;
  best.tau_star = candidates.front();
  best.f1_at_tau = -1.0;
  for (double c : candidates) {
    const auto first = static_cast<std::size_t>(
        std::lower_bound(sorted.begin(), sorted.end(), std::make_pair(c, -1)) - sorted.begin());
    const std::size_t flagged = n - first;
    const std::size_t tp = pos_at_or_above[first];
    const double f1 = f1_from_counts(tp, flagged - tp, positives - tp);
    if (f1 > best.f1_at_tau) {
      best.f1_at_tau = f1;
      best.tau_star = c;
    }
  }
  best.sweep_size = candidates.size();
  return best;
}

double auc_roc(std::span<const ScoredSample> samples) {
  require_both_classes(samples, "auc_roc");
  std::vector<std::pair<double, int>> sorted;
  sorted.reserve(samples.size());
  for (const auto& s : samples) sorted.emplace_back(s.score, s.label);
  std::sort(sorted.begin(), sorted.end());
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    std::size_t group_pos = 0;
    while (j < sorted.size() && sorted[j].first == sorted[i].first) group_pos += static_cast<std::size_t>(sorted[j++].second);
    // Ranks are 1-based; the tie group occupies ranks i+1 .. j.
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    rank_sum += midrank * static_cast<double>(group_pos);
    pos += group_pos;
    i = j;
  }
  const double np = static_cast<double>(pos);
  const double nn = static_cast<double>(sorted.size() - pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double average_precision(std::span<const ScoredSample> samples) {
  require_both_classes(samples, "average_precision");
  std::vector<std::pair<double, int>> sorted;
  sorted.reserve(samples.size());
  std::size_t positives = 0;
  for (const auto& s : samples) {
    sorted.emplace_back(s.score, s.label);
    positives += static_cast<std::size_t>(s.label);
  }
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].first == sorted[i].first) tp += static_cast<std::size_t>(sorted[j++].second);
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double confidence_margin(std::span<const ScoredSample> id_samples, std::span<const ScoredSample> ood_samples) {
  if (id_samples.empty() || ood_samples.empty()) throw ParameterError("confidence_margin: empty pool");
  auto mean_conf = [](std::span<const ScoredSample> s) {
    double acc = 0.0;
    for (const auto& x : s) acc += 1.0 - x.score;
    return acc / static_cast<double>(s.size());
  };
  return mean_conf(id_samples) - mean_conf(ood_samples);
}

double confidence_margin(std::span<const ScoredSample> samples) {
  std::vector<ScoredSample> id;
  std::vector<ScoredSample> ood;
  for (const auto& s : samples) (s.label == 0 ? id : ood).push_back(s);
  return confidence_margin(id, ood);
}

MetricsReport make_report(std::span<const ScoredSample> samples, double tau) {
  MetricsReport r;
  const auto cm = confusion_metrics(samples, tau);
  r.precision = cm.precision;
  r.recall = cm.recall;
  r.accuracy = cm.accuracy;
  r.f1 = cm.f1;
  r.auc_roc = auc_roc(samples);
  r.average_precision = average_precision(samples);
  r.margin = confidence_margin(samples);
  r.threshold = tau;
  r.samples = samples.size();

  std::vector<ScoredSample> normals;
  std::map<std::string, std::vector<ScoredSample>> by_family;
  for (const auto& s : samples) {
    by_family[s.family].push_back(s);
    if (s.label == 0) normals.push_back(s);
  }
  for (const auto& [name, rows] : by_family) {
    FamilyMetrics fm;
    fm.count = rows.size();
    std::size_t flagged = 0;
    for (const auto& s : rows) {
      fm.mean_score += s.score;
      flagged += s.score >= tau ? 1 : 0;
    }
    fm.mean_score /= static_cast<double>(rows.size());
    fm.flagged_rate = static_cast<double>(flagged) / static_cast<double>(rows.size());
    if (rows.front().label == 1) {
      std::vector<ScoredSample> pair = normals;
      pair.insert(pair.end(), rows.begin(), rows.end());
      fm.auc_vs_normals = auc_roc(pair);
    }
    r.per_family[name] = fm;
  }
  return r;
}

PoolEvaluation evaluate_pools(std::span<const ScoredSample> validation, std::span<const ScoredSample> meta_test,
                              std::span<const ScoredSample> heldout_test) {
  PoolEvaluation out;
  out.threshold = select_threshold(validation);
  out.meta_ood = make_report(meta_test, out.threshold.tau_star);
  if (!heldout_test.empty()) {
    out.held_out = make_report(heldout_test, out.threshold.tau_star);
    out.has_held_out = true;
  }
  return out;
}

std::vector<ScoredSample> scored_samples(const FamilyDataset& ds, std::span<const std::size_t> rows,
                                         std::span<const double> scores) {
  if (rows.size() != scores.size()) throw DimensionError("scored_samples: row/score count mismatch");
  std::vector<ScoredSample> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.push_back(ScoredSample{scores[i], ds.role(rows[i]) == Role::kAnomaly ? 1 : 0, ds.family(rows[i]).name});
  }
  return out;
}

namespace {

nlohmann::ordered_json report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["accuracy"] = r.accuracy;
  j["f1"] = r.f1;
  j["average_precision"] = r.average_precision;
  j["auc_roc"] = r.auc_roc;
  j["margin"] = r.margin;
  j["threshold"] = r.threshold;
  j["samples"] = r.samples;
  nlohmann::ordered_json fams = nlohmann::ordered_json::object();
  for (const auto& [name, fm] : r.per_family) {
    nlohmann::ordered_json f;
    f["count"] = fm.count;
    f["mean_score"] = fm.mean_score;
    f["flagged_rate"] = fm.flagged_rate;
    f["auc_vs_normals"] = fm.auc_vs_normals;
    fams[name] = f;
  }
  j["per_family"] = fams;
  return j;
}

}  // namespace

std::string metrics_json(const PoolEvaluation& eval, const ReportContext& ctx) {
  nlohmann::ordered_json j;
  j["config_digest"] = ctx.config_digest;
  j["seed"] = ctx.seed;
  j["threshold"] = {{"tau_star", eval.threshold.tau_star},
                    {"f1_at_tau", eval.threshold.f1_at_tau},
                    {"sweep_size", eval.threshold.sweep_size}};
  j["meta_ood"] = report_json(eval.meta_ood);
  j["held_out"] = eval.has_held_out ? report_json(eval.held_out) : nlohmann::ordered_json(nullptr);
  return j.dump(2) + "\n";
}

}  // namespace mdml
