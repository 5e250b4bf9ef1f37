#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mdml/dataset.hpp"
#include "mdml/model.hpp"

namespace mdml {

struct OdinConfig {
  double t_odin = 1000.0;
  double epsilon = 1e-3;

  void validate() const;  // t_odin > 0, epsilon >= 0
};

// Observed per-feature bounds; perturbed inputs are kept inside
// [min(lo, x), max(hi, x)] so clipping never moves a coordinate away from x.
struct FeatureRange {
  std::vector<double> lo;
  std::vector<double> hi;
};
FeatureRange feature_range(const FamilyDataset& ds, std::span<const std::size_t> rows);

// 1 - max softmax(logits) at T = 1. Ignores the model's learned temperature.
std::vector<double> msp_score(const ValueMatrix& x, const ModelState& state);

// x + epsilon * sign(d log S_yhat / dx) with yhat the arg max at t_odin.
ValueMatrix odin_perturb(const ValueMatrix& x, const ModelState& state, const OdinConfig& cfg,
                         const FeatureRange* range = nullptr);

// 1 - max softmax at t_odin of the perturbed input. With t_odin = 1 and
// epsilon = 0 this is the same computation as msp_score.
std::vector<double> odin_score(const ValueMatrix& x, const ModelState& state, const OdinConfig& cfg,
                               const FeatureRange* range = nullptr);

}  // namespace mdml
