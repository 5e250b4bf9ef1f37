#pragma once

#include <span>

#include "mdml/tape.hpp"

namespace mdml {

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One descent step on each parameter from its accumulated gradient. Moments
// and step counters live on the Parameter, so they carry over across episodes.
void apply_update(std::span<Parameter* const> params, double lr, const OptimizerConfig& cfg);

// Zeroes moments and step counters; values are untouched.
void reset_optimizer_state(std::span<Parameter* const> params);

}  // namespace mdml
