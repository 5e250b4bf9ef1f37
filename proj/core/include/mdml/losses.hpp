#pragma once

#include <span>

#include "mdml/model.hpp"
#include "mdml/tape.hpp"

namespace mdml {

struct InnerLossConfig {
  double lambda_rec = 0.01;
  // Off: the inner confidence is evaluated at T = 1. On: the live
  // temperature is used and receives gradient.
  bool learn_temperature = false;

  void validate() const;
};

struct OuterLossConfig {
  double margin_m = 0.5;
  double alpha = 0.1;
  bool learn_temperature = true;

  void validate() const;

  // (m, alpha) = (0.5, 0.1): the ablation configuration; the default.
  static OuterLossConfig ablation_preset() { return {}; }
  // m = 0.05: the margin stated for the main training strategy.
  static OuterLossConfig training_strategy_preset() {
    OuterLossConfig c;
    c.margin_m = 0.05;
    return c;
  }
};

// Mean over samples and features of (x_hat - x)^2 / var_j.
double reconstruction_loss(const ValueMatrix& x, const ValueMatrix& x_hat,
                           std::span<const double> feature_variance);

// Floors variances at 1e-8; throws on non-finite or negative entries.
std::vector<double> floor_variance(std::span<const double> variance);
inline constexpr double kVarianceFloor = 1e-8;

struct InnerLossTerms {
  Var total;
  Var bce;
  Var reconstruction;
};

// One-class objective on a batch of ID rows: mean BCE(p_norm, 1) plus
// lambda_rec times the variance-normalised reconstruction error.
InnerLossTerms inner_loss(Tape& tape, const ValueMatrix& id_batch, ModelState& state,
                          const InnerLossConfig& cfg, std::span<const double> feature_variance);

double margin_gap(std::span<const double> id_confidence, std::span<const double> ood_confidence);
double margin_hinge(double gap, double margin_m);

struct OuterLossTerms {
  Var total;
  Var id_bce;
  Var ood_bce;
  Var gap;
  Var hinge;
};

// Calibrated objective on a balanced query:
//   mean BCE(p_norm, 1) over ID + mean BCE(p_norm, 0) over OOD + alpha [m - gap]_+
// Requires state.theta_frozen(): theta participates in the forward pass but
// never receives gradient.
OuterLossTerms outer_loss(Tape& tape, const ValueMatrix& id_query, const ValueMatrix& ood_query,
                          ModelState& state, const OuterLossConfig& cfg);

// Same objective over precomputed latents (theta already applied).
OuterLossTerms outer_loss_from_latent(Tape& tape, const ValueMatrix& id_latent,
                                      const ValueMatrix& ood_latent, ModelState& state,
                                      const OuterLossConfig& cfg);

// Reverse sweep of an outer loss into the phi (and log-temperature) buffers.
// Throws InvariantError if any theta gradient buffer is non-zero afterwards.
void meta_gradient(Tape& tape, const OuterLossTerms& loss, ModelState& state);

}  // namespace mdml
