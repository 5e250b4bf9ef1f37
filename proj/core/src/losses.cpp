#include "mdml/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mdml/errors.hpp"

namespace mdml {

void InnerLossConfig::validate() const {
  if (!(lambda_rec >= 0.0) || !std::isfinite(lambda_rec)) {
    throw ConfigError("lambda_rec must be a non-negative finite number");
  }
}

void OuterLossConfig::validate() const {
  if (!(margin_m > 0.0) || !std::isfinite(margin_m)) throw ConfigError("margin must be > 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be >= 0");
}

std::vector<double> floor_variance(std::span<const double> variance) {
  std::vector<double> out(variance.begin(), variance.end());
  for (double& v : out) {
    if (!std::isfinite(v) || v < 0.0) throw ParameterError("feature variance must be finite and >= 0");
    v = std::max(v, kVarianceFloor);
  }
  return out;
}

double reconstruction_loss(const ValueMatrix& x, const ValueMatrix& x_hat,
                           std::span<const double> feature_variance) {
  if (!x.same_shape(x_hat)) throw DimensionError("reconstruction_loss: shape mismatch");
  if (feature_variance.size() != x.cols()) {
    throw DimensionError("reconstruction_loss: variance length does not match columns");
  }
  if (x.empty()) throw UsageError("reconstruction_loss: empty batch");
  const auto var = floor_variance(feature_variance);
  double total = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double d = x_hat(r, c) - x(r, c);
      total += d * d * (1.0 / var[c]);
    }
  }
  return total / static_cast<double>(x.size());
}

InnerLossTerms inner_loss(Tape& tape, const ValueMatrix& id_batch, ModelState& state,
                          const InnerLossConfig& cfg, std::span<const double> feature_variance) {
  cfg.validate();
  if (id_batch.rows() == 0) throw UsageError("inner_loss: empty batch");
  Var x = tape.constant(id_batch);
  Var z = encode(tape, x, state);
  Var logits = classify(tape, z, state);
  Var t = cfg.learn_temperature ? temperature_node(tape, state, true) : tape.constant(1.0);
  Var p = normal_confidence(tape, logits, t);
  const std::vector<int> ones(id_batch.rows(), 1);
  InnerLossTerms terms;
  terms.bce = tape.mean_bce(p, ones);
  if (cfg.lambda_rec > 0.0) {
    const auto var = floor_variance(feature_variance);
    Var x_hat = decode(tape, z, state);
    terms.reconstruction = tape.weighted_squared_error(x_hat, id_batch, var);
    terms.total = tape.add(terms.bce, tape.scale(terms.reconstruction, cfg.lambda_rec));
  } else {
    terms.reconstruction = tape.constant(0.0);
    terms.total = terms.bce;
  }
  return terms;
}

double margin_gap(std::span<const double> id_confidence, std::span<const double> ood_confidence) {
  if (id_confidence.empty() || ood_confidence.empty()) throw UsageError("margin_gap: empty list");
  double id_sum = 0.0;
  for (double v : id_confidence) id_sum += v;
  double ood_sum = 0.0;
  for (double v : ood_confidence) ood_sum += v;
  return id_sum / static_cast<double>(id_confidence.size()) -
         ood_sum / static_cast<double>(ood_confidence.size());
}

double margin_hinge(double gap, double margin_m) {
  if (!(margin_m > 0.0)) throw ParameterError("margin_hinge: margin must be > 0");
  const double v = margin_m - gap;
  return v > 0.0 ? v : 0.0;
}

namespace {

OuterLossTerms outer_from_logits(Tape& tape, Var logits, std::size_t n_id, std::size_t n_ood,
                                 ModelState& state, const OuterLossConfig& cfg) {
  Var t = temperature_node(tape, state, cfg.learn_temperature);
  Var p = normal_confidence(tape, logits, t);
  Var p_id = tape.slice_rows(p, 0, n_id);
  Var p_ood = tape.slice_rows(p, n_id, n_id + n_ood);
  OuterLossTerms terms;
  terms.id_bce = tape.mean_bce(p_id, std::vector<int>(n_id, 1));
  terms.ood_bce = tape.mean_bce(p_ood, std::vector<int>(n_ood, 0));
  terms.gap = tape.sub(tape.mean(p_id), tape.mean(p_ood));
  // [m - gap]_+
  terms.hinge = tape.relu(tape.add_scalar(tape.scale(terms.gap, -1.0), cfg.margin_m));
  terms.total = tape.add(tape.add(terms.id_bce, terms.ood_bce), tape.scale(terms.hinge, cfg.alpha));
  return terms;
}

void check_outer_inputs(const ValueMatrix& id, const ValueMatrix& ood, const ModelState& state,
                        const OuterLossConfig& cfg) {
  cfg.validate();
  if (id.rows() == 0 || ood.rows() == 0) throw UsageError("outer_loss: empty query");
  if (!state.theta_frozen()) {
    throw InvariantError("outer_loss: theta must be frozen during the outer update");
  }
}

}  // namespace

OuterLossTerms outer_loss(Tape& tape, const ValueMatrix& id_query, const ValueMatrix& ood_query,
                          ModelState& state, const OuterLossConfig& cfg) {
  check_outer_inputs(id_query, ood_query, state, cfg);
  Var x = tape.constant(ValueMatrix::stack(id_query, ood_query));
  Var logits = classify(tape, encode(tape, x, state), state);
  return outer_from_logits(tape, logits, id_query.rows(), ood_query.rows(), state, cfg);
}

OuterLossTerms outer_loss_from_latent(Tape& tape, const ValueMatrix& id_latent,
                                      const ValueMatrix& ood_latent, ModelState& state,
                                      const OuterLossConfig& cfg) {
  check_outer_inputs(id_latent, ood_latent, state, cfg);
  Var z = tape.constant(ValueMatrix::stack(id_latent, ood_latent));
  Var logits = classify(tape, z, state);
  return outer_from_logits(tape, logits, id_latent.rows(), ood_latent.rows(), state, cfg);
}

void meta_gradient(Tape& tape, const OuterLossTerms& loss, ModelState& state) {
  if (!state.theta_frozen()) throw InvariantError("meta_gradient: theta is not frozen");
  tape.backward(loss.total);
  for (Parameter* p : state.theta()) {
    for (double g : p->grad.data()) {
      if (g != 0.0) throw InvariantError("meta_gradient: gradient leaked into " + p->name);
    }
  }
}

}  // namespace mdml
