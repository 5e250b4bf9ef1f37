#include "mdml/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "mdml/errors.hpp"

namespace mdml {

void OdinConfig::validate() const {
  if (!(t_odin > 0.0) || !std::isfinite(t_odin)) throw ParameterError("odin: t_odin must be > 0");
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ParameterError("odin: epsilon must be >= 0");
}

FeatureRange feature_range(const FamilyDataset& ds, std::span<const std::size_t> rows) {
  if (rows.empty()) throw DataError("feature_range: no rows");
  FeatureRange r;
  r.lo.assign(ds.dims(), INFINITY);
  r.hi.assign(ds.dims(), -INFINITY);
  for (std::size_t row : rows) {
    for (std::size_t j = 0; j < ds.dims(); ++j) {
      r.lo[j] = std::min(r.lo[j], ds.features(row, j));
      r.hi[j] = std::max(r.hi[j], ds.features(row, j));
    }
  }
  return r;
}

namespace {

std::vector<double> max_softmax_score(const ValueMatrix& logit_rows, double t) {
  std::vector<double> out(logit_rows.rows());
  for (std::size_t i = 0; i < logit_rows.rows(); ++i) {
    const double p0 = normal_confidence_from_logits(logit_rows(i, 0), logit_rows(i, 1), t);
    out[i] = 1.0 - std::max(p0, 1.0 - p0);
  }
  return out;
}

}  // namespace

ValueMatrix odin_perturb(const ValueMatrix& x, const ModelState& state, const OdinConfig& cfg,
                         const FeatureRange* range) {
  cfg.validate();
  if (cfg.epsilon == 0.0) return x;
  const ValueMatrix l = logits(x, state);

  // Gradient of sum_i S_0(x_i) w.r.t. x. Rows do not interact, and with two
  // classes S_1 = 1 - S_0, so row i's direction is +/- this gradient.
  ModelState copy = state;
  copy.set_theta_frozen(true);
  Tape tape;
  Var xv = tape.input(x, true);
  Var p0 = normal_confidence(tape, classify(tape, encode(tape, xv, copy), copy), tape.constant(cfg.t_odin));
  tape.backward(tape.sum(p0));
  const ValueMatrix& g = tape.grad(xv);

  ValueMatrix out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double dir = argmax_label(l.row(i)) == kNormalIndex ? 1.0 : -1.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double gij = dir * g(i, j);
      const double step = gij > 0.0 ? cfg.epsilon : (gij < 0.0 ? -cfg.epsilon : 0.0);
      double v = x(i, j) + step;
      if (range) {
        v = std::clamp(v, std::min(range->lo[j], x(i, j)), std::max(range->hi[j], x(i, j)));
      }
      out(i, j) = v;
    }
  }
  return out;
}

std::vector<double> odin_score(const ValueMatrix& x, const ModelState& state, const OdinConfig& cfg,
                               const FeatureRange* range) {
  cfg.validate();
  if (range && (range->lo.size() != x.cols() || range->hi.size() != x.cols())) {
    throw DimensionError("odin_score: feature range has the wrong width");
  }
  const ValueMatrix xt = cfg.epsilon == 0.0 ? x : odin_perturb(x, state, cfg, range);
  return max_softmax_score(logits(xt, state), cfg.t_odin);
}

std::vector<double> msp_score(const ValueMatrix& x, const ModelState& state) {
  return max_softmax_score(logits(x, state), 1.0);
}

}  // namespace mdml
