#include "mdml/optimizer.hpp"

#include <cmath>

#include "mdml/errors.hpp"

namespace mdml {

void apply_update(std::span<Parameter* const> params, double lr, const OptimizerConfig& cfg) {
  if (!(lr > 0.0)) throw ParameterError("learning rate must be > 0");
  for (Parameter* p : params) {
    auto value = p->value.data();
    auto grad = p->grad.data();
    if (grad.size() != value.size()) throw UsageError("apply_update: missing gradient for " + p->name);
    if (cfg.kind == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < value.size(); ++i) value[i] -= lr * grad[i];
      continue;
    }
    if (!p->moment1.same_shape(p->value)) p->moment1 = ValueMatrix(p->value.rows(), p->value.cols());
    if (!p->moment2.same_shape(p->value)) p->moment2 = ValueMatrix(p->value.rows(), p->value.cols());
    p->steps += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->steps));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->steps));
    auto m = p->moment1.data();
    auto v = p->moment2.data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.epsilon);
    }
  }
}

void reset_optimizer_state(std::span<Parameter* const> params) {
  for (Parameter* p : params) {
    p->moment1 = ValueMatrix(p->value.rows(), p->value.cols());
    p->moment2 = ValueMatrix(p->value.rows(), p->value.cols());
    p->steps = 0;
  }
}

}  // namespace mdml
