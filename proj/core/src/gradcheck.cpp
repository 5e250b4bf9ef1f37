#include "mdml/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "mdml/losses.hpp"
#include "mdml/model.hpp"
#include "mdml/rng.hpp"
#include "mdml/tape.hpp"

namespace mdml {

bool GradcheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
}

double gradcheck_relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
  return std::abs(analytic - numeric) / denom;
}

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

ValueMatrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo, double hi) {
  ValueMatrix m(r, c);
  for (double& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

// Values away from zero so relu is never evaluated at its kink.
ValueMatrix off_kink(Rng& rng, std::size_t r, std::size_t c) {
  ValueMatrix m(r, c);
  for (double& v : m.data()) {
    const double a = rng.uniform(0.1, 1.5);
    v = rng.uniform(0.0, 1.0) < 0.5 ? -a : a;
  }
  return m;
}

// (input index, flat offset) pairs, sampled without replacement when large.
std::vector<std::pair<std::size_t, std::size_t>> pick_coordinates(const std::vector<std::size_t>& sizes,
                                                                  std::size_t want, Rng& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    for (std::size_t i = 0; i < sizes[k]; ++i) all.emplace_back(k, i);
  }
  if (all.size() <= want) return all;
  bool replaced = false;
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i : rng.sample_indices(all.size(), want, &replaced)) out.push_back(all[i]);
  return out;
}

GradcheckEntry check_primitive(const std::string& name, std::vector<ValueMatrix> inputs,
                               std::vector<bool> differentiable, const Builder& build,
                               const GradcheckOptions& opts, Rng& rng) {
  // Scalarize with a fixed random projection so every output entry matters.
  ValueMatrix projection;
  auto loss_of = [&](const std::vector<ValueMatrix>& in, bool track, std::vector<Var>* leaves, Tape& tape) {
    std::vector<Var> vars;
    for (std::size_t k = 0; k < in.size(); ++k) vars.push_back(tape.input(in[k], track && differentiable[k]));
    Var out = build(tape, vars);
    if (projection.empty()) projection = random_matrix(rng, tape.value(out).cols(), 1, -1.0, 1.0);
    if (leaves) *leaves = vars;
    return tape.sum(tape.matmul(out, tape.constant(projection)));
  };

  Tape tape;
  std::vector<Var> leaves;
  Var loss = loss_of(inputs, true, &leaves, tape);
  tape.backward(loss);

  std::vector<std::size_t> sizes;
  for (std::size_t k = 0; k < inputs.size(); ++k) sizes.push_back(differentiable[k] ? inputs[k].size() : 0);
  GradcheckEntry entry;
  entry.name = name;
  for (const auto& [k, i] : pick_coordinates(sizes, opts.coordinates, rng)) {
    const double analytic = tape.grad(leaves[k]).data()[i];
    auto eval = [&](double delta) {
      auto shifted = inputs;
      shifted[k].data()[i] += delta;
      Tape t;
      return t.scalar(loss_of(shifted, false, nullptr, t));
    };
    const double h = opts.step * std::max(1.0, std::abs(inputs[k].data()[i]));
    const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
    entry.max_rel_error = std::max(entry.max_rel_error, gradcheck_relative_error(analytic, numeric));
    ++entry.coordinates;
  }
  entry.passed = entry.max_rel_error < opts.tolerance && entry.coordinates > 0;
  return entry;
}

// Finite differences over parameter buffers of a model-level loss.
GradcheckEntry check_parameters(const std::string& name, ModelState& state, const std::vector<Parameter*>& params,
                                const std::function<Var(Tape&)>& build, const GradcheckOptions& opts, Rng& rng) {
  state.zero_grad();
  {
    Tape tape;
    tape.backward(build(tape));
  }
  std::vector<std::size_t> sizes;
  for (Parameter* p : params) sizes.push_back(p->value.size());
  GradcheckEntry entry;
  entry.name = name;
  for (const auto& [k, i] : pick_coordinates(sizes, opts.coordinates, rng)) {
    double& slot = params[k]->value.data()[i];
    const double original = slot;
    const double h = opts.step * std::max(1.0, std::abs(original));
    auto eval = [&](double v) {
      slot = v;
      Tape t;
      return t.scalar(build(t));
    };
    const double numeric = (eval(original + h) - eval(original - h)) / (2.0 * h);
    slot = original;
    const double analytic = params[k]->grad.data()[i];
    entry.max_rel_error = std::max(entry.max_rel_error, gradcheck_relative_error(analytic, numeric));
    ++entry.coordinates;
  }
  state.zero_grad();
  entry.passed = entry.max_rel_error < opts.tolerance && entry.coordinates > 0;
  return entry;
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
  GradcheckReport report;
  report.tolerance = opts.tolerance;
  Rng rng = Rng(opts.seed).substream(stream::kGradcheck);
  auto add = [&](GradcheckEntry e) { report.entries.push_back(std::move(e)); };
  auto m = [&](std::size_t r, std::size_t c) { return random_matrix(rng, r, c, -1.0, 1.0); };

  add(check_primitive("matmul", {m(8, 7), m(7, 8)}, {true, true},
                      [](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); }, opts, rng));
  add(check_primitive("add", {m(8, 8), m(8, 8)}, {true, true},
                      [](Tape& t, const std::vector<Var>& v) { return t.add(v[0], v[1]); }, opts, rng));
  add(check_primitive("sub", {m(8, 8), m(8, 8)}, {true, true},
                      [](Tape& t, const std::vector<Var>& v) { return t.sub(v[0], v[1]); }, opts, rng));
  add(check_primitive("add_row", {m(10, 6), m(1, 6)}, {true, true},
                      [](Tape& t, const std::vector<Var>& v) { return t.add_row(v[0], v[1]); }, opts, rng));
  add(check_primitive("linear", {m(8, 6), m(6, 4), m(1, 4)}, {true, true, true},
                      [](Tape& t, const std::vector<Var>& v) { return t.linear(v[0], v[1], v[2]); }, opts, rng));
  add(check_primitive("scale", {m(8, 8)}, {true},
                      [](Tape& t, const std::vector<Var>& v) { return t.scale(v[0], -1.7); }, opts, rng));
  add(check_primitive("add_scalar", {m(8, 8)}, {true},
                      [](Tape& t, const std::vector<Var>& v) { return t.add_scalar(v[0], 0.3); }, opts, rng));
  add(check_primitive("exp", {m(8, 8)}, {true},
                      [](Tape& t, const std::vector<Var>& v) { return t.exp(v[0]); }, opts, rng));
  add(check_primitive("relu", {off_kink(rng, 8, 8)}, {true},
                      [](Tape& t, const std::vector<Var>& v) { return t.relu(v[0]); }, opts, rng));
  add(check_primitive("gelu", {random_matrix(rng, 8, 8, -3.0, 3.0)}, {true},
                      [](Tape& t, const std::vector<Var>& v) { return t.gelu(v[0]); }, opts, rng));
  add(check_primitive("layer_norm", {m(8, 8), random_matrix(rng, 1, 8, 0.5, 1.5), m(1, 8)}, {true, true, true},
                      [](Tape& t, const std::vector<Var>& v) { return t.layer_norm(v[0], v[1], v[2]); }, opts, rng));
  add(check_primitive("softmax_temp", {random_matrix(rng, 30, 2, -2.0, 2.0), ValueMatrix(1, 1, 1.7)}, {true, true},
                      [](Tape& t, const std::vector<Var>& v) { return t.softmax_temp(v[0], v[1]); }, opts, rng));
  add(check_primitive("column", {m(20, 3)}, {true},
                      [](Tape& t, const std::vector<Var>& v) { return t.column(v[0], 1); }, opts, rng));
  add(check_primitive("slice_rows", {m(20, 4)}, {true},
                      [](Tape& t, const std::vector<Var>& v) { return t.slice_rows(v[0], 3, 17); }, opts, rng));
  add(check_primitive("sum", {m(8, 8)}, {true},
                      [](Tape& t, const std::vector<Var>& v) { return t.sum(v[0]); }, opts, rng));
  add(check_primitive("mean", {m(8, 8)}, {true},
                      [](Tape& t, const std::vector<Var>& v) { return t.mean(v[0]); }, opts, rng));
  {
    std::vector<int> targets(60);
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<int>(i % 3 == 0);
    add(check_primitive("mean_bce", {random_matrix(rng, 60, 1, 0.05, 0.95)}, {true},
                        [targets](Tape& t, const std::vector<Var>& v) { return t.mean_bce(v[0], targets); }, opts,
                        rng));
  }
  {
    const ValueMatrix target = m(16, 4);
    const std::vector<double> variance{0.5, 1.0, 2.0, 0.7};
    add(check_primitive("weighted_squared_error", {m(16, 4)}, {true},
                        [target, variance](Tape& t, const std::vector<Var>& v) {
                          return t.weighted_squared_error(v[0], target, variance);
                        },
                        opts, rng));
  }

  // Composed losses on a small random model.
  ModelConfig cfg;
  cfg.input_dim = 6;
  cfg.latent_dim = 16;
  cfg.hidden_dim = 12;
  cfg.n_residual_blocks = 1;
  ModelState state = ModelState::initialize(cfg, opts.seed);
  state.set_temperature(1.3);
  // Non-trivial head normalisation so its gradients are exercised.
  for (double& v : state.head.norm_bias.value.data()) v = rng.uniform(-0.2, 0.2);
  const ValueMatrix id_batch = m(7, cfg.input_dim);
  const ValueMatrix ood_batch = random_matrix(rng, 5, cfg.input_dim, -2.0, 2.0);
  const std::vector<double> variance{0.5, 1.0, 1.5, 0.8, 1.2, 2.0};

  {
    InnerLossConfig inner;
    inner.lambda_rec = 0.5;
    inner.learn_temperature = true;
    auto params = state.all_parameters();
    add(check_parameters("inner_loss", state, params,
                         [&](Tape& t) { return inner_loss(t, id_batch, state, inner, variance).total; }, opts, rng));
  }
  {
    OuterLossConfig outer;
    outer.margin_m = 0.5;
    outer.alpha = 0.7;
    state.set_theta_frozen(true);
    auto params = state.phi();
    params.push_back(&state.log_temperature);
    add(check_parameters("outer_loss", state, params,
                         [&](Tape& t) { return outer_loss(t, id_batch, ood_batch, state, outer).total; }, opts, rng));

    // Freeze contract: the outer sweep leaves every theta gradient at zero.
    GradcheckEntry freeze;
    freeze.name = "outer_freeze_theta";
    state.zero_grad();
    Tape tape;
    const auto terms = outer_loss(tape, id_batch, ood_batch, state, outer);
    tape.backward(terms.total);
    double worst = 0.0;
    for (Parameter* p : state.theta()) {
      for (double g : p->grad.data()) worst = std::max(worst, std::abs(g));
      freeze.coordinates += p->grad.size();
    }
    freeze.max_rel_error = worst;
    freeze.passed = worst == 0.0;
    add(freeze);
    state.set_theta_frozen(false);
    state.zero_grad();
  }
  add(check_primitive("model_input_gradient", {m(9, cfg.input_dim)}, {true},
                      [&](Tape& t, const std::vector<Var>& v) {
                        ModelState& s = state;
                        return classify(t, encode(t, v[0], s), s);
                      },
                      opts, rng));
  return report;
}

std::string format_gradcheck_report(const GradcheckReport& report) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-26s %8s %14s  %s\n", "check", "coords", "max_rel_err", "status");
  out += line;
  for (const auto& e : report.entries) {
    std::snprintf(line, sizeof(line), "%-26s %8zu %14.3e  %s\n", e.name.c_str(), e.coordinates, e.max_rel_error,
                  e.passed ? "ok" : "FAIL");
    out += line;
  }
  std::snprintf(line, sizeof(line), "tolerance %.1e: %s\n", report.tolerance, report.passed() ? "PASS" : "FAIL");
  out += line;
  return out;
}

}  // namespace mdml
