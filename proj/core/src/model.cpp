#include "mdml/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <thread>

#include "mdml/errors.hpp"
#include "mdml/rng.hpp"

namespace mdml {

void ModelConfig::validate() const {
  if (input_dim < 1) throw ConfigError("model: input_dim must be >= 1");
  if (latent_dim < 2) throw ConfigError("model: latent_dim must be >= 2 (head layer norm)");
  if (hidden_dim < 2) throw ConfigError("model: hidden_dim must be >= 2 (block layer norm)");
  if (n_residual_blocks < 1) throw ConfigError("model: n_residual_blocks must be >= 1");
}

namespace {

Linear make_linear(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  ValueMatrix w(fan_in, fan_out);
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  return Linear{Parameter(name + ".weight", std::move(w)),
                Parameter(name + ".bias", ValueMatrix(1, fan_out))};
}

ResidualBlock make_block(const std::string& name, std::size_t width, Rng& rng) {
  ResidualBlock b;
  b.norm_gain = Parameter(name + ".norm_gain", ValueMatrix(1, width, 1.0));
  b.norm_bias = Parameter(name + ".norm_bias", ValueMatrix(1, width));
  b.expand = make_linear(name + ".expand", width, width, rng);
  b.project = make_linear(name + ".project", width, width, rng);
  return b;
}

void push_linear(std::vector<Parameter*>& out, Linear& l) {
  out.push_back(&l.weight);
  out.push_back(&l.bias);
}

void push_block(std::vector<Parameter*>& out, ResidualBlock& b) {
  out.push_back(&b.norm_gain);
  out.push_back(&b.norm_bias);
  push_linear(out, b.expand);
  push_linear(out, b.project);
}

Var linear(Tape& tape, Var x, Linear& l, bool track) {
  return tape.linear(x, tape.parameter(l.weight, track), tape.parameter(l.bias, track));
}

Var residual(Tape& tape, Var x, ResidualBlock& b, bool track) {
  Var h = tape.layer_norm(x, tape.parameter(b.norm_gain, track), tape.parameter(b.norm_bias, track));
  h = linear(tape, h, b.expand, track);
  h = tape.gelu(h);
  h = linear(tape, h, b.project, track);
  return tape.add(x, h);
}

void check_cols(const ValueMatrix& m, std::size_t expected, const char* what) {
  if (m.cols() != expected) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(expected) +
                         " columns, got " + std::to_string(m.cols()));
  }
}

}  // namespace

ModelState ModelState::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelState s;
  s.config_ = config;
  s.seed_ = seed;
  Rng rng = Rng(seed).substream(stream::kInit);
  const std::size_t h = config.hidden_dim;
  s.encoder.input = make_linear("enc.input", config.input_dim, h, rng);
  for (std::size_t i = 0; i < config.n_residual_blocks; ++i) {
    s.encoder.blocks.push_back(make_block("enc.block" + std::to_string(i), h, rng));
  }
  s.encoder.bottleneck = make_linear("enc.bottleneck", h, config.latent_dim, rng);
  s.decoder.input = make_linear("dec.input", config.latent_dim, h, rng);
  for (std::size_t i = 0; i < config.n_residual_blocks; ++i) {
    s.decoder.blocks.push_back(make_block("dec.block" + std::to_string(i), h, rng));
  }
  s.decoder.output = make_linear("dec.output", h, config.input_dim, rng);
  s.head.norm_gain = Parameter("head.norm_gain", ValueMatrix(1, config.latent_dim, 1.0));
  s.head.norm_bias = Parameter("head.norm_bias", ValueMatrix(1, config.latent_dim));
  s.head.logits = make_linear("head.logits", config.latent_dim, ModelConfig::kLogits, rng);
  s.log_temperature = Parameter("log_temperature", ValueMatrix(1, 1, 0.0));
  return s;
}

double ModelState::temperature() const { return std::exp(log_temperature.value(0, 0)); }

void ModelState::set_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw ParameterError("temperature must be positive and finite");
  log_temperature.value(0, 0) = std::log(t);
}

std::vector<Parameter*> ModelState::parameters(ParamGroup group) {
  std::vector<Parameter*> out;
  switch (group) {
    case ParamGroup::kThetaEncoder:
      push_linear(out, encoder.input);
      for (auto& b : encoder.blocks) push_block(out, b);
      push_linear(out, encoder.bottleneck);
      break;
    case ParamGroup::kThetaDecoder:
      push_linear(out, decoder.input);
      for (auto& b : decoder.blocks) push_block(out, b);
      push_linear(out, decoder.output);
      break;
    case ParamGroup::kPhi:
      out.push_back(&head.norm_gain);
      out.push_back(&head.norm_bias);
      push_linear(out, head.logits);
      break;
    case ParamGroup::kTemperature:
      out.push_back(&log_temperature);
      break;
  }
  return out;
}

std::vector<const Parameter*> ModelState::parameters(ParamGroup group) const {
  auto mut = const_cast<ModelState*>(this)->parameters(group);
  return {mut.begin(), mut.end()};
}

std::vector<Parameter*> ModelState::theta() {
  auto out = parameters(ParamGroup::kThetaEncoder);
  auto dec = parameters(ParamGroup::kThetaDecoder);
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

std::vector<Parameter*> ModelState::all_parameters() {
  std::vector<Parameter*> out;
  for (auto g : {ParamGroup::kThetaEncoder, ParamGroup::kThetaDecoder, ParamGroup::kPhi,
                 ParamGroup::kTemperature}) {
    auto part = parameters(g);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<const Parameter*> ModelState::all_parameters() const {
  auto mut = const_cast<ModelState*>(this)->all_parameters();
  return {mut.begin(), mut.end()};
}

Parameter* ModelState::find(const std::string& name) {
  for (Parameter* p : all_parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : all_parameters()) n += p->value.size();
  return n;
}

void ModelState::zero_grad() {
  for (Parameter* p : all_parameters()) p->zero_grad();
}

std::uint64_t fnv1a(std::span<const double> values, std::uint64_t hash) {
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      hash ^= b;
      hash *= 0x100000001b3ULL;
    }
  }
  return hash;
}

std::uint64_t ModelState::theta_digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto g : {ParamGroup::kThetaEncoder, ParamGroup::kThetaDecoder}) {
    for (const Parameter* p : parameters(g)) h = fnv1a(p->value.data(), h);
  }
  return h;
}

// ---------------------------------------------------------------------------

Var encode(Tape& tape, Var x, ModelState& state) {
  check_cols(tape.value(x), state.config().input_dim, "encode");
  const bool track = !state.theta_frozen();
  Var h = linear(tape, x, state.encoder.input, track);
  for (auto& b : state.encoder.blocks) h = residual(tape, h, b, track);
  return linear(tape, h, state.encoder.bottleneck, track);
}

Var decode(Tape& tape, Var z, ModelState& state) {
  check_cols(tape.value(z), state.config().latent_dim, "decode");
  const bool track = !state.theta_frozen();
  Var h = linear(tape, z, state.decoder.input, track);
  for (auto& b : state.decoder.blocks) h = residual(tape, h, b, track);
  return linear(tape, h, state.decoder.output, track);
}

Var classify(Tape& tape, Var z, ModelState& state) {
  check_cols(tape.value(z), state.config().latent_dim, "classify");
  Var h = tape.layer_norm(z, tape.parameter(state.head.norm_gain),
                          tape.parameter(state.head.norm_bias));
  return linear(tape, h, state.head.logits, true);
}

Var temperature_node(Tape& tape, ModelState& state, bool learn) {
  if (learn) return tape.exp(tape.parameter(state.log_temperature));
  return tape.constant(state.temperature());
}

Var normal_confidence(Tape& tape, Var logits, Var t) {
  return tape.column(tape.softmax_temp(logits, t), kNormalIndex);
}

// ---------------------------------------------------------------------------
// read-only helpers

namespace {

// Runs `fn(begin, end)` over fixed-size row chunks, optionally on worker
// threads. Each chunk writes a disjoint output slice, so the result is
// independent of scheduling.
template <typename Fn>
void for_each_chunk(std::size_t rows, const ScoringOptions& opts, Fn&& fn) {
  const std::size_t chunk = std::max<std::size_t>(1, opts.chunk_rows);
  const std::size_t n_chunks = (rows + chunk - 1) / chunk;
  const std::size_t workers = std::min<std::size_t>(std::max<std::size_t>(1, opts.threads), n_chunks);
  auto run = [&](std::size_t worker) {
    for (std::size_t c = worker; c < n_chunks; c += workers) {
      fn(c * chunk, std::min(rows, (c + 1) * chunk));
    }
  };
  if (workers <= 1) {
    run(0);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
  for (auto& t : pool) t.join();
}

ValueMatrix rows_of(const ValueMatrix& x, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return x.gather_rows(idx);
}

Var const_linear(Tape& tape, Var x, const Linear& l) {
  return tape.linear(x, tape.parameter(l.weight), tape.parameter(l.bias));
}

Var const_residual(Tape& tape, Var x, const ResidualBlock& b) {
  Var h = tape.layer_norm(x, tape.parameter(b.norm_gain), tape.parameter(b.norm_bias));
  h = const_linear(tape, h, b.expand);
  h = tape.gelu(h);
  h = const_linear(tape, h, b.project);
  return tape.add(x, h);
}

Var const_encode(Tape& tape, Var x, const ModelState& s) {
  check_cols(tape.value(x), s.config().input_dim, "encode");
  Var h = const_linear(tape, x, s.encoder.input);
  for (const auto& b : s.encoder.blocks) h = const_residual(tape, h, b);
  return const_linear(tape, h, s.encoder.bottleneck);
}

Var const_classify(Tape& tape, Var z, const ModelState& s) {
  check_cols(tape.value(z), s.config().latent_dim, "classify");
  Var h = tape.layer_norm(z, tape.parameter(s.head.norm_gain), tape.parameter(s.head.norm_bias));
  return const_linear(tape, h, s.head.logits);
}

}  // namespace

ValueMatrix encode(const ValueMatrix& x, const ModelState& state) {
  Tape tape;
  return tape.value(const_encode(tape, tape.constant(x), state));
}

ValueMatrix decode(const ValueMatrix& z, const ModelState& state) {
  check_cols(z, state.config().latent_dim, "decode");
  Tape tape;
  Var h = const_linear(tape, tape.constant(z), state.decoder.input);
  for (const auto& b : state.decoder.blocks) h = const_residual(tape, h, b);
  return tape.value(const_linear(tape, h, state.decoder.output));
}

ValueMatrix classify(const ValueMatrix& z, const ModelState& state) {
  Tape tape;
  return tape.value(const_classify(tape, tape.constant(z), state));
}

ValueMatrix logits(const ValueMatrix& x, const ModelState& state, const ScoringOptions& opts) {
  check_cols(x, state.config().input_dim, "logits");
  ValueMatrix out(x.rows(), ModelConfig::kLogits);
  for_each_chunk(x.rows(), opts, [&](std::size_t begin, std::size_t end) {
    Tape tape;
    Var l = const_classify(tape, const_encode(tape, tape.constant(rows_of(x, begin, end)), state), state);
    const ValueMatrix& lv = tape.value(l);
    std::copy(lv.data().begin(), lv.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(begin * ModelConfig::kLogits));
  });
  return out;
}

double normal_confidence_from_logits(double normal_logit, double anomaly_logit, double t) {
  if (!(t > 0.0)) throw ParameterError("temperature must be > 0");
  // Same arithmetic as Tape::softmax_temp for a two-column row.
  const double mx = std::max(normal_logit, anomaly_logit);
  const double e0 = std::exp((normal_logit - mx) / t);
  const double e1 = std::exp((anomaly_logit - mx) / t);
  const double total = e0 + e1;
  return e0 / total;
}

std::size_t argmax_label(std::span<const double> logit_row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logit_row.size(); ++i) {
    if (logit_row[i] > logit_row[best]) best = i;
  }
  return best;
}

std::vector<double> normal_confidence(const ValueMatrix& x, const ModelState& state,
                                      const ScoringOptions& opts) {
  const ValueMatrix l = logits(x, state, opts);
  const double t = state.temperature();
  std::vector<double> out(l.rows());
  for (std::size_t r = 0; r < l.rows(); ++r) out[r] = normal_confidence_from_logits(l(r, 0), l(r, 1), t);
  return out;
}

std::vector<double> anomaly_score(const ValueMatrix& x, const ModelState& state,
                                  const ScoringOptions& opts) {
  std::vector<double> s = normal_confidence(x, state, opts);
  for (double& v : s) v = 1.0 - v;
  return s;
}

std::vector<std::size_t> predicted_label(const ValueMatrix& x, const ModelState& state,
                                         const ScoringOptions& opts) {
  const ValueMatrix l = logits(x, state, opts);
  std::vector<std::size_t> out(l.rows());
  for (std::size_t r = 0; r < l.rows(); ++r) out[r] = argmax_label(l.row(r));
  return out;
}

}  // namespace mdml
