#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mdml/tape.hpp"
#include "mdml/value_matrix.hpp"

namespace mdml {

struct ModelConfig {
  std::size_t input_dim = 0;
  std::size_t latent_dim = 128;
  std::size_t hidden_dim = 256;
  std::size_t n_residual_blocks = 2;
  static constexpr std::size_t kLogits = 2;  // index 0 = normal, 1 = anomaly

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr std::size_t kNormalIndex = 0;
inline constexpr std::size_t kAnomalyIndex = 1;

struct Linear {
  Parameter weight;  // fan_in x fan_out
  Parameter bias;    // 1 x fan_out
};

// LayerNorm -> linear -> GELU -> linear, added back onto the block input.
struct ResidualBlock {
  Parameter norm_gain;
  Parameter norm_bias;
  Linear expand;
  Linear project;
};

struct Encoder {
  Linear input;                       // input_dim -> hidden
  std::vector<ResidualBlock> blocks;  // hidden -> hidden
  Linear bottleneck;                  // hidden -> latent
};

struct Decoder {
  Linear input;                       // latent -> hidden
  std::vector<ResidualBlock> blocks;
  Linear output;                      // hidden -> input_dim
};

// Shallow head: LayerNorm over the latent, then one linear map to two logits.
struct Head {
  Parameter norm_gain;
  Parameter norm_bias;
  Linear logits;
};

enum class ParamGroup { kThetaEncoder, kThetaDecoder, kPhi, kTemperature };

// Encoder/decoder parameters (theta), head parameters (phi) and the log of
// the temperature. Every trainable scalar belongs to exactly one group.
//
// The temperature is stored as exp(log_temperature) so it stays positive
// under unconstrained updates.
class ModelState {
 public:
  ModelState() = default;
  static ModelState initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }

  double temperature() const;
  void set_temperature(double t);

  // While frozen, encoder/decoder leaves are recorded without gradient
  // tracking, so no reverse sweep can write into theta buffers.
  bool theta_frozen() const noexcept { return theta_frozen_; }
  void set_theta_frozen(bool frozen) noexcept { theta_frozen_ = frozen; }

  std::vector<Parameter*> parameters(ParamGroup group);
  std::vector<const Parameter*> parameters(ParamGroup group) const;
  std::vector<Parameter*> theta();
  std::vector<Parameter*> phi() { return parameters(ParamGroup::kPhi); }
  std::vector<Parameter*> all_parameters();
  std::vector<const Parameter*> all_parameters() const;

  Parameter* find(const std::string& name);
  std::size_t parameter_count() const;
  void zero_grad();

  // FNV-1a over the raw bytes of every theta value buffer.
  std::uint64_t theta_digest() const;

  Encoder encoder;
  Decoder decoder;
  Head head;
  Parameter log_temperature;

 private:
  ModelConfig config_;
  std::uint64_t seed_ = 0;
  bool theta_frozen_ = false;
};

// Graph builders. Theta leaves track gradients unless the state is frozen;
// phi leaves always do.
Var encode(Tape& tape, Var x, ModelState& state);
Var decode(Tape& tape, Var z, ModelState& state);
Var classify(Tape& tape, Var z, ModelState& state);
// Temperature node: exp(log T) tracked when learn is set, else a constant.
Var temperature_node(Tape& tape, ModelState& state, bool learn);
// Column 0 of softmax(logits / t), shape n x 1.
Var normal_confidence(Tape& tape, Var logits, Var t);

// Read-only evaluation helpers. Rows are processed in fixed-size chunks so
// results do not depend on the thread count.
struct ScoringOptions {
  std::size_t threads = 1;
  std::size_t chunk_rows = 256;
};

ValueMatrix encode(const ValueMatrix& x, const ModelState& state);
ValueMatrix decode(const ValueMatrix& z, const ModelState& state);
ValueMatrix classify(const ValueMatrix& z, const ModelState& state);
ValueMatrix logits(const ValueMatrix& x, const ModelState& state, const ScoringOptions& opts = {});
std::vector<double> normal_confidence(const ValueMatrix& x, const ModelState& state,
                                      const ScoringOptions& opts = {});
std::vector<double> anomaly_score(const ValueMatrix& x, const ModelState& state,
                                  const ScoringOptions& opts = {});
std::vector<std::size_t> predicted_label(const ValueMatrix& x, const ModelState& state,
                                         const ScoringOptions& opts = {});

// Scores straight from logits (no model): softmax index 0 at temperature t.
double normal_confidence_from_logits(double normal_logit, double anomaly_logit, double t);
std::size_t argmax_label(std::span<const double> logit_row);

std::uint64_t fnv1a(std::span<const double> values, std::uint64_t hash = 0xcbf29ce484222325ULL);

}  // namespace mdml
