#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mdml/dataset.hpp"
#include "mdml/losses.hpp"
#include "mdml/model.hpp"
#include "mdml/optimizer.hpp"
#include "mdml/rng.hpp"
#include "mdml/sampler.hpp"

namespace mdml {

struct TrainerConfig {
  std::size_t inner_steps = 20;
  std::size_t outer_steps = 10;
  double inner_lr = 1e-3;
  double outer_lr = 1e-2;
  std::size_t batch_size = 64;
  OptimizerConfig optimizer;
  // Stop once this many consecutive episodes fail to improve (at least one).
  std::size_t early_stop_patience = 10;
  // Episodes whose inner loop also updates phi.
  std::size_t warmup_episodes = 5;
  std::uint64_t seed = 0;
  // Selection also weighs held-out validation AUC. Leaks the held-out
  // distribution into model choice; for comparison runs only.
  bool paper_faithful_selection = false;
  std::size_t threads = 1;
  bool record_timing = false;
  double divergence_threshold = 1e6;
  // Fresh optimizer moments at the start of every inner and outer stage.
  // Parameter values always carry over.
  bool reset_moments_per_stage = true;

  void validate() const;
};

// Standardized dataset plus everything derived from the split. Built once
// per run; immutable afterwards.
struct TrainingData {
  FamilyDataset dataset;
  Standardizer standardizer;
  SplitPlan plan;
  RowPools pools;
  EvaluationPools eval;
  std::vector<double> feature_variance;  // per-feature weights of the reconstruction term
};

// Splits rows, fits the standardizer on the ID training rows only and
// standardizes every row with it.
TrainingData prepare_training_data(const FamilyDataset& raw, const SplitPlan& plan, std::uint64_t seed);

struct EpisodeRecord {
  std::size_t episode = 0;
  std::vector<std::string> ood_families;
  std::vector<double> inner_losses;  // one per inner step, before the update
  std::vector<double> outer_losses;  // one per outer step, before the update
  double meta_ood_auc = 0.0;
  double heldout_auc = std::numeric_limits<double>::quiet_NaN();
  double margin_meta = 0.0;
  double margin_heldout = std::numeric_limits<double>::quiet_NaN();
  double tau_star = 0.0;
  double temperature = 1.0;
  double seconds = 0.0;
  bool improved = false;
};

struct TrainLog {
  std::string config_digest;
  std::uint64_t seed = 0;
  std::vector<EpisodeRecord> records;
  std::size_t best_episode = 0;
  bool stopped_early = false;
  std::vector<std::string> warnings;

  // Mean across episodes of the outer loss at each outer step.
  std::vector<double> aggregated_objective() const;
};

// A comment line with digest and seed, the fixed header, one row per
// episode. `seconds` stays empty unless timing was recorded.
void write_train_log_csv(std::ostream& out, const TrainLog& log, bool include_timing);

struct TrainingSetup {
  ModelConfig model;  // input_dim 0: taken from the data
  TrainerConfig trainer;
  CurriculumConfig curriculum;
  InnerLossConfig inner;
  OuterLossConfig outer;
  std::string config_digest;
  std::function<void(const EpisodeRecord&)> on_episode;
};

struct TrainingResult {
  ModelState best;
  ModelState last;
  TrainLog log;
  std::vector<EpisodeSpec> episodes;
};

// Inner adaptation on the episode's ID support. Updates theta, and phi too
// when `warmup` is set. Returns the loss before each step.
std::vector<double> inner_adapt(ModelState& state, const TrainingData& data, const EpisodeSpec& episode,
                                const TrainerConfig& cfg, const InnerLossConfig& loss_cfg, bool warmup);

// Outer calibration of phi (and the temperature when learned) on the
// episode's balanced query with theta frozen. Throws InvariantError if any
// theta buffer changes.
std::vector<double> outer_step(ModelState& state, const TrainingData& data, const EpisodeSpec& episode,
                               const TrainerConfig& cfg, const OuterLossConfig& loss_cfg);

// Sequential episode loop with early stopping. With `replay` non-empty the
// given episodes are used verbatim instead of being sampled.
TrainingResult run_meta_training(const TrainingData& data, const TrainingSetup& setup,
                                 std::span<const EpisodeSpec> replay = {});

// Validation-side measurements shared by the trainer and the CLI.
struct PoolScores {
  std::vector<double> validation;
  std::vector<double> heldout_val;
};
PoolScores score_validation_pools(const ModelState& state, const TrainingData& data, std::size_t threads);

}  // namespace mdml
