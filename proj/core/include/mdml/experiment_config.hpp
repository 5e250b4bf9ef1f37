#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mdml/baselines.hpp"
#include "mdml/dataset.hpp"
#include "mdml/losses.hpp"
#include "mdml/model.hpp"
#include "mdml/sampler.hpp"
#include "mdml/trainer.hpp"

namespace mdml {

// Where rows come from: a synthetic spec ("fixture" names the built-in one)
// or one or more CSV files merged on their shared columns.
struct DatasetManifest {
  std::string synthetic;  // empty when CSV input is used
  std::uint64_t synthetic_seed = 1;
  std::vector<std::string> csv;
  CsvSchema schema;
};

struct SplitConfig {
  std::vector<std::string> held_out;
  std::vector<std::string> meta_ood;  // empty: every remaining anomaly family
  std::vector<std::string> unused;
  double validation_fraction = 0.2;
  double test_fraction = 0.2;
};

// Schedules as written; expanded to one entry per episode on use.
struct CurriculumStages {
  std::size_t episodes = 50;
  std::vector<std::size_t> ood_families{1, 2};
  std::vector<std::size_t> shots{5, 20, 50};
  HardOodMode hard_ood = HardOodMode::kErrorRanked;
  bool vary_id_families = false;

  CurriculumConfig expand() const;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir;
  DatasetManifest dataset;
  SplitConfig split;
  CurriculumStages curriculum;
  ModelConfig model;
  TrainerConfig trainer;
  InnerLossConfig inner;
  OuterLossConfig outer;
  OdinConfig odin;
  // Directory relative paths are resolved against; not serialized.
  std::filesystem::path base_dir;
  // First line mentioning each family in the split section, for messages.
  std::map<std::string, int> family_lines;

  // Canonical YAML: every field, fixed key order.
  std::string to_yaml() const;
  // FNV-1a of the canonical YAML without output_dir, 16 hex digits.
  std::string digest() const;
};

// Throws ConfigError (or DisjointnessError) with the offending line number.
ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

FamilyDataset load_experiment_dataset(const ExperimentConfig& cfg);
// Checks that every family named in the split exists in the dataset.
SplitPlan make_split_plan(const ExperimentConfig& cfg, const FamilyDataset& ds);
TrainingSetup make_training_setup(const ExperimentConfig& cfg);

}  // namespace mdml
