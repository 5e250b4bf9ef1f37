#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mdml/dataset.hpp"

namespace mdml {

// Partition of the dataset's families. Anomaly families used for outer
// supervision (meta-OOD) and those reserved for evaluation (held-out) never
// overlap.
struct SplitPlan {
  std::vector<std::string> normal_families;
  std::vector<std::string> meta_ood_families;
  std::vector<std::string> held_out_families;
  std::vector<std::string> unused_families;
  double validation_fraction = 0.2;
  double test_fraction = 0.2;

  // Throws DisjointnessError on any overlap, ConfigError on bad fractions.
  void validate() const;
  bool is_held_out(const std::string& family) const;
};

// `meta_ood` empty: every anomaly family not held out (and not unused).
// Families in `unused` take no part in training or evaluation.
SplitPlan plan_splits(std::span<const FamilyLabel> families, const std::set<std::string>& held_out,
                      const std::set<std::string>& meta_ood = {}, const std::set<std::string>& unused = {},
                      double validation_fraction = 0.2, double test_fraction = 0.2);

// Per-family row partitions. Normal and meta-OOD families split into
// train/validation/test; held-out families only into validation (training
// curves) and test. Episodes draw from `train` exclusively.
struct RowPools {
  std::map<std::string, std::vector<std::size_t>> train;
  std::map<std::string, std::vector<std::size_t>> validation;
  std::map<std::string, std::vector<std::size_t>> test;

  std::vector<std::size_t> gather(const std::map<std::string, std::vector<std::size_t>>& pool,
                                  std::span<const std::string> families) const;
};

RowPools reserve_rows(const FamilyDataset& ds, const SplitPlan& plan, std::uint64_t seed);

// Evaluation pools assembled from RowPools, each balanced normal vs anomaly.
struct EvaluationPools {
  std::vector<std::size_t> validation;    // normal val + meta-OOD val: selects tau and checkpoints
  std::vector<std::size_t> meta_test;     // normal test + meta-OOD test
  std::vector<std::size_t> heldout_test;  // normal test + held-out test
  std::vector<std::size_t> heldout_val;   // normal val + held-out val: logged, never consulted
};

EvaluationPools build_evaluation_pools(const FamilyDataset& ds, const SplitPlan& plan, const RowPools& pools,
                                       std::uint64_t seed);

enum class HardOodMode { kOff, kErrorRanked, kDistanceRanked };
std::string to_string(HardOodMode mode);
HardOodMode parse_hard_ood_mode(const std::string& text);

struct CurriculumConfig {
  std::size_t total_episodes = 50;
  std::vector<std::size_t> ood_family_schedule;  // families per episode, non-decreasing
  std::vector<std::size_t> shot_schedule;        // shots per family, non-decreasing
  HardOodMode hard_ood_mode = HardOodMode::kErrorRanked;
  // Off: every episode's ID side is the full normal pool. On: episode e
  // leaves out normal family (e mod n) when there are at least two.
  bool vary_id_families = false;

  void validate(const SplitPlan& plan) const;

  static CurriculumConfig constant(std::size_t episodes, std::size_t families, std::size_t shots,
                                   HardOodMode mode = HardOodMode::kErrorRanked);
};

// Expands `stages` to `episodes` entries: a single value is constant, a list
// of the full length is used as given, and a shorter list is spread over
// equal consecutive blocks.
std::vector<std::size_t> expand_schedule(std::span<const std::size_t> stages, std::size_t episodes);

struct EpisodeSpec {
  std::size_t index = 0;
  std::vector<std::string> id_families;
  std::vector<std::string> ood_families;
  std::size_t shots = 0;
  std::vector<std::size_t> inner_support;
  std::vector<std::size_t> query_id;
  std::vector<std::size_t> query_ood;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;

  std::vector<std::size_t> outer_query() const;  // query_id followed by query_ood
  friend bool operator==(const EpisodeSpec&, const EpisodeSpec&) = default;
};

struct SamplerConfig {
  std::size_t inner_steps = 20;
  std::size_t batch_size = 64;
};

// Draws the rows of episode e for the given meta-OOD families. A pure
// function of its arguments.
EpisodeSpec sample_episode(const SplitPlan& plan, const RowPools& pools, const CurriculumConfig& cur,
                           std::size_t e, std::uint64_t seed, std::span<const std::string> ood_families,
                           const SamplerConfig& sampler = {});

// Hardness rankings, hardest first, ties broken by family name.
// Distance: ascending Euclidean distance between the family's mean and the
// pooled normal mean over the rows given (standardized features).
std::vector<std::string> rank_by_distance(const FamilyDataset& ds, const SplitPlan& plan, const RowPools& pools);
// Error: descending mean normal-confidence of the family's anomaly rows.
std::vector<std::string> rank_by_error(const SplitPlan& plan, const std::map<std::string, double>& mean_confidence);

// Cycles coverage over the meta-OOD families: family i (in name order) is
// first due at episode floor(i / k), and a selected family is due again
// ceil(M / k) episodes later. Due families are taken first, the remaining
// slots go to the hardest families.
class FamilyRotation {
 public:
  explicit FamilyRotation(std::vector<std::string> families);

  std::vector<std::string> select(std::size_t e, std::size_t k, std::span<const std::string> ranking) const;
  void record(std::size_t e, std::span<const std::string> selected, std::size_t k);
  std::size_t period(std::size_t k) const;

 private:
  std::vector<std::string> families_;
  std::map<std::string, std::size_t> due_;
  bool started_ = false;
};

// Throws LeakageError if any episode touches a held-out family or a
// validation/test row.
void check_leakage(const FamilyDataset& ds, const SplitPlan& plan, const RowPools& pools,
                   std::span<const EpisodeSpec> episodes);

// Line-delimited JSON: a header record then one record per episode.
struct ManifestHeader {
  std::string config_digest;
  std::uint64_t seed = 0;
};
void write_manifest(std::ostream& out, const ManifestHeader& header, std::span<const EpisodeSpec> episodes);
std::vector<EpisodeSpec> read_manifest(std::istream& in, ManifestHeader* header = nullptr);
std::vector<EpisodeSpec> read_manifest(const std::filesystem::path& path, ManifestHeader* header = nullptr);

}  // namespace mdml
