#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mdml/dataset.hpp"

namespace mdml {

// One Gaussian family. Its covariance is R diag(s^2) R^T where R is a seeded
// random rotation and s is `scale` on the first `rank` axes and
// `scale * minor_scale` on the rest.
struct SyntheticFamily {
  std::string name;
  Role role = Role::kNormal;
  std::size_t count = 0;
  double scale = 1.0;
  std::size_t rank = 0;  // 0: full rank (isotropic before rotation)
  double minor_scale = 1.0;
  std::uint64_t rotation_seed = 0;
  // Normal families: explicit mean, else drawn as N(0, spread^2) per feature.
  std::optional<std::vector<double>> mean;
  double spread = 2.0;
  // Anomaly families: the mean sits `overlap` pooled-normal standard
  // deviations from the normal centroid along a seeded unit direction.
  double overlap = 0.0;
};

struct SyntheticSpec {
  std::size_t n_features = 20;
  std::vector<SyntheticFamily> families;

  // Throws ConfigError: needs one normal and two anomaly families, positive
  // scales and counts, unique names.
  void validate() const;
};

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path);
std::string synthetic_spec_to_yaml(const SyntheticSpec& spec);

// Deterministic in (spec, seed). Rows are grouped by family in spec order.
FamilyDataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// Pooled normal centroid and the unit direction chosen for anomaly family
// `family` (index into spec.families), exposed for verification.
struct AnomalyPlacement {
  std::vector<double> centroid;
  std::vector<double> direction;
  double normal_std_along_direction = 0.0;
  std::vector<double> mean;
};
AnomalyPlacement anomaly_placement(const SyntheticSpec& spec, std::uint64_t seed, std::size_t family);

// The desk-scale fixture: two normal families and three anomaly families at
// overlap 1, 2 and 4 in 20 dimensions, about 4000 rows.
SyntheticSpec default_fixture_spec();

}  // namespace mdml
