#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdml/value_matrix.hpp"

namespace mdml {

enum class Role { kNormal, kAnomaly };

std::string to_string(Role role);
Role parse_role(const std::string& text);

struct FamilyLabel {
  std::string name;
  Role role = Role::kNormal;

  friend bool operator==(const FamilyLabel&, const FamilyLabel&) = default;
};

struct Provenance {
  std::string source;
  std::string schema_digest;
  std::size_t rows_in = 0;
  std::size_t rows_dropped = 0;
};

// Feature table with one family per row. The role of a row is always the
// role of its family.
struct FamilyDataset {
  ValueMatrix features;
  std::vector<std::string> feature_names;
  std::vector<FamilyLabel> families;
  std::vector<std::uint32_t> family_of_row;
  Provenance provenance;

  std::size_t rows() const noexcept { return features.rows(); }
  std::size_t dims() const noexcept { return features.cols(); }
  const FamilyLabel& family(std::size_t row) const { return families[family_of_row[row]]; }
  Role role(std::size_t row) const { return family(row).role; }
  std::size_t family_index(const std::string& name) const;  // throws DataError if unknown
  std::vector<std::size_t> rows_of_family(const std::string& name) const;

  void validate() const;
};

struct CsvSchema {
  std::string family_column = "family";
  // Empty: every column other than the family/label columns is a feature.
  std::vector<std::string> feature_columns;
  std::map<std::string, Role> role_map;
  // When set, the row's role comes from this column (0/1 or normal/anomaly)
  // instead of the role map; a family with mixed labels is an error.
  std::optional<std::string> label_column;
  double max_drop_fraction = 0.5;
};

// Columns are matched by name. Rows whose features fail to parse or are
// non-finite are dropped and counted in provenance.
FamilyDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);

// Loads several CSVs and keeps the feature columns shared by all of them.
// A column that is numeric in one file and textual in another is an error.
FamilyDataset load_merged(std::span<const std::filesystem::path> paths, const CsvSchema& schema);

// Writes `family` followed by the feature columns; values round-trip exactly.
void write_csv(const FamilyDataset& ds, const std::filesystem::path& path,
               const std::string& family_column = "family");

// Per-feature z-scoring fitted on the ID training rows only.
class Standardizer {
 public:
  static constexpr double kVarianceFloor = 1e-8;

  Standardizer() = default;
  const std::vector<double>& mean() const noexcept { return mean_; }
  const std::vector<double>& stddev() const noexcept { return std_; }
  const std::string& fitted_on() const noexcept { return fitted_on_; }
  std::size_t fit_rows() const noexcept { return fit_rows_; }
  // Features whose raw variance fell under the floor.
  const std::vector<bool>& degenerate() const noexcept { return degenerate_; }

  ValueMatrix transform(const ValueMatrix& x) const;
  ValueMatrix inverse_transform(const ValueMatrix& x) const;

 private:
  friend Standardizer fit_standardizer(const FamilyDataset&, std::span<const std::size_t>);
  std::vector<double> mean_;
  std::vector<double> std_;
  std::vector<bool> degenerate_;
  std::string fitted_on_;
  std::size_t fit_rows_ = 0;
};

// Throws LeakageError if any row is an anomaly row.
Standardizer fit_standardizer(const FamilyDataset& ds, std::span<const std::size_t> id_train_rows);
FamilyDataset apply_standardizer(const Standardizer& standardizer, const FamilyDataset& ds);

// Seeded down-sampling of the majority role to the minority count. The
// result lists the kept rows in shuffled order.
std::vector<std::size_t> balance_pool(const FamilyDataset& ds, std::span<const std::size_t> rows,
                                      std::uint64_t seed);

// Low-level CSV field splitter (handles double-quoted fields).
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace mdml
