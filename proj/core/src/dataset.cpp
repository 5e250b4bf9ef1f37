#include "mdml/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "mdml/errors.hpp"
#include "mdml/rng.hpp"

namespace mdml {

std::string to_string(Role role) { return role == Role::kNormal ? "normal" : "anomaly"; }

Role parse_role(const std::string& text) {
  std::string t;
  for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "normal" || t == "benign" || t == "0") return Role::kNormal;
  if (t == "anomaly" || t == "attack" || t == "1") return Role::kAnomaly;
  throw DataError("unknown role '" + text + "' (expected normal or anomaly)");
}

std::size_t FamilyDataset::family_index(const std::string& name) const {
  for (std::size_t i = 0; i < families.size(); ++i) {
    if (families[i].name == name) return i;
  }
  throw DataError("unknown family '" + name + "'");
}

std::vector<std::size_t> FamilyDataset::rows_of_family(const std::string& name) const {
  const auto f = static_cast<std::uint32_t>(family_index(name));
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < family_of_row.size(); ++r) {
    if (family_of_row[r] == f) out.push_back(r);
  }
  return out;
}

void FamilyDataset::validate() const {
  if (family_of_row.size() != features.rows()) throw DataError("dataset: family column length mismatch");
  if (feature_names.size() != features.cols()) throw DataError("dataset: feature name count mismatch");
  std::set<std::string> names;
  for (const auto& f : families) {
    if (!names.insert(f.name).second) throw DataError("dataset: duplicate family '" + f.name + "'");
  }
  for (auto f : family_of_row) {
    if (f >= families.size()) throw DataError("dataset: row refers to undeclared family");
  }
  if (!features.all_finite()) throw DataError("dataset: non-finite feature values");
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

bool parse_double(const std::string& text, double& out) {
  const char* begin = text.data();
  const char* end = text.data() + text.size();
  if (begin != end && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc{} && ptr == end;
}

struct RawTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t malformed = 0;  // rows with the wrong field count
};

RawTable read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV: " + path.string());
  RawTable t;
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV has no header row: " + path.string());
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  for (auto& h : split_csv_line(line)) t.header.push_back(trim(h));
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != t.header.size()) {
      ++t.malformed;
      continue;
    }
    for (auto& f : fields) f = trim(std::move(f));
    t.rows.push_back(std::move(fields));
  }
  return t;
}

std::size_t column_index(const RawTable& t, const std::string& name, const std::filesystem::path& path) {
  auto it = std::find(t.header.begin(), t.header.end(), name);
  if (it == t.header.end()) {
    throw DataError("schema: column '" + name + "' not found in " + path.string());
  }
  return static_cast<std::size_t>(it - t.header.begin());
}

std::vector<std::string> feature_columns_of(const RawTable& t, const CsvSchema& schema) {
  if (!schema.feature_columns.empty()) return schema.feature_columns;
  std::vector<std::string> out;
  for (const auto& h : t.header) {
    if (h == schema.family_column) continue;
    if (schema.label_column && h == *schema.label_column) continue;
    out.push_back(h);
  }
  return out;
}

std::string schema_digest(const std::vector<std::string>& features, const CsvSchema& schema) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xff;
    h *= 0x100000001b3ULL;
  };
  mix(schema.family_column);
  for (const auto& f : features) mix(f);
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

// Appends the rows of one table to `ds`, resolving families by name.
void append_table(FamilyDataset& ds, const RawTable& t, const std::filesystem::path& path,
                  const CsvSchema& schema, const std::vector<std::string>& features,
                  std::vector<double>& values, std::vector<std::optional<Role>>& label_roles) {
  const std::size_t fam_col = column_index(t, schema.family_column, path);
  std::optional<std::size_t> label_col;
  if (schema.label_column) label_col = column_index(t, *schema.label_column, path);
  std::vector<std::size_t> feat_cols;
  for (const auto& f : features) feat_cols.push_back(column_index(t, f, path));

  std::unordered_map<std::string, std::uint32_t> index;
  for (std::size_t i = 0; i < ds.families.size(); ++i) index[ds.families[i].name] = static_cast<std::uint32_t>(i);

  std::vector<double> row(features.size());
  std::size_t dropped = t.malformed;
  for (const auto& fields : t.rows) {
    bool ok = true;
    for (std::size_t j = 0; j < feat_cols.size() && ok; ++j) {
      ok = parse_double(fields[feat_cols[j]], row[j]) && std::isfinite(row[j]);
    }
    if (!ok) {
      ++dropped;
      continue;
    }
    const std::string& fam = fields[fam_col];
    if (fam.empty()) {
      ++dropped;
      continue;
    }
    std::optional<Role> row_role;
    if (label_col) row_role = parse_role(fields[*label_col]);
    auto it = index.find(fam);
    if (it == index.end()) {
      Role role;
      if (row_role) {
        role = *row_role;
      } else {
        auto rm = schema.role_map.find(fam);
        if (rm == schema.role_map.end()) {
          throw DataError("mapping: family '" + fam + "' in " + path.string() + " has no role");
        }
        role = rm->second;
      }
      it = index.emplace(fam, static_cast<std::uint32_t>(ds.families.size())).first;
      ds.families.push_back(FamilyLabel{fam, role});
      label_roles.push_back(row_role);
    } else if (row_role && ds.families[it->second].role != *row_role) {
      throw DataError("mapping: family '" + fam + "' has mixed labels in " + path.string());
    }
    values.insert(values.end(), row.begin(), row.end());
    ds.family_of_row.push_back(it->second);
  }
  const std::size_t rows_in = t.rows.size() + t.malformed;
  ds.provenance.rows_in += rows_in;
  ds.provenance.rows_dropped += dropped;
  if (rows_in > 0 && static_cast<double>(dropped) > schema.max_drop_fraction * static_cast<double>(rows_in)) {
    throw DataError("data quality: dropped " + std::to_string(dropped) + " of " +
                    std::to_string(rows_in) + " rows in " + path.string());
  }
}

FamilyDataset finish(FamilyDataset ds, std::vector<double> values, std::vector<std::string> features) {
  const std::size_t n = ds.family_of_row.size();
  if (n == 0) throw DataError("dataset: no usable rows");
  ds.features = ValueMatrix(n, features.size(), std::move(values));
  ds.feature_names = std::move(features);
  ds.validate();
  return ds;
}

bool column_is_numeric(const RawTable& t, std::size_t col) {
  std::size_t numeric = 0;
  double tmp = 0.0;
  for (const auto& r : t.rows) numeric += parse_double(r[col], tmp) ? 1 : 0;
  return 2 * numeric >= t.rows.size();
}

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

FamilyDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  const RawTable t = read_table(path);
  auto features = feature_columns_of(t, schema);
  if (features.empty()) throw DataError("schema: no feature columns in " + path.string());
  FamilyDataset ds;
  ds.provenance.source = path.string();
  ds.provenance.schema_digest = schema_digest(features, schema);
  std::vector<double> values;
  std::vector<std::optional<Role>> label_roles;
  append_table(ds, t, path, schema, features, values, label_roles);
  return finish(std::move(ds), std::move(values), std::move(features));
}

FamilyDataset load_merged(std::span<const std::filesystem::path> paths, const CsvSchema& schema) {
  if (paths.empty()) throw DataError("merge: no input files");
  std::vector<RawTable> tables;
  for (const auto& p : paths) tables.push_back(read_table(p));

  std::vector<std::string> shared = feature_columns_of(tables[0], schema);
  if (schema.feature_columns.empty()) {
    for (std::size_t i = 1; i < tables.size(); ++i) {
      const auto cols = feature_columns_of(tables[i], schema);
      std::erase_if(shared, [&](const std::string& c) {
        return std::find(cols.begin(), cols.end(), c) == cols.end();
      });
    }
  }
  if (shared.empty()) throw DataError("merge: input files share no feature columns");
  for (const auto& col : shared) {
    std::optional<bool> numeric;
    for (std::size_t i = 0; i < tables.size(); ++i) {
      const bool n = column_is_numeric(tables[i], column_index(tables[i], col, paths[i]));
      if (numeric && *numeric != n) {
        throw DataError("merge: column '" + col + "' has mismatched types across files");
      }
      numeric = n;
    }
    if (!*numeric) throw DataError("merge: shared column '" + col + "' is not numeric");
  }

  FamilyDataset ds;
  std::vector<double> values;
  std::vector<std::optional<Role>> label_roles;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    if (i) ds.provenance.source += ";";
    ds.provenance.source += paths[i].string();
    append_table(ds, tables[i], paths[i], schema, shared, values, label_roles);
  }
  ds.provenance.schema_digest = schema_digest(shared, schema);
  return finish(std::move(ds), std::move(values), std::move(shared));
}

void write_csv(const FamilyDataset& ds, const std::filesystem::path& path,
               const std::string& family_column) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << family_column;
  for (const auto& f : ds.feature_names) out << ',' << f;
  out << '\n';
  char buf[64];
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    out << ds.family(r).name;
    for (double v : ds.features.row(r)) {
      auto res = std::to_chars(buf, buf + sizeof(buf), v);
      out << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    out << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// standardization

Standardizer fit_standardizer(const FamilyDataset& ds, std::span<const std::size_t> id_train_rows) {
  if (id_train_rows.empty()) throw DataError("fit_standardizer: empty fit set");
  for (std::size_t r : id_train_rows) {
    if (r >= ds.rows()) throw DataError("fit_standardizer: row index out of range");
    if (ds.role(r) != Role::kNormal) {
      throw LeakageError("fit_standardizer: anomaly row " + std::to_string(r) + " (family '" +
                         ds.family(r).name + "') in the ID training fit set");
    }
  }
  const std::size_t d = ds.dims();
  Standardizer s;
  s.mean_.assign(d, 0.0);
  s.std_.assign(d, 0.0);
  s.degenerate_.assign(d, false);
  const double n = static_cast<double>(id_train_rows.size());
  for (std::size_t r : id_train_rows) {
    for (std::size_t j = 0; j < d; ++j) s.mean_[j] += ds.features(r, j);
  }
  for (double& m : s.mean_) m /= n;
  std::vector<double> var(d, 0.0);
  for (std::size_t r : id_train_rows) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = ds.features(r, j) - s.mean_[j];
      var[j] += c * c;
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    var[j] /= n;
    s.degenerate_[j] = var[j] < Standardizer::kVarianceFloor;
    s.std_[j] = std::sqrt(std::max(var[j], Standardizer::kVarianceFloor));
  }
  s.fitted_on_ = "id-train";
  s.fit_rows_ = id_train_rows.size();
  return s;
}

ValueMatrix Standardizer::transform(const ValueMatrix& x) const {
  if (x.cols() != mean_.size()) throw DimensionError("Standardizer: column count mismatch");
  ValueMatrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean_[j]) / std_[j];
  }
  return out;
}

ValueMatrix Standardizer::inverse_transform(const ValueMatrix& x) const {
  if (x.cols() != mean_.size()) throw DimensionError("Standardizer: column count mismatch");
  ValueMatrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] * std_[j] + mean_[j];
  }
  return out;
}

FamilyDataset apply_standardizer(const Standardizer& standardizer, const FamilyDataset& ds) {
  FamilyDataset out = ds;
  out.features = standardizer.transform(ds.features);
  return out;
}

std::vector<std::size_t> balance_pool(const FamilyDataset& ds, std::span<const std::size_t> rows,
                                      std::uint64_t seed) {
  std::vector<std::size_t> normal;
  std::vector<std::size_t> anomaly;
  for (std::size_t r : rows) (ds.role(r) == Role::kNormal ? normal : anomaly).push_back(r);
  if (normal.empty() || anomaly.empty()) throw DataError("balance_pool: both roles must be present");
  Rng rng = Rng(seed).substream(stream::kBalance);
  rng.shuffle(normal);
  rng.shuffle(anomaly);
  const std::size_t k = std::min(normal.size(), anomaly.size());
  std::vector<std::size_t> out(normal.begin(), normal.begin() + static_cast<std::ptrdiff_t>(k));
  out.insert(out.end(), anomaly.begin(), anomaly.begin() + static_cast<std::ptrdiff_t>(k));
  rng.shuffle(out);
  return out;
}

}  // namespace mdml
