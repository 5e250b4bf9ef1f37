#include "mdml/synthetic.hpp"

#include <yaml-cpp/yaml.h>

#include <Eigen/Dense>
#include <cmath>
#include <set>
#include <sstream>

#include "mdml/errors.hpp"
#include "mdml/rng.hpp"

namespace mdml {

namespace {

constexpr std::uint64_t kRotationBase = 1'000'000;
constexpr std::uint64_t kDirectionBase = 3'000'000;

Eigen::MatrixXd random_rotation(std::size_t d, std::uint64_t seed, std::uint64_t rotation_seed) {
  Rng rng = Rng(seed).substream(stream::kSynthetic, kRotationBase + rotation_seed);
  Eigen::MatrixXd g(d, d);
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t r = 0; r < d; ++r) g(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  // Sign fix makes the draw Haar-distributed and unique.
  for (Eigen::Index i = 0; i < q.cols(); ++i) {
    if (r(i, i) < 0) q.col(i) *= -1.0;
  }
  return q;
}

Eigen::VectorXd axis_scales(const SyntheticFamily& f, std::size_t d) {
  Eigen::VectorXd s(static_cast<Eigen::Index>(d));
  const std::size_t rank = f.rank == 0 ? d : f.rank;
  for (std::size_t j = 0; j < d; ++j) s(static_cast<Eigen::Index>(j)) = j < rank ? f.scale : f.scale * f.minor_scale;
  return s;
}

Eigen::VectorXd normal_mean(const SyntheticSpec& spec, std::uint64_t seed, std::size_t idx) {
  const auto& f = spec.families[idx];
  const auto d = static_cast<Eigen::Index>(spec.n_features);
  Eigen::VectorXd m(d);
  if (f.mean) {
    for (Eigen::Index j = 0; j < d; ++j) m(j) = (*f.mean)[static_cast<std::size_t>(j)];
    return m;
  }
  Rng rng = Rng(seed).substream(stream::kSynthetic, 2 * idx);
  for (Eigen::Index j = 0; j < d; ++j) m(j) = f.spread * rng.normal();
  return m;
}

Eigen::MatrixXd covariance(const SyntheticFamily& f, std::size_t d, std::uint64_t seed) {
  const Eigen::MatrixXd r = random_rotation(d, seed, f.rotation_seed);
  const Eigen::VectorXd s = axis_scales(f, d);
  return r * s.array().square().matrix().asDiagonal() * r.transpose();
}

std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

double read_double(const YAML::Node& n, const char* key) {
  try {
    return n.as<double>();
  } catch (const YAML::Exception&) {
    throw ConfigError("synthetic spec line " + std::to_string(n.Mark().line + 1) + ": '" + key +
                      "' must be a number");
  }
}

std::size_t read_count(const YAML::Node& n, const char* key) {
  const double v = read_double(n, key);
  if (v < 0 || v != std::floor(v)) {
    throw ConfigError("synthetic spec line " + std::to_string(n.Mark().line + 1) + ": '" + key +
                      "' must be a non-negative integer");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

void SyntheticSpec::validate() const {
  if (n_features == 0) throw ConfigError("synthetic spec: n_features must be positive");
  std::size_t normals = 0;
  std::size_t anomalies = 0;
  std::set<std::string> names;
  for (const auto& f : families) {
    if (f.name.empty()) throw ConfigError("synthetic spec: family without a name");
    if (!names.insert(f.name).second) throw ConfigError("synthetic spec: duplicate family '" + f.name + "'");
    if (f.count == 0) throw ConfigError("synthetic spec: family '" + f.name + "' has zero rows");
    if (!(f.scale > 0.0) || !std::isfinite(f.scale)) {
      throw ConfigError("synthetic spec: family '" + f.name + "' needs a positive covariance scale");
    }
    if (!(f.minor_scale > 0.0) || !std::isfinite(f.minor_scale)) {
      throw ConfigError("synthetic spec: family '" + f.name + "' needs a positive minor_scale");
    }
    if (f.rank > n_features) throw ConfigError("synthetic spec: family '" + f.name + "' rank exceeds n_features");
    if (f.mean && f.mean->size() != n_features) {
      throw ConfigError("synthetic spec: family '" + f.name + "' mean has the wrong length");
    }
    if (f.role == Role::kNormal) {
      ++normals;
    } else {
      ++anomalies;
      if (!(f.overlap >= 0.0)) throw ConfigError("synthetic spec: family '" + f.name + "' overlap must be >= 0");
    }
  }
  if (normals < 1 || anomalies < 2) {
    throw ConfigError("synthetic spec: needs at least one normal and two anomaly families");
  }
}

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::BadFile&) {
    throw ConfigError("cannot open synthetic spec: " + path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("synthetic spec " + path.string() + " line " + std::to_string(e.mark.line + 1) +
                      ": " + e.msg);
  }
  SyntheticSpec spec;
  if (root["n_features"]) spec.n_features = read_count(root["n_features"], "n_features");
  const YAML::Node fams = root["families"];
  if (!fams || !fams.IsSequence()) throw ConfigError("synthetic spec: 'families' list is required");
  for (const auto& node : fams) {
    SyntheticFamily f;
    if (!node["name"]) {
      throw ConfigError("synthetic spec line " + std::to_string(node.Mark().line + 1) + ": family needs a name");
    }
    f.name = node["name"].as<std::string>();
    if (node["role"]) {
      try {
        f.role = parse_role(node["role"].as<std::string>());
      } catch (const DataError& e) {
        throw ConfigError("synthetic spec line " + std::to_string(node["role"].Mark().line + 1) + ": " + e.what());
      }
    }
    if (node["count"]) f.count = read_count(node["count"], "count");
    if (node["scale"]) f.scale = read_double(node["scale"], "scale");
    if (node["rank"]) f.rank = read_count(node["rank"], "rank");
    if (node["minor_scale"]) f.minor_scale = read_double(node["minor_scale"], "minor_scale");
    if (node["rotation_seed"]) f.rotation_seed = read_count(node["rotation_seed"], "rotation_seed");
    if (node["spread"]) f.spread = read_double(node["spread"], "spread");
    if (node["overlap"]) f.overlap = read_double(node["overlap"], "overlap");
    if (node["mean"]) {
      std::vector<double> m;
      for (const auto& v : node["mean"]) m.push_back(read_double(v, "mean"));
      f.mean = std::move(m);
    }
    spec.families.push_back(std::move(f));
  }
  spec.validate();
  return spec;
}

std::string synthetic_spec_to_yaml(const SyntheticSpec& spec) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap << YAML::Key << "n_features" << YAML::Value << spec.n_features;
  out << YAML::Key << "families" << YAML::Value << YAML::BeginSeq;
  for (const auto& f : spec.families) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << f.name;
    out << YAML::Key << "role" << YAML::Value << to_string(f.role);
    out << YAML::Key << "count" << YAML::Value << f.count;
    out << YAML::Key << "scale" << YAML::Value << f.scale;
    out << YAML::Key << "rank" << YAML::Value << f.rank;
    out << YAML::Key << "minor_scale" << YAML::Value << f.minor_scale;
    out << YAML::Key << "rotation_seed" << YAML::Value << f.rotation_seed;
    if (f.role == Role::kNormal) {
      if (f.mean) {
        out << YAML::Key << "mean" << YAML::Value << YAML::Flow << *f.mean;
      } else {
        out << YAML::Key << "spread" << YAML::Value << f.spread;
      }
    } else {
      out << YAML::Key << "overlap" << YAML::Value << f.overlap;
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

AnomalyPlacement anomaly_placement(const SyntheticSpec& spec, std::uint64_t seed, std::size_t family) {
  if (family >= spec.families.size() || spec.families[family].role != Role::kAnomaly) {
    throw ParameterError("anomaly_placement: not an anomaly family");
  }
  const std::size_t d = spec.n_features;
  const auto di = static_cast<Eigen::Index>(d);
  std::vector<Eigen::VectorXd> means;
  std::vector<double> weights;
  double total = 0.0;
  Eigen::VectorXd centroid = Eigen::VectorXd::Zero(di);
  for (std::size_t i = 0; i < spec.families.size(); ++i) {
    if (spec.families[i].role != Role::kNormal) continue;
    means.push_back(normal_mean(spec, seed, i));
    weights.push_back(static_cast<double>(spec.families[i].count));
    total += weights.back();
    centroid += weights.back() * means.back();
  }
  centroid /= total;
  // Mixture covariance of the pooled normal population.
  Eigen::MatrixXd pooled = Eigen::MatrixXd::Zero(di, di);
  std::size_t k = 0;
  for (std::size_t i = 0; i < spec.families.size(); ++i) {
    if (spec.families[i].role != Role::kNormal) continue;
    const Eigen::VectorXd dm = means[k] - centroid;
    pooled += (weights[k] / total) * (covariance(spec.families[i], d, seed) + dm * dm.transpose());
    ++k;
  }
  Rng rng = Rng(seed).substream(stream::kSynthetic, kDirectionBase + family);
  Eigen::VectorXd u(di);
  for (Eigen::Index j = 0; j < di; ++j) u(j) = rng.normal();
  u.normalize();
  const double sigma = std::sqrt(u.dot(pooled * u));
  AnomalyPlacement p;
  p.centroid = to_vector(centroid);
  p.direction = to_vector(u);
  p.normal_std_along_direction = sigma;
  p.mean = to_vector(centroid + spec.families[family].overlap * sigma * u);
  return p;
}

FamilyDataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t d = spec.n_features;
  const auto di = static_cast<Eigen::Index>(d);
  std::size_t n = 0;
  for (const auto& f : spec.families) n += f.count;

  FamilyDataset ds;
  ds.features = ValueMatrix(n, d);
  for (std::size_t j = 0; j < d; ++j) ds.feature_names.push_back("f" + std::to_string(j));
  std::size_t row = 0;
  for (std::size_t i = 0; i < spec.families.size(); ++i) {
    const auto& f = spec.families[i];
    ds.families.push_back(FamilyLabel{f.name, f.role});
    Eigen::VectorXd mean(di);
    if (f.role == Role::kNormal) {
      mean = normal_mean(spec, seed, i);
    } else {
      const auto p = anomaly_placement(spec, seed, i);
      for (Eigen::Index j = 0; j < di; ++j) mean(j) = p.mean[static_cast<std::size_t>(j)];
    }
    const Eigen::MatrixXd rot = random_rotation(d, seed, f.rotation_seed);
    const Eigen::VectorXd s = axis_scales(f, d);
    Rng rng = Rng(seed).substream(stream::kSynthetic, 2 * i + 1);
    Eigen::VectorXd z(di);
    for (std::size_t r = 0; r < f.count; ++r, ++row) {
      for (Eigen::Index j = 0; j < di; ++j) z(j) = s(j) * rng.normal();
      const Eigen::VectorXd x = mean + rot * z;
      for (Eigen::Index j = 0; j < di; ++j) ds.features(row, static_cast<std::size_t>(j)) = x(j);
      ds.family_of_row.push_back(static_cast<std::uint32_t>(i));
    }
  }
  ds.provenance.source = "synthetic:" + std::to_string(seed);
  ds.provenance.rows_in = n;
  ds.validate();
  return ds;
}

SyntheticSpec default_fixture_spec() {
  SyntheticSpec spec;
  spec.n_features = 20;
  auto normal = [](std::string name, std::uint64_t rot) {
    SyntheticFamily f;
    f.name = std::move(name);
    f.role = Role::kNormal;
    f.count = 1000;
    f.scale = 1.0;
    f.rank = 5;
    f.minor_scale = 0.1;
    f.rotation_seed = rot;
    f.spread = 1.0;
    return f;
  };
  auto anomaly = [](std::string name, double overlap, std::uint64_t rot) {
    SyntheticFamily f;
    f.name = std::move(name);
    f.role = Role::kAnomaly;
    f.count = 667;
    f.scale = 0.6;
    f.rank = 0;
    f.minor_scale = 1.0;
    f.rotation_seed = rot;
    f.overlap = overlap;
    return f;
  };
  spec.families = {normal("normal-a", 1), normal("normal-b", 2), anomaly("anomaly-near", 1.0, 11),
                   anomaly("anomaly-mid", 2.0, 12), anomaly("anomaly-far", 4.0, 13)};
  return spec;
}

}  // namespace mdml
