#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mdml/experiment_config.hpp"
#include "mdml/synthetic.hpp"
#include "mdml/trainer.hpp"

namespace mdml::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("mdml-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline ValueMatrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, scale);
  ValueMatrix m(rows, cols);
  for (double& v : m.data()) v = dist(gen);
  return m;
}

// Central difference of a scalar function of one buffer entry.
inline double central_difference(double& slot, const std::function<double()>& f, double h = 1e-5) {
  const double saved = slot;
  slot = saved + h;
  const double up = f();
  slot = saved - h;
  const double down = f();
  slot = saved;
  return (up - down) / (2.0 * h);
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-7});
}

// The default fixture scaled down for fast unit tests: same geometry,
// a quarter of the rows.
inline SyntheticSpec small_fixture_spec() {
  SyntheticSpec spec = default_fixture_spec();
  for (auto& f : spec.families) f.count = std::max<std::size_t>(f.count / 4, 40);
  return spec;
}

inline ModelConfig small_model(std::size_t input_dim) {
  ModelConfig c;
  c.input_dim = input_dim;
  c.latent_dim = 16;
  c.hidden_dim = 32;
  c.n_residual_blocks = 1;
  return c;
}

inline TrainingData small_training_data(std::uint64_t seed) {
  const FamilyDataset raw = gen_synthetic(small_fixture_spec(), seed);
  const SplitPlan plan = plan_splits(raw.families, {"anomaly-mid"});
  return prepare_training_data(raw, plan, seed);
}

// Path of a file shipped in the source tree's configs/ directory.
inline std::filesystem::path config_path(const std::string& name) {
  return std::filesystem::path(MDML_SOURCE_DIR) / "configs" / name;
}

}  // namespace mdml::test
