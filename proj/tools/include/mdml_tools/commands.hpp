#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mdml::cli {

// Options shared by every subcommand. Unset values fall back to the
// environment (MDML_OUT, MDML_THREADS) and then to the config file.
struct CommonOptions {
  std::optional<std::filesystem::path> out;
  std::optional<std::size_t> threads;
  std::optional<std::uint64_t> seed;
  bool force = false;
  bool quiet = false;
};

struct TrainOptions {
  std::filesystem::path config;
  bool paper_faithful_selection = false;
  bool record_timing = false;
};

struct EvalOptions {
  std::filesystem::path config;
  std::filesystem::path checkpoint;
  // Precomputed scores (pool,row,score) used instead of the model.
  std::optional<std::filesystem::path> scores;
  std::optional<std::filesystem::path> scores_out;
  std::string scorer = "model";  // model | msp | odin
  std::optional<double> t_odin;
  std::optional<double> epsilon;
};

struct SweepOptions {
  std::filesystem::path config;
  std::string axis;                 // shots | margin | alpha | learn_temperature
  std::vector<std::string> values;  // empty: the axis defaults
  std::size_t seeds = 1;
};

struct SynthOptions {
  std::string spec = "fixture";  // path to a spec file, or "fixture"
};

struct GradcheckCmdOptions {
  bool inject_gelu_sign_flip = false;
  double tolerance = 1e-4;
};

// Each command returns a process exit status and reports on `out`/`err`.
// Library errors propagate as exceptions; run() maps them to exit codes.
int cmd_train(const TrainOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream& err);
int cmd_sweep(const SweepOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const GradcheckCmdOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream& err);
int cmd_synth(const SynthOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream& err);

// Full command line (argv[0] included). Never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Exit status for a caught exception.
int exit_code_for(const std::exception& e);

// Artifact names inside the output directory.
inline constexpr const char* kCheckpointFile = "checkpoint.txt";
inline constexpr const char* kManifestFile = "episodes.jsonl";
inline constexpr const char* kTrainLogFile = "train_log.csv";
inline constexpr const char* kMetricsFile = "metrics.json";
inline constexpr const char* kConfigCopyFile = "config.yaml";
inline constexpr const char* kEvalMetricsFile = "eval_metrics.json";
inline constexpr const char* kSweepFile = "sweep.csv";
inline constexpr const char* kSynthCsvFile = "dataset.csv";
inline constexpr const char* kSynthManifestFile = "dataset.yaml";

}  // namespace mdml::cli
