#include "mdml_tools/commands.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "mdml/baselines.hpp"
#include "mdml/checkpoint.hpp"
#include "mdml/errors.hpp"
#include "mdml/experiment_config.hpp"
#include "mdml/gradcheck.hpp"
#include "mdml/metrics.hpp"
#include "mdml/synthetic.hpp"
#include "mdml/tape.hpp"
#include "mdml/trainer.hpp"

namespace mdml::cli {

namespace fs = std::filesystem;

namespace {

std::optional<fs::path> resolve_out(const CommonOptions& common, const std::string& from_config) {
  if (common.out) return *common.out;
  if (const char* env = std::getenv("MDML_OUT"); env && *env) return fs::path(env);
  if (!from_config.empty()) return fs::path(from_config);
  return std::nullopt;
}

fs::path require_out(const CommonOptions& common, const std::string& from_config) {
  auto out = resolve_out(common, from_config);
  if (!out) throw ConfigError("no output directory: pass --out, set MDML_OUT or output_dir in the config");
  return *out;
}

std::size_t resolve_threads(const CommonOptions& common) {
  if (common.threads) return std::max<std::size_t>(*common.threads, 1);
  if (const char* env = std::getenv("MDML_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError("MDML_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return 1;
}

// Creates `dir` and refuses to replace any of `files` unless forced.
void prepare_out_dir(const fs::path& dir, std::initializer_list<const char*> files, bool force) {
  fs::create_directories(dir);
  for (const char* f : files) {
    if (fs::exists(dir / f) && !force) {
      throw UsageError("refusing to overwrite " + (dir / f).string() + " (pass --force)");
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

ExperimentConfig load_config(const fs::path& path, const CommonOptions& common) {
  ExperimentConfig cfg = load_experiment_config(path);
  if (common.seed) cfg.seed = *common.seed;
  cfg.trainer.seed = cfg.seed;
  return cfg;
}

struct Pools {
  std::vector<double> validation;
  std::vector<double> meta_test;
  std::vector<double> heldout_test;
};

Pools score_pools(const TrainingData& data, const std::function<std::vector<double>(const ValueMatrix&)>& scorer) {
  Pools p;
  auto run = [&](const std::vector<std::size_t>& rows) {
    if (rows.empty()) return std::vector<double>{};
    return scorer(data.dataset.features.gather_rows(rows));
  };
  p.validation = run(data.eval.validation);
  p.meta_test = run(data.eval.meta_test);
  p.heldout_test = run(data.eval.heldout_test);
  return p;
}

PoolEvaluation evaluate_scores(const TrainingData& data, const Pools& p) {
  const auto val = scored_samples(data.dataset, data.eval.validation, p.validation);
  const auto meta = scored_samples(data.dataset, data.eval.meta_test, p.meta_test);
  const auto held = scored_samples(data.dataset, data.eval.heldout_test, p.heldout_test);
  return evaluate_pools(val, meta, held);
}

Pools model_scores(const ModelState& state, const TrainingData& data, std::size_t threads) {
  ScoringOptions opts;
  opts.threads = threads;
  return score_pools(data, [&](const ValueMatrix& x) { return anomaly_score(x, state, opts); });
}

struct TrainOutcome {
  TrainingData data;
  TrainingResult result;
  PoolEvaluation evaluation;
};

TrainOutcome train_pipeline(const ExperimentConfig& cfg, std::size_t threads, std::ostream* progress) {
  const FamilyDataset raw = load_experiment_dataset(cfg);
  const SplitPlan plan = make_split_plan(cfg, raw);
  TrainOutcome o{prepare_training_data(raw, plan, cfg.seed), {}, {}};
  TrainingSetup setup = make_training_setup(cfg);
  setup.trainer.threads = threads;
  if (progress) {
    setup.on_episode = [progress](const EpisodeRecord& r) {
      char line[200];
      std::snprintf(line, sizeof(line), "episode %3zu  inner %.4f  outer %.4f  meta_auc %.4f  heldout_auc %.4f  T %.3f%s\n",
                    r.episode, r.inner_losses.empty() ? NAN : r.inner_losses.back(),
                    r.outer_losses.empty() ? NAN : r.outer_losses.back(), r.meta_ood_auc, r.heldout_auc,
                    r.temperature, r.improved ? "  *" : "");
      *progress << line << std::flush;
    };
  }
  o.result = run_meta_training(o.data, setup);
  o.evaluation = evaluate_scores(o.data, model_scores(o.result.best, o.data, threads));
  return o;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void print_summary(std::ostream& out, const PoolEvaluation& ev) {
  char line[200];
  std::snprintf(line, sizeof(line), "tau* %.6f (validation F1 %.4f)\n", ev.threshold.tau_star, ev.threshold.f1_at_tau);
  out << line;
  auto row = [&](const char* name, const MetricsReport& r) {
    std::snprintf(line, sizeof(line), "%-9s P %.4f  R %.4f  F1 %.4f  Acc %.4f  AUC %.4f  AP %.4f  margin %.4f\n", name,
                  r.precision, r.recall, r.f1, r.accuracy, r.auc_roc, r.average_precision, r.margin);
    out << line;
  };
  row("meta-OOD", ev.meta_ood);
  if (ev.has_held_out) row("held-out", ev.held_out);
}

std::map<std::pair<std::string, std::size_t>, double> read_scores_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scores file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("scores file is empty: " + path.string());
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw DataError("scores file lacks column '" + name + "'");
  };
  const std::size_t c_pool = col("pool");
  const std::size_t c_row = col("row");
  const std::size_t c_score = col("score");
  std::map<std::pair<std::string, std::size_t>, double> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) throw DataError("scores file line " + std::to_string(line_no) + ": wrong field count");
    try {
      const double s = std::stod(f[c_score]);
      if (!std::isfinite(s) || s < 0.0 || s > 1.0) throw std::out_of_range("score");
      out[{f[c_pool], static_cast<std::size_t>(std::stoull(f[c_row]))}] = s;
    } catch (const std::exception&) {
      throw DataError("scores file line " + std::to_string(line_no) + ": bad row or score (scores lie in [0, 1])");
    }
  }
  return out;
}

void write_scores_csv(const fs::path& path, const TrainingData& data, const Pools& p) {
  std::ostringstream os;
  os << "pool,row,family,label,score\n";
  auto emit = [&](const char* pool, const std::vector<std::size_t>& rows, const std::vector<double>& scores) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      os << pool << ',' << rows[i] << ',' << data.dataset.family(rows[i]).name << ','
         << (data.dataset.role(rows[i]) == Role::kAnomaly ? 1 : 0) << ',' << fmt(scores[i]) << '\n';
    }
  };
  emit("validation", data.eval.validation, p.validation);
  emit("meta_test", data.eval.meta_test, p.meta_test);
  emit("heldout_test", data.eval.heldout_test, p.heldout_test);
  write_text(path, os.str());
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InvariantError*>(&e)) return exit_code::kInvariant;
  if (dynamic_cast<const DivergenceError*>(&e)) return exit_code::kDivergence;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const DimensionError*>(&e)) return exit_code::kData;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e) ||
      dynamic_cast<const ParameterError*>(&e)) {
    return exit_code::kConfig;
  }
  return 1;
}

int cmd_train(const TrainOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg = load_config(opts.config, common);
  if (opts.paper_faithful_selection) cfg.trainer.paper_faithful_selection = true;
  cfg.trainer.record_timing = opts.record_timing;
  const fs::path dir = require_out(common, cfg.output_dir);
  prepare_out_dir(dir, {kCheckpointFile, kManifestFile, kTrainLogFile, kMetricsFile, kConfigCopyFile}, common.force);
  const std::string digest = cfg.digest();

  TrainOutcome o = train_pipeline(cfg, resolve_threads(common), common.quiet ? nullptr : &err);
  for (const auto& w : o.result.log.warnings) err << "warning: " << w << '\n';

  write_checkpoint(dir / kCheckpointFile, o.result.best, CheckpointInfo{digest});
  {
    std::ostringstream os;
    write_manifest(os, ManifestHeader{digest, cfg.seed}, o.result.episodes);
    write_text(dir / kManifestFile, os.str());
  }
  {
    std::ostringstream os;
    write_train_log_csv(os, o.result.log, opts.record_timing);
    write_text(dir / kTrainLogFile, os.str());
  }
  write_text(dir / kMetricsFile, metrics_json(o.evaluation, ReportContext{digest, cfg.seed}));
  write_text(dir / kConfigCopyFile, "# config_digest " + digest + "\n" + cfg.to_yaml());

  out << "trained " << o.result.log.records.size() << " episodes; best episode " << o.result.log.best_episode
      << (o.result.log.stopped_early ? " (stopped early)" : "") << '\n';
  print_summary(out, o.evaluation);
  out << "artifacts written to " << dir.string() << '\n';
  return exit_code::kOk;
}

int cmd_eval(const EvalOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg = load_config(opts.config, common);
  const auto dir = resolve_out(common, {});
  if (dir) prepare_out_dir(*dir, {kEvalMetricsFile}, common.force);
  if (opts.scores_out && fs::exists(*opts.scores_out) && !common.force) {
    throw UsageError("refusing to overwrite " + opts.scores_out->string() + " (pass --force)");
  }
  const FamilyDataset raw = load_experiment_dataset(cfg);
  const SplitPlan plan = make_split_plan(cfg, raw);
  const TrainingData data = prepare_training_data(raw, plan, cfg.seed);
  const std::size_t threads = resolve_threads(common);

  Pools pools;
  if (opts.scores) {
    const auto table = read_scores_csv(*opts.scores);
    auto lookup = [&](const char* pool, const std::vector<std::size_t>& rows) {
      std::vector<double> s;
      for (std::size_t r : rows) {
        auto it = table.find({pool, r});
        if (it == table.end()) throw DataError(std::string("scores file has no entry for ") + pool + " row " + std::to_string(r));
        s.push_back(it->second);
      }
      return s;
    };
    pools.validation = lookup("validation", data.eval.validation);
    pools.meta_test = lookup("meta_test", data.eval.meta_test);
    pools.heldout_test = lookup("heldout_test", data.eval.heldout_test);
  } else {
    if (opts.checkpoint.empty()) throw UsageError("eval needs --checkpoint or --scores");
    CheckpointInfo info;
    const ModelState state = read_checkpoint(opts.checkpoint, &info);
    if (state.config().input_dim != data.dataset.dims()) {
      throw DimensionError("checkpoint expects " + std::to_string(state.config().input_dim) + " features, dataset has " +
                           std::to_string(data.dataset.dims()));
    }
    if (info.config_digest != cfg.digest()) {
      err << "warning: checkpoint config digest " << info.config_digest << " differs from " << cfg.digest() << '\n';
    }
    if (opts.scorer == "model") {
      pools = model_scores(state, data, threads);
    } else if (opts.scorer == "msp") {
      pools = score_pools(data, [&](const ValueMatrix& x) { return msp_score(x, state); });
    } else if (opts.scorer == "odin") {
      OdinConfig oc = cfg.odin;
      if (opts.t_odin) oc.t_odin = *opts.t_odin;
      if (opts.epsilon) oc.epsilon = *opts.epsilon;
      oc.validate();
      const auto range = feature_range(data.dataset, data.pools.gather(data.pools.train, plan.normal_families));
      pools = score_pools(data, [&](const ValueMatrix& x) { return odin_score(x, state, oc, &range); });
    } else {
      throw UsageError("unknown scorer '" + opts.scorer + "' (model, msp, odin)");
    }
  }
  const PoolEvaluation ev = evaluate_scores(data, pools);
  const std::string json = metrics_json(ev, ReportContext{cfg.digest(), cfg.seed});
  if (opts.scores_out) write_scores_csv(*opts.scores_out, data, pools);
  if (dir) {
    write_text(*dir / kEvalMetricsFile, json);
    print_summary(out, ev);
  } else {
    out << json;
  }
  return exit_code::kOk;
}

int cmd_sweep(const SweepOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream& err) {
  const ExperimentConfig base = load_config(opts.config, common);
  std::vector<std::string> values = opts.values;
  if (values.empty()) {
    if (opts.axis == "shots") values = {"5", "20", "50"};
    else if (opts.axis == "margin") values = {"0.05", "0.5"};
    else if (opts.axis == "alpha") values = {"0", "0.1", "1"};
    else if (opts.axis == "learn_temperature") values = {"false", "true"};
  }
  if (opts.axis != "shots" && opts.axis != "margin" && opts.axis != "alpha" && opts.axis != "learn_temperature") {
    throw UsageError("unknown sweep axis '" + opts.axis + "' (shots, margin, alpha, learn_temperature)");
  }
  if (opts.seeds == 0) throw UsageError("--seeds must be >= 1");
  const fs::path dir = require_out(common, base.output_dir);
  prepare_out_dir(dir, {kSweepFile}, common.force);
  const std::size_t threads = resolve_threads(common);

  std::ostringstream csv;
  csv << "# config_digest=" << base.digest() << " seed=" << base.seed << " axis=" << opts.axis << '\n';
  csv << "axis,value,seeds,heldout_f1,heldout_auc,meta_f1,meta_auc,heldout_margin,meta_margin\n";
  for (const auto& v : values) {
    ExperimentConfig cfg = base;
    try {
      if (opts.axis == "shots") {
        cfg.curriculum.shots = {static_cast<std::size_t>(std::stoul(v))};
      } else if (opts.axis == "margin") {
        cfg.outer.margin_m = std::stod(v);
      } else if (opts.axis == "alpha") {
        cfg.outer.alpha = std::stod(v);
      } else {
        if (v != "true" && v != "false") throw std::invalid_argument(v);
        cfg.outer.learn_temperature = v == "true";
      }
    } catch (const std::logic_error&) {
      throw UsageError("bad value '" + v + "' for sweep axis " + opts.axis);
    }
    cfg.curriculum.expand();
    double sums[6] = {0, 0, 0, 0, 0, 0};
    for (std::size_t r = 0; r < opts.seeds; ++r) {
      cfg.seed = base.seed + r;
      cfg.trainer.seed = cfg.seed;
      if (!common.quiet) err << "sweep " << opts.axis << "=" << v << " seed " << cfg.seed << '\n';
      const TrainOutcome o = train_pipeline(cfg, threads, nullptr);
      const auto& ev = o.evaluation;
      sums[0] += ev.has_held_out ? ev.held_out.f1 : NAN;
      sums[1] += ev.has_held_out ? ev.held_out.auc_roc : NAN;
      sums[2] += ev.meta_ood.f1;
      sums[3] += ev.meta_ood.auc_roc;
      sums[4] += ev.has_held_out ? ev.held_out.margin : NAN;
      sums[5] += ev.meta_ood.margin;
    }
    csv << opts.axis << ',' << v << ',' << opts.seeds;
    for (double s : sums) csv << ',' << fmt(s / static_cast<double>(opts.seeds));
    csv << '\n';
  }
  write_text(dir / kSweepFile, csv.str());
  out << csv.str();
  return exit_code::kOk;
}

int cmd_gradcheck(const GradcheckCmdOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream&) {
  GradcheckOptions g;
  g.seed = common.seed.value_or(0);
  g.tolerance = opts.tolerance;
  const bool previous = testing::gelu_backward_sign_flip();
  testing::set_gelu_backward_sign_flip(opts.inject_gelu_sign_flip);
  GradcheckReport report;
  try {
    report = run_gradcheck(g);
  } catch (...) {
    testing::set_gelu_backward_sign_flip(previous);
    throw;
  }
  testing::set_gelu_backward_sign_flip(previous);
  out << format_gradcheck_report(report);
  return report.passed() ? exit_code::kOk : exit_code::kInvariant;
}

int cmd_synth(const SynthOptions& opts, const CommonOptions& common, std::ostream& out, std::ostream&) {
  const SyntheticSpec spec = opts.spec == "fixture" ? default_fixture_spec() : load_synthetic_spec(opts.spec);
  const std::uint64_t seed = common.seed.value_or(1);
  const fs::path dir = require_out(common, {});
  prepare_out_dir(dir, {kSynthCsvFile, kSynthManifestFile}, common.force);
  const FamilyDataset ds = gen_synthetic(spec, seed);
  write_csv(ds, dir / kSynthCsvFile);

  const std::string spec_yaml = synthetic_spec_to_yaml(spec);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : spec_yaml) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char digest[17];
  std::snprintf(digest, sizeof(digest), "%016llx", static_cast<unsigned long long>(h));
  std::ostringstream m;
  m << "spec_digest: " << digest << "\n";
  m << "seed: " << seed << "\n";
  m << "rows: " << ds.rows() << "\n";
  m << "dataset:\n  csv: " << kSynthCsvFile << "\n  family_column: family\n  roles:\n";
  for (const auto& f : ds.families) m << "    " << f.name << ": " << to_string(f.role) << "\n";
  m << "spec:\n";
  std::istringstream lines(spec_yaml);
  for (std::string line; std::getline(lines, line);) m << "  " << line << "\n";
  write_text(dir / kSynthManifestFile, m.str());
  out << "wrote " << ds.rows() << " rows, " << ds.dims() << " features, " << ds.families.size() << " families to "
      << dir.string() << '\n';
  return exit_code::kOk;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"mdml: meta-learned anomaly detection over family-labelled tabular data"};
  app.require_subcommand(1);
  CommonOptions common;
  std::string out_dir;
  std::size_t threads = 0;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub, bool with_out) {
    if (with_out) sub->add_option("--out", out_dir, "Output directory")->envname("MDML_OUT");
    sub->add_option("--threads", threads, "Scoring threads")->envname("MDML_THREADS")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "Seed (overrides the config)");
    sub->add_flag("--force", common.force, "Overwrite existing artifacts");
    sub->add_flag("--quiet", common.quiet, "No progress output");
  };

  TrainOptions train;
  auto* t = app.add_subcommand("train", "Run meta-training from a config file");
  t->add_option("--config", train.config, "Experiment config (YAML)")->required();
  t->add_flag("--paper-faithful-selection", train.paper_faithful_selection,
              "Also use held-out validation AUC for checkpoint selection (leaks held-out data)");
  t->add_flag("--record-timing", train.record_timing, "Fill the seconds column of the training log");
  add_common(t, true);

  EvalOptions eval;
  std::string scores;
  std::string scores_out;
  double t_odin = 0.0;
  double epsilon = 0.0;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint or a scores file on the configured pools");
  e->add_option("--config", eval.config, "Experiment config (YAML)")->required();
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint written by train");
  e->add_option("--scores", scores, "Scores CSV (pool,row,score) used instead of a model");
  e->add_option("--scores-out", scores_out, "Write per-row scores to this CSV");
  e->add_option("--scorer", eval.scorer, "model, msp or odin")->check(CLI::IsMember({"model", "msp", "odin"}));
  auto* t_opt = e->add_option("--t-odin", t_odin, "ODIN temperature");
  auto* eps_opt = e->add_option("--epsilon", epsilon, "ODIN perturbation size");
  add_common(e, true);

  SweepOptions sweep;
  auto* s = app.add_subcommand("sweep", "Train one model per axis value and tabulate the metrics");
  s->add_option("--config", sweep.config, "Experiment config (YAML)")->required();
  s->add_option("--axis", sweep.axis, "shots, margin, alpha or learn_temperature")->required();
  s->add_option("--values", sweep.values, "Axis values (comma separated)")->delimiter(',');
  s->add_option("--seeds", sweep.seeds, "Seeds per value (base seed + i)");
  add_common(s, true);

  GradcheckCmdOptions grad;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  g->add_option("--tolerance", grad.tolerance, "Maximum relative error");
  g->add_flag("--inject-gelu-sign-flip", grad.inject_gelu_sign_flip)->group("");
  add_common(g, false);

  SynthOptions synth;
  auto* y = app.add_subcommand("synth", "Generate a synthetic multi-family dataset");
  y->add_option("--spec", synth.spec, "Synthetic spec (YAML) or 'fixture'");
  add_common(y, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? exit_code::kOk : exit_code::kConfig;
  }

  auto collect = [&](CLI::App* sub) {
    if (!out_dir.empty()) common.out = out_dir;
    if (sub->count("--threads") || threads > 0) common.threads = threads;
    if (sub->count("--seed")) common.seed = seed;
  };
  try {
    if (*t) {
      collect(t);
      return cmd_train(train, common, out, err);
    }
    if (*e) {
      collect(e);
      if (!scores.empty()) eval.scores = scores;
      if (!scores_out.empty()) eval.scores_out = scores_out;
      if (t_opt->count()) eval.t_odin = t_odin;
      if (eps_opt->count()) eval.epsilon = epsilon;
      return cmd_eval(eval, common, out, err);
    }
    if (*s) {
      collect(s);
      return cmd_sweep(sweep, common, out, err);
    }
    if (*g) {
      collect(g);
      return cmd_gradcheck(grad, common, out, err);
    }
    collect(y);
    return cmd_synth(synth, common, out, err);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code_for(ex);
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace mdml::cli
