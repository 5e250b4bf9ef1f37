#include "mdml/experiment_config.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mdml/errors.hpp"
#include "mdml/synthetic.hpp"

namespace mdml {

namespace {

int line_of(const YAML::Node& n) { return n.Mark().line + 1; }

[[noreturn]] void fail(const YAML::Node& n, const std::string& msg) {
  throw ConfigError("config line " + std::to_string(line_of(n)) + ": " + msg);
}

void require_map(const YAML::Node& n, const std::string& where) {
  if (!n.IsMap()) fail(n, "'" + where + "' must be a mapping");
}

void check_keys(const YAML::Node& n, const std::string& where, std::initializer_list<const char*> allowed) {
  require_map(n, where);
  for (const auto& kv : n) {
    const auto key = kv.first.as<std::string>();
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) fail(kv.first, "unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get(const YAML::Node& n, const std::string& what) {
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    fail(n, "'" + what + "' has the wrong type");
  }
}

double get_double(const YAML::Node& n, const std::string& what) {
  const double v = get<double>(n, what);
  if (!std::isfinite(v)) fail(n, "'" + what + "' must be finite");
  return v;
}

std::size_t get_count(const YAML::Node& n, const std::string& what) {
  const double v = get_double(n, what);
  if (v < 0 || v != std::floor(v)) fail(n, "'" + what + "' must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

std::uint64_t get_u64(const YAML::Node& n, const std::string& what) {
  try {
    return n.as<std::uint64_t>();
  } catch (const YAML::Exception&) {
    fail(n, "'" + what + "' must be a non-negative integer");
  }
}

bool get_bool(const YAML::Node& n, const std::string& what) { return get<bool>(n, what); }

std::vector<std::string> get_strings(const YAML::Node& n, const std::string& what) {
  if (n.IsScalar()) return {n.as<std::string>()};
  if (!n.IsSequence()) fail(n, "'" + what + "' must be a list");
  std::vector<std::string> out;
  for (const auto& v : n) out.push_back(get<std::string>(v, what));
  return out;
}

std::vector<std::size_t> get_counts(const YAML::Node& n, const std::string& what) {
  if (n.IsScalar()) return {get_count(n, what)};
  if (!n.IsSequence() || n.size() == 0) fail(n, "'" + what + "' must be a count or a non-empty list");
  std::vector<std::size_t> out;
  for (const auto& v : n) out.push_back(get_count(v, what));
  return out;
}

void positive(const YAML::Node& n, double v, const std::string& what) {
  if (!(v > 0.0)) fail(n, "'" + what + "' must be > 0");
}

void parse_dataset(const YAML::Node& n, DatasetManifest& d) {
  check_keys(n, "dataset", {"synthetic", "synthetic_seed", "csv", "family_column", "label_column",
                            "feature_columns", "roles", "max_drop_fraction"});
  if (n["synthetic"]) d.synthetic = get<std::string>(n["synthetic"], "dataset.synthetic");
  if (n["synthetic_seed"]) d.synthetic_seed = get_u64(n["synthetic_seed"], "dataset.synthetic_seed");
  if (n["csv"]) d.csv = get_strings(n["csv"], "dataset.csv");
  if (n["family_column"]) d.schema.family_column = get<std::string>(n["family_column"], "dataset.family_column");
  if (n["label_column"]) d.schema.label_column = get<std::string>(n["label_column"], "dataset.label_column");
  if (n["feature_columns"]) d.schema.feature_columns = get_strings(n["feature_columns"], "dataset.feature_columns");
  if (n["roles"]) {
    require_map(n["roles"], "dataset.roles");
    for (const auto& kv : n["roles"]) {
      try {
        d.schema.role_map[kv.first.as<std::string>()] = parse_role(kv.second.as<std::string>());
      } catch (const DataError& e) {
        fail(kv.second, e.what());
      }
    }
  }
  if (n["max_drop_fraction"]) {
    d.schema.max_drop_fraction = get_double(n["max_drop_fraction"], "dataset.max_drop_fraction");
    if (d.schema.max_drop_fraction < 0.0 || d.schema.max_drop_fraction > 1.0) {
      fail(n["max_drop_fraction"], "'dataset.max_drop_fraction' must lie in [0, 1]");
    }
  }
  if (d.synthetic.empty() == d.csv.empty()) fail(n, "dataset needs exactly one of 'synthetic' or 'csv'");
}

void note_families(const YAML::Node& n, std::map<std::string, int>& lines) {
  if (n.IsSequence()) {
    for (const auto& v : n) lines.emplace(v.as<std::string>(), line_of(v));
  } else if (n.IsScalar()) {
    lines.emplace(n.as<std::string>(), line_of(n));
  }
}

void parse_split(const YAML::Node& n, ExperimentConfig& cfg) {
  SplitConfig& s = cfg.split;
  check_keys(n, "split", {"held_out", "meta_ood", "unused", "validation_fraction", "test_fraction"});
  if (n["held_out"]) {
    s.held_out = get_strings(n["held_out"], "split.held_out");
    note_families(n["held_out"], cfg.family_lines);
  }
  if (n["meta_ood"]) {
    s.meta_ood = get_strings(n["meta_ood"], "split.meta_ood");
    note_families(n["meta_ood"], cfg.family_lines);
  }
  if (n["unused"]) {
    s.unused = get_strings(n["unused"], "split.unused");
    note_families(n["unused"], cfg.family_lines);
  }
  if (n["validation_fraction"]) s.validation_fraction = get_double(n["validation_fraction"], "split.validation_fraction");
  if (n["test_fraction"]) s.test_fraction = get_double(n["test_fraction"], "split.test_fraction");
  if (!(s.validation_fraction > 0.0 && s.test_fraction > 0.0 && s.validation_fraction + s.test_fraction < 1.0)) {
    fail(n, "split fractions must be positive and sum to less than 1");
  }
  for (const auto& f : s.held_out) {
    if (std::find(s.meta_ood.begin(), s.meta_ood.end(), f) != s.meta_ood.end()) {
      throw DisjointnessError("config line " + std::to_string(line_of(n["meta_ood"])) +
                              ": meta-OOD and held-out families must be disjoint; both contain: " + f);
    }
  }
}

void parse_curriculum(const YAML::Node& n, CurriculumStages& c) {
  check_keys(n, "curriculum", {"episodes", "ood_families", "shots", "hard_ood", "vary_id_families"});
  if (n["episodes"]) {
    c.episodes = get_count(n["episodes"], "curriculum.episodes");
    if (c.episodes == 0) fail(n["episodes"], "'curriculum.episodes' must be >= 1");
  }
  if (n["ood_families"]) c.ood_families = get_counts(n["ood_families"], "curriculum.ood_families");
  if (n["shots"]) c.shots = get_counts(n["shots"], "curriculum.shots");
  if (n["hard_ood"]) {
    try {
      c.hard_ood = parse_hard_ood_mode(get<std::string>(n["hard_ood"], "curriculum.hard_ood"));
    } catch (const ConfigError& e) {
      fail(n["hard_ood"], e.what());
    }
  }
  if (n["vary_id_families"]) c.vary_id_families = get_bool(n["vary_id_families"], "curriculum.vary_id_families");
  try {
    c.expand();
  } catch (const ConfigError& e) {
    fail(n, e.what());
  }
}

void parse_model(const YAML::Node& n, ModelConfig& m) {
  check_keys(n, "model", {"latent_dim", "hidden_dim", "residual_blocks"});
  if (n["latent_dim"]) m.latent_dim = get_count(n["latent_dim"], "model.latent_dim");
  if (n["hidden_dim"]) m.hidden_dim = get_count(n["hidden_dim"], "model.hidden_dim");
  if (n["residual_blocks"]) m.n_residual_blocks = get_count(n["residual_blocks"], "model.residual_blocks");
  if (m.latent_dim < 2) fail(n, "'model.latent_dim' must be >= 2");
  if (m.hidden_dim < 2) fail(n, "'model.hidden_dim' must be >= 2");
  if (m.n_residual_blocks < 1) fail(n, "'model.residual_blocks' must be >= 1");
}

void parse_trainer(const YAML::Node& n, TrainerConfig& t) {
  check_keys(n, "trainer", {"inner_steps", "outer_steps", "inner_lr", "outer_lr", "batch_size", "optimizer", "beta1",
                            "beta2", "epsilon", "patience", "warmup_episodes", "divergence_threshold",
                            "paper_faithful_selection"});
  if (n["inner_steps"]) t.inner_steps = get_count(n["inner_steps"], "trainer.inner_steps");
  if (n["outer_steps"]) t.outer_steps = get_count(n["outer_steps"], "trainer.outer_steps");
  if (n["inner_lr"]) {
    t.inner_lr = get_double(n["inner_lr"], "trainer.inner_lr");
    positive(n["inner_lr"], t.inner_lr, "trainer.inner_lr");
  }
  if (n["outer_lr"]) {
    t.outer_lr = get_double(n["outer_lr"], "trainer.outer_lr");
    positive(n["outer_lr"], t.outer_lr, "trainer.outer_lr");
  }
  if (n["batch_size"]) {
    t.batch_size = get_count(n["batch_size"], "trainer.batch_size");
    if (t.batch_size == 0) fail(n["batch_size"], "'trainer.batch_size' must be >= 1");
  }
  if (n["optimizer"]) {
    const auto kind = get<std::string>(n["optimizer"], "trainer.optimizer");
    if (kind == "adam") {
      t.optimizer.kind = OptimizerKind::kAdam;
    } else if (kind == "sgd") {
      t.optimizer.kind = OptimizerKind::kSgd;
    } else {
      fail(n["optimizer"], "'trainer.optimizer' must be adam or sgd");
    }
  }
  if (n["beta1"]) t.optimizer.beta1 = get_double(n["beta1"], "trainer.beta1");
  if (n["beta2"]) t.optimizer.beta2 = get_double(n["beta2"], "trainer.beta2");
  if (n["epsilon"]) {
    t.optimizer.epsilon = get_double(n["epsilon"], "trainer.epsilon");
    positive(n["epsilon"], t.optimizer.epsilon, "trainer.epsilon");
  }
  if (n["patience"]) t.early_stop_patience = get_count(n["patience"], "trainer.patience");
  if (n["warmup_episodes"]) t.warmup_episodes = get_count(n["warmup_episodes"], "trainer.warmup_episodes");
  if (n["divergence_threshold"]) {
    t.divergence_threshold = get_double(n["divergence_threshold"], "trainer.divergence_threshold");
    positive(n["divergence_threshold"], t.divergence_threshold, "trainer.divergence_threshold");
  }
  if (n["paper_faithful_selection"]) {
    t.paper_faithful_selection = get_bool(n["paper_faithful_selection"], "trainer.paper_faithful_selection");
  }
  try {
    t.validate();
  } catch (const ConfigError& e) {
    fail(n, e.what());
  }
}

void parse_loss(const YAML::Node& n, InnerLossConfig& in, OuterLossConfig& out) {
  check_keys(n, "loss", {"preset", "lambda_rec", "inner_learn_temperature", "margin", "alpha", "learn_temperature"});
  if (n["preset"]) {
    const auto p = get<std::string>(n["preset"], "loss.preset");
    if (p == "ablation") {
      out = OuterLossConfig::ablation_preset();
    } else if (p == "training-strategy") {
      out = OuterLossConfig::training_strategy_preset();
    } else {
      fail(n["preset"], "'loss.preset' must be ablation or training-strategy");
    }
  }
  if (n["lambda_rec"]) {
    in.lambda_rec = get_double(n["lambda_rec"], "loss.lambda_rec");
    if (in.lambda_rec < 0.0) fail(n["lambda_rec"], "'loss.lambda_rec' must be >= 0");
  }
  if (n["inner_learn_temperature"]) in.learn_temperature = get_bool(n["inner_learn_temperature"], "loss.inner_learn_temperature");
  if (n["margin"]) {
    out.margin_m = get_double(n["margin"], "loss.margin");
    positive(n["margin"], out.margin_m, "loss.margin");
  }
  if (n["alpha"]) {
    out.alpha = get_double(n["alpha"], "loss.alpha");
    if (out.alpha < 0.0) fail(n["alpha"], "'loss.alpha' must be >= 0");
  }
  if (n["learn_temperature"]) out.learn_temperature = get_bool(n["learn_temperature"], "loss.learn_temperature");
}

void parse_baselines(const YAML::Node& n, OdinConfig& o) {
  check_keys(n, "baselines", {"t_odin", "epsilon"});
  if (n["t_odin"]) {
    o.t_odin = get_double(n["t_odin"], "baselines.t_odin");
    positive(n["t_odin"], o.t_odin, "baselines.t_odin");
  }
  if (n["epsilon"]) {
    o.epsilon = get_double(n["epsilon"], "baselines.epsilon");
    if (o.epsilon < 0.0) fail(n["epsilon"], "'baselines.epsilon' must be >= 0");
  }
}

std::filesystem::path resolve(const ExperimentConfig& cfg, const std::string& p) {
  const std::filesystem::path path(p);
  if (path.is_absolute() || cfg.base_dir.empty()) return path;
  return cfg.base_dir / path;
}

}  // namespace

CurriculumConfig CurriculumStages::expand() const {
  CurriculumConfig c;
  c.total_episodes = episodes;
  c.ood_family_schedule = expand_schedule(ood_families, episodes);
  c.shot_schedule = expand_schedule(shots, episodes);
  c.hard_ood_mode = hard_ood;
  c.vary_id_families = vary_id_families;
  for (std::size_t e = 1; e < episodes; ++e) {
    if (c.ood_family_schedule[e] < c.ood_family_schedule[e - 1] || c.shot_schedule[e] < c.shot_schedule[e - 1]) {
      throw ConfigError("curriculum schedules must be non-decreasing");
    }
  }
  for (std::size_t e = 0; e < episodes; ++e) {
    if (c.ood_family_schedule[e] == 0 || c.shot_schedule[e] == 0) {
      throw ConfigError("curriculum family and shot counts must be >= 1");
    }
  }
  return c;
}

ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("config line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  if (!root.IsMap()) throw ConfigError("config line 1: top level must be a mapping");
  check_keys(root, "the top level",
             {"seed", "output_dir", "dataset", "split", "curriculum", "model", "trainer", "loss", "baselines"});
  ExperimentConfig cfg;
  cfg.base_dir = base_dir;
  if (root["seed"]) cfg.seed = get_u64(root["seed"], "seed");
  if (root["output_dir"]) cfg.output_dir = get<std::string>(root["output_dir"], "output_dir");
  if (!root["dataset"]) throw ConfigError("config line 1: 'dataset' section is required");
  parse_dataset(root["dataset"], cfg.dataset);
  if (root["split"]) parse_split(root["split"], cfg);
  if (root["curriculum"]) parse_curriculum(root["curriculum"], cfg.curriculum);
  if (root["model"]) parse_model(root["model"], cfg.model);
  if (root["trainer"]) parse_trainer(root["trainer"], cfg.trainer);
  if (root["loss"]) parse_loss(root["loss"], cfg.inner, cfg.outer);
  if (root["baselines"]) parse_baselines(root["baselines"], cfg.odin);
  cfg.trainer.seed = cfg.seed;
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_experiment_config(ss.str(), path.parent_path());
  } catch (const DisjointnessError& e) {
    throw DisjointnessError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string ExperimentConfig::to_yaml() const {
  YAML::Emitter o;
  o.SetDoublePrecision(17);
  auto seq = [&](const auto& v) {
    o << YAML::Flow << YAML::BeginSeq;
    for (const auto& x : v) o << x;
    o << YAML::EndSeq;
  };
  o << YAML::BeginMap;
  o << YAML::Key << "seed" << YAML::Value << seed;
  o << YAML::Key << "output_dir" << YAML::Value << output_dir;

  o << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  if (!dataset.synthetic.empty()) {
    o << YAML::Key << "synthetic" << YAML::Value << dataset.synthetic;
    o << YAML::Key << "synthetic_seed" << YAML::Value << dataset.synthetic_seed;
  } else {
    o << YAML::Key << "csv" << YAML::Value;
    seq(dataset.csv);
  }
  o << YAML::Key << "family_column" << YAML::Value << dataset.schema.family_column;
  if (dataset.schema.label_column) o << YAML::Key << "label_column" << YAML::Value << *dataset.schema.label_column;
  o << YAML::Key << "feature_columns" << YAML::Value;
  seq(dataset.schema.feature_columns);
  o << YAML::Key << "roles" << YAML::Value << YAML::BeginMap;
  for (const auto& [name, role] : dataset.schema.role_map) o << YAML::Key << name << YAML::Value << to_string(role);
  o << YAML::EndMap;
  o << YAML::Key << "max_drop_fraction" << YAML::Value << dataset.schema.max_drop_fraction;
  o << YAML::EndMap;

  o << YAML::Key << "split" << YAML::Value << YAML::BeginMap;
  o << YAML::Key << "held_out" << YAML::Value;
  seq(split.held_out);
  o << YAML::Key << "meta_ood" << YAML::Value;
  seq(split.meta_ood);
  o << YAML::Key << "unused" << YAML::Value;
  seq(split.unused);
  o << YAML::Key << "validation_fraction" << YAML::Value << split.validation_fraction;
  o << YAML::Key << "test_fraction" << YAML::Value << split.test_fraction;
  o << YAML::EndMap;

  o << YAML::Key << "curriculum" << YAML::Value << YAML::BeginMap;
  o << YAML::Key << "episodes" << YAML::Value << curriculum.episodes;
  o << YAML::Key << "ood_families" << YAML::Value;
  seq(curriculum.ood_families);
  o << YAML::Key << "shots" << YAML::Value;
  seq(curriculum.shots);
  o << YAML::Key << "hard_ood" << YAML::Value << to_string(curriculum.hard_ood);
  o << YAML::Key << "vary_id_families" << YAML::Value << curriculum.vary_id_families;
  o << YAML::EndMap;

  o << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  o << YAML::Key << "latent_dim" << YAML::Value << model.latent_dim;
  o << YAML::Key << "hidden_dim" << YAML::Value << model.hidden_dim;
  o << YAML::Key << "residual_blocks" << YAML::Value << model.n_residual_blocks;
  o << YAML::EndMap;

  o << YAML::Key << "trainer" << YAML::Value << YAML::BeginMap;
  o << YAML::Key << "inner_steps" << YAML::Value << trainer.inner_steps;
  o << YAML::Key << "outer_steps" << YAML::Value << trainer.outer_steps;
  o << YAML::Key << "inner_lr" << YAML::Value << trainer.inner_lr;
  o << YAML::Key << "outer_lr" << YAML::Value << trainer.outer_lr;
  o << YAML::Key << "batch_size" << YAML::Value << trainer.batch_size;
  o << YAML::Key << "optimizer" << YAML::Value << (trainer.optimizer.kind == OptimizerKind::kAdam ? "adam" : "sgd");
  o << YAML::Key << "beta1" << YAML::Value << trainer.optimizer.beta1;
  o << YAML::Key << "beta2" << YAML::Value << trainer.optimizer.beta2;
  o << YAML::Key << "epsilon" << YAML::Value << trainer.optimizer.epsilon;
  o << YAML::Key << "patience" << YAML::Value << trainer.early_stop_patience;
  o << YAML::Key << "warmup_episodes" << YAML::Value << trainer.warmup_episodes;
  o << YAML::Key << "divergence_threshold" << YAML::Value << trainer.divergence_threshold;
  o << YAML::Key << "paper_faithful_selection" << YAML::Value << trainer.paper_faithful_selection;
  o << YAML::EndMap;

  o << YAML::Key << "loss" << YAML::Value << YAML::BeginMap;
  o << YAML::Key << "lambda_rec" << YAML::Value << inner.lambda_rec;
  o << YAML::Key << "inner_learn_temperature" << YAML::Value << inner.learn_temperature;
  o << YAML::Key << "margin" << YAML::Value << outer.margin_m;
  o << YAML::Key << "alpha" << YAML::Value << outer.alpha;
  o << YAML::Key << "learn_temperature" << YAML::Value << outer.learn_temperature;
  o << YAML::EndMap;

  o << YAML::Key << "baselines" << YAML::Value << YAML::BeginMap;
  o << YAML::Key << "t_odin" << YAML::Value << odin.t_odin;
  o << YAML::Key << "epsilon" << YAML::Value << odin.epsilon;
  o << YAML::EndMap;
  o << YAML::EndMap;
  return std::string(o.c_str()) + "\n";
}

std::string ExperimentConfig::digest() const {
  // The output location does not change what is computed.
  ExperimentConfig copy = *this;
  copy.output_dir.clear();
  const std::string text = copy.to_yaml();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

FamilyDataset load_experiment_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dataset.synthetic.empty()) {
    const SyntheticSpec spec = cfg.dataset.synthetic == "fixture"
                                   ? default_fixture_spec()
                                   : load_synthetic_spec(resolve(cfg, cfg.dataset.synthetic));
    return gen_synthetic(spec, cfg.dataset.synthetic_seed);
  }
  std::vector<std::filesystem::path> paths;
  for (const auto& p : cfg.dataset.csv) paths.push_back(resolve(cfg, p));
  if (paths.size() == 1) return load_csv(paths.front(), cfg.dataset.schema);
  return load_merged(paths, cfg.dataset.schema);
}

SplitPlan make_split_plan(const ExperimentConfig& cfg, const FamilyDataset& ds) {
  auto check = [&](const std::vector<std::string>& names) {
    for (const auto& n : names) {
      bool found = false;
      for (const auto& f : ds.families) found = found || f.name == n;
      if (!found) {
        auto it = cfg.family_lines.find(n);
        const std::string where = it == cfg.family_lines.end() ? "config" : "config line " + std::to_string(it->second);
        throw ConfigError(where + ": unknown family '" + n + "'");
      }
    }
  };
  check(cfg.split.held_out);
  check(cfg.split.meta_ood);
  check(cfg.split.unused);
  const std::set<std::string> held(cfg.split.held_out.begin(), cfg.split.held_out.end());
  const std::set<std::string> meta(cfg.split.meta_ood.begin(), cfg.split.meta_ood.end());
  const std::set<std::string> unused(cfg.split.unused.begin(), cfg.split.unused.end());
  return plan_splits(ds.families, held, meta, unused, cfg.split.validation_fraction, cfg.split.test_fraction);
}

TrainingSetup make_training_setup(const ExperimentConfig& cfg) {
  TrainingSetup s;
  s.model = cfg.model;
  s.trainer = cfg.trainer;
  s.trainer.seed = cfg.seed;
  s.curriculum = cfg.curriculum.expand();
  s.inner = cfg.inner;
  s.outer = cfg.outer;
  s.config_digest = cfg.digest();
  return s;
}

}  // namespace mdml
