// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Long-running; registered with a generous ctest timeout.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mdml/baselines.hpp"
#include "mdml/errors.hpp"
#include "mdml/experiment_config.hpp"
#include "mdml/gradcheck.hpp"
#include "mdml/losses.hpp"
#include "mdml/metrics.hpp"
#include "mdml/optimizer.hpp"
#include "mdml/trainer.hpp"
#include "mdml_tools/commands.hpp"

namespace {

using namespace mdml;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

struct Verdict {
  bool pass = true;
  std::string detail;
  void fail(const std::string& why) {
    pass = false;
    if (!detail.empty()) detail += "; ";
    detail += why;
  }
  void note(const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

fs::path config_file(const std::string& name) { return fs::path(MDML_SOURCE_DIR) / "configs" / name; }

ValueMatrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  ValueMatrix m(rows, cols);
  for (double& v : m.data()) v = d(gen);
  return m;
}

// Trains one configuration and scores its best checkpoint on the test pools
// (threshold picked on the validation pool).
struct Outcome {
  TrainingResult result;
  PoolEvaluation test;
  double seconds = 0.0;
};

Outcome train(const ExperimentConfig& cfg) {
  const auto t0 = Clock::now();
  const FamilyDataset raw = load_experiment_dataset(cfg);
  const SplitPlan plan = make_split_plan(cfg, raw);
  const TrainingData data = prepare_training_data(raw, plan, cfg.seed);
  Outcome o;
  o.result = run_meta_training(data, make_training_setup(cfg));
  auto score = [&](const std::vector<std::size_t>& rows) {
    return scored_samples(data.dataset, rows, anomaly_score(data.dataset.features.gather_rows(rows), o.result.best));
  };
  o.test = evaluate_pools(score(data.eval.validation), score(data.eval.meta_test), score(data.eval.heldout_test));
  o.seconds = seconds_since(t0);
  return o;
}

ExperimentConfig seeded(const std::string& file, std::uint64_t seed) {
  ExperimentConfig cfg = load_experiment_config(config_file(file));
  cfg.seed = seed;
  cfg.trainer.seed = seed;
  return cfg;
}

// ---------------------------------------------------------------------------

Verdict c1_gradients() {
  Verdict v;
  const auto t0 = Clock::now();
  const GradcheckReport r = run_gradcheck();
  const double s = seconds_since(t0);
  double worst = 0.0;
  for (const auto& e : r.entries) {
    worst = std::max(worst, e.max_rel_error);
    if (e.max_rel_error >= 1e-4) v.fail(e.name + " rel err " + fmt("%.3g", e.max_rel_error));
    const bool composed = e.name.rfind("inner_loss", 0) == 0 || e.name.rfind("outer_loss", 0) == 0;
    if (composed && e.coordinates < 50) v.fail(e.name + " checked only " + std::to_string(e.coordinates) + " coordinates");
  }
  std::set<std::string> names;
  for (const auto& e : r.entries) names.insert(e.name);
  for (const char* need : {"inner_loss", "outer_loss"}) {
    if (names.count(need) == 0) v.fail(std::string("no check named ") + need);
  }
  if (s >= 30.0) v.fail("took " + fmt("%.1f s", s));
  v.note(std::to_string(r.entries.size()) + " checks, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.2f s", s));
  return v;
}

std::vector<unsigned char> theta_bytes(const ModelState& s) {
  std::vector<unsigned char> out;
  for (auto g : {ParamGroup::kThetaEncoder, ParamGroup::kThetaDecoder}) {
    for (const Parameter* p : s.parameters(g)) {
      const auto* b = reinterpret_cast<const unsigned char*>(p->value.data().data());
      out.insert(out.end(), b, b + p->value.size() * sizeof(double));
    }
  }
  return out;
}

Verdict c2_freeze() {
  Verdict v;
  ModelConfig mc;
  mc.input_dim = 8;
  mc.latent_dim = 16;
  mc.hidden_dim = 24;
  mc.n_residual_blocks = 2;
  ModelState s = ModelState::initialize(mc, 17);
  std::mt19937_64 gen(17);
  OuterLossConfig cfg;
  std::vector<Parameter*> meta = s.phi();
  meta.push_back(&s.log_temperature);
  const auto initial = theta_bytes(s);
  std::size_t steps = 0;
  for (int step = 0; step < 100; ++step) {
    const auto before = theta_bytes(s);
    s.set_theta_frozen(true);
    s.zero_grad();
    Tape tape;
    auto terms = outer_loss(tape, random_matrix(16, 8, gen), random_matrix(16, 8, gen, 2.0), s, cfg);
    meta_gradient(tape, terms, s);
    apply_update(meta, 1e-2, OptimizerConfig{});
    s.set_theta_frozen(false);
    if (theta_bytes(s) != before) {
      v.fail("theta changed at step " + std::to_string(step));
      break;
    }
    ++steps;
  }
  if (theta_bytes(s) != initial) v.fail("theta drifted over the run");
  v.note(std::to_string(steps) + " outer steps, theta bit-identical");
  return v;
}

double clamped_bce(double p, int y) {
  p = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
  return y ? -std::log(p) : -std::log(1.0 - p);
}

Verdict c3_loss_identity() {
  Verdict v;
  std::mt19937_64 gen(3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ModelConfig mc;
    mc.input_dim = 5;
    mc.latent_dim = 8;
    mc.hidden_dim = 12;
    mc.n_residual_blocks = 1;
    ModelState s = ModelState::initialize(mc, 100 + trial);
    s.set_temperature(std::exp(std::uniform_real_distribution<double>(-1.0, 1.0)(gen)));
    OuterLossConfig cfg;
    cfg.margin_m = std::uniform_real_distribution<double>(0.01, 1.0)(gen);
    cfg.alpha = std::uniform_real_distribution<double>(0.0, 2.0)(gen);
    const ValueMatrix id = random_matrix(1 + trial % 9, 5, gen);
    const ValueMatrix ood = random_matrix(1 + trial % 7, 5, gen, 3.0);
    s.set_theta_frozen(true);
    Tape tape;
    const double got = tape.scalar(outer_loss(tape, id, ood, s, cfg).total);

    // Independent recomputation from the raw logits.
    const double t = s.temperature();
    auto confidences = [&](const ValueMatrix& x) {
      const ValueMatrix l = logits(x, s);
      std::vector<double> p;
      for (std::size_t r = 0; r < l.rows(); ++r) p.push_back(1.0 / (1.0 + std::exp((l(r, 1) - l(r, 0)) / t)));
      return p;
    };
    const auto pi = confidences(id);
    const auto po = confidences(ood);
    double l_id = 0, l_ood = 0, mi = 0, mo = 0;
    for (double p : pi) {
      l_id += clamped_bce(p, 1);
      mi += p;
    }
    for (double p : po) {
      l_ood += clamped_bce(p, 0);
      mo += p;
    }
    l_id /= pi.size();
    l_ood /= po.size();
    const double gap = mi / pi.size() - mo / po.size();
    const double expected = l_id + l_ood + cfg.alpha * std::max(0.0, cfg.margin_m - gap);
    worst = std::max(worst, std::abs(got - expected));
  }
  if (worst > 1e-12) v.fail("max |diff| " + fmt("%.3g", worst));

  // Zero-initialized head: both halves sit at p = 1/2.
  ModelConfig mc;
  mc.input_dim = 5;
  mc.latent_dim = 8;
  mc.hidden_dim = 12;
  mc.n_residual_blocks = 1;
  ModelState s = ModelState::initialize(mc, 9);
  s.head.logits.weight.value.fill(0.0);
  s.head.logits.bias.value.fill(0.0);
  s.set_theta_frozen(true);
  OuterLossConfig cfg;
  Tape tape;
  const double sym = tape.scalar(outer_loss(tape, random_matrix(8, 5, gen), random_matrix(8, 5, gen), s, cfg).total);
  const double analytic = 2.0 * std::numbers::ln2 + cfg.alpha * cfg.margin_m;
  if (sym != analytic) v.fail("symmetric case " + fmt("%.17g", sym) + " vs " + fmt("%.17g", analytic));
  v.note("100 random losses, max |diff| " + fmt("%.2e", worst) + "; symmetric case exact");
  return v;
}

Verdict c4_metric_oracles() {
  Verdict v;
  std::mt19937_64 gen(4);
  std::size_t thr_bad = 0, auc_bad = 0;
  double auc_worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + gen() % 63;
    // Coarse score grids force ties on a share of the pools.
    const int grid = trial % 3 == 0 ? 5 : (trial % 3 == 1 ? 50 : 1 << 30);
    std::vector<ScoredSample> s(n);
    for (auto& x : s) {
      x.score = static_cast<double>(gen() % (static_cast<std::uint64_t>(grid) + 1)) / grid;
      x.label = static_cast<int>(gen() % 2);
    }
    s[0].label = 0;
    s[1].label = 1;
    // Exhaustive oracle: every cut at an observed score, and the empty set.
    auto f1 = [&](double tau) {
      double tp = 0, fp = 0, fn = 0;
      for (const auto& x : s) {
        const bool flag = x.score >= tau;
        tp += flag && x.label;
        fp += flag && !x.label;
        fn += !flag && x.label;
      }
      return tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
    };
    double best = 0.0;
    for (const auto& x : s) best = std::max(best, f1(x.score));
    const auto r = select_threshold(s);
    if (r.f1_at_tau != best || f1(r.tau_star) != best) ++thr_bad;
  }
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + gen() % 199;
    const int grid = trial % 2 ? 7 : 1 << 30;
    std::vector<ScoredSample> s(n);
    for (auto& x : s) {
      x.score = static_cast<double>(gen() % (static_cast<std::uint64_t>(grid) + 1)) / grid;
      x.label = static_cast<int>(gen() % 2);
    }
    s[0].label = 0;
    s[1].label = 1;
    double wins = 0, pairs = 0;
    for (const auto& a : s) {
      if (!a.label) continue;
      for (const auto& b : s) {
        if (b.label) continue;
        pairs += 1;
        wins += a.score > b.score ? 1.0 : (a.score == b.score ? 0.5 : 0.0);
      }
    }
    const double d = std::abs(auc_roc(s) - wins / pairs);
    auc_worst = std::max(auc_worst, d);
    if (d > 1e-12) ++auc_bad;
  }
  if (thr_bad) v.fail(std::to_string(thr_bad) + " threshold disagreements");
  if (auc_bad) v.fail(std::to_string(auc_bad) + " AUC mismatches");
  v.note("200 threshold pools, 200 AUC pools, max AUC diff " + fmt("%.1e", auc_worst));
  return v;
}

// Criteria 5 and 11 share two cmd_train runs of the shipped config.
struct CliRuns {
  fs::path root;
  int code_a = -1;
  int code_b = -1;
  std::string err;
};

CliRuns run_cli_twice() {
  CliRuns r;
  r.root = fs::temp_directory_path() / ("mdml-acceptance-" + std::to_string(std::random_device{}()));
  fs::create_directories(r.root);
  for (const char* name : {"a", "b"}) {
    std::ostringstream out, err;
    const int code = cli::run({"mdml", "train", "--config", config_file("synthetic.yaml").string(), "--out",
                               (r.root / name).string(), "--quiet"},
                              out, err);
    (name[0] == 'a' ? r.code_a : r.code_b) = code;
    r.err += err.str();
  }
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Verdict c5_leakage(const CliRuns& runs) {
  Verdict v;
  if (runs.code_a != 0) {
    v.fail("train exited " + std::to_string(runs.code_a) + ": " + runs.err);
    return v;
  }
  const ExperimentConfig cfg = load_experiment_config(config_file("synthetic.yaml"));
  const FamilyDataset raw = load_experiment_dataset(cfg);
  const SplitPlan plan = make_split_plan(cfg, raw);
  const RowPools pools = reserve_rows(raw, plan, cfg.seed);
  const auto episodes = read_manifest(runs.root / "a" / cli::kManifestFile);

  std::set<std::size_t> forbidden;
  for (const auto* m : {&pools.validation, &pools.test}) {
    for (const auto& [f, rows] : *m) forbidden.insert(rows.begin(), rows.end());
  }
  const std::set<std::string> held(plan.held_out_families.begin(), plan.held_out_families.end());
  std::size_t held_rows = 0, eval_rows = 0, touched = 0;
  for (const auto& ep : episodes) {
    for (const auto* rows : {&ep.inner_support, &ep.query_id, &ep.query_ood}) {
      for (auto r : *rows) {
        ++touched;
        held_rows += held.count(raw.family(r).name);
        eval_rows += forbidden.count(r);
      }
    }
    for (const auto& f : ep.ood_families) held_rows += held.count(f);
  }
  if (episodes.empty()) v.fail("empty manifest");
  if (held_rows) v.fail(std::to_string(held_rows) + " held-out rows in episodes");
  if (eval_rows) v.fail(std::to_string(eval_rows) + " evaluation rows in episodes");
  try {
    check_leakage(raw, plan, pools, episodes);
  } catch (const Error& e) {
    v.fail(std::string("check_leakage: ") + e.what());
  }
  v.note(std::to_string(episodes.size()) + " episodes, " + std::to_string(touched) + " row draws, 0 held-out");
  return v;
}

Verdict c6_c7_end_to_end(Verdict& margin) {
  Verdict v;
  std::string auc_notes, margin_notes;
  for (std::uint64_t seed : kSeeds) {
    ExperimentConfig cfg = seeded("synthetic.yaml", seed);
    const Outcome meta = train(cfg);
    const double held = meta.test.held_out.auc_roc;
    const double mauc = meta.test.meta_ood.auc_roc;
    if (held < 0.95) v.fail("seed " + std::to_string(seed) + " held-out AUC " + fmt("%.4f", held));
    if (mauc < 0.97) v.fail("seed " + std::to_string(seed) + " meta AUC " + fmt("%.4f", mauc));
    if (meta.seconds >= 120.0) v.fail("seed " + std::to_string(seed) + " took " + fmt("%.0f s", meta.seconds));
    auc_notes += " s" + std::to_string(seed) + " held " + fmt("%.4f", held) + " meta " + fmt("%.4f", mauc) + " " +
                 fmt("%.0fs", meta.seconds);

    cfg.trainer.outer_steps = 0;
    const Outcome inner_only = train(cfg);
    const double gain = meta.test.meta_ood.margin - inner_only.test.meta_ood.margin;
    if (!(gain >= 0.1)) margin.fail("seed " + std::to_string(seed) + " gain " + fmt("%.4f", gain));
    margin_notes += " s" + std::to_string(seed) + " " + fmt("%.3f", inner_only.test.meta_ood.margin) + "->" +
                    fmt("%.3f", meta.test.meta_ood.margin);
  }
  v.note(auc_notes.substr(1));
  margin.note("phase-1 -> meta margin:" + margin_notes);
  return v;
}

Verdict c8_shots() {
  Verdict v;
  std::vector<double> means;
  std::string notes;
  for (std::size_t shots : {5u, 20u, 50u}) {
    double sum = 0.0;
    for (std::uint64_t seed : kSeeds) {
      ExperimentConfig cfg = seeded("synthetic.yaml", seed);
      cfg.curriculum.shots = {shots};
      sum += train(cfg).test.meta_ood.auc_roc;
    }
    means.push_back(sum / 3.0);
    notes += " " + std::to_string(shots) + ":" + fmt("%.4f", means.back());
  }
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] < means[i - 1] - 0.01) v.fail("drop at step " + std::to_string(i));
  }
  v.note("mean meta AUC by shots" + notes);
  return v;
}

Verdict c9_diversity() {
  Verdict v;
  double three = 0.0, one = 0.0;
  for (std::uint64_t seed : kSeeds) {
    three += train(seeded("diversity.yaml", seed)).test.held_out.auc_roc / 3.0;
    one += train(seeded("diversity-single.yaml", seed)).test.held_out.auc_roc / 3.0;
  }
  if (three < one - 0.02) v.fail("3 families below 1 family by more than 0.02");
  v.note("mean held-out AUC: 3 families " + fmt("%.4f", three) + ", 1 family " + fmt("%.4f", one));
  return v;
}

Verdict c10_baselines() {
  Verdict v;
  ModelConfig mc;
  mc.input_dim = 10;
  mc.latent_dim = 16;
  mc.hidden_dim = 32;
  mc.n_residual_blocks = 2;
  ModelState s = ModelState::initialize(mc, 10);
  s.set_temperature(2.5);
  std::mt19937_64 gen(10);
  const ValueMatrix x = random_matrix(1000, 10, gen, 2.0);
  const auto odin = odin_score(x, s, OdinConfig{1.0, 0.0});
  const auto msp = msp_score(x, s);
  if (odin.size() != msp.size() || std::memcmp(odin.data(), msp.data(), odin.size() * sizeof(double)) != 0) {
    v.fail("odin(t=1, eps=0) differs from msp");
  }
  s.set_temperature(1.0);
  const auto base = predicted_label(x, s);
  for (double t : {0.1, 1.0, 10.0, 1000.0}) {
    s.set_temperature(t);
    if (predicted_label(x, s) != base) v.fail("labels change at T=" + fmt("%g", t));
  }
  std::size_t anomalies = std::count(base.begin(), base.end(), kAnomalyIndex);
  v.note("1000 inputs bit-identical; labels stable over 4 temperatures (" + std::to_string(anomalies) +
         " predicted anomalous)");
  return v;
}

Verdict c11_reproducible(const CliRuns& runs) {
  Verdict v;
  if (runs.code_a != 0 || runs.code_b != 0) {
    v.fail("train exited " + std::to_string(runs.code_a) + "/" + std::to_string(runs.code_b));
    return v;
  }
  for (const char* f : {cli::kTrainLogFile, cli::kCheckpointFile}) {
    const std::string a = slurp(runs.root / "a" / f);
    const std::string b = slurp(runs.root / "b" / f);
    if (a.empty() || a != b) v.fail(std::string(f) + " differs");
  }
  v.note("train log and checkpoint byte-identical");
  return v;
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const char* title, const Verdict& v) {
    std::printf("[%s] %2d %s: %s\n", v.pass ? "PASS" : "FAIL", id, title, v.detail.c_str());
    std::fflush(stdout);
    failed += v.pass ? 0 : 1;
  };
  auto guarded = [](const std::function<Verdict()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      Verdict v;
      v.fail(std::string("exception: ") + e.what());
      return v;
    }
  };

  report(1, "gradient suite", guarded(c1_gradients));
  report(2, "theta freeze over outer steps", guarded(c2_freeze));
  report(3, "outer loss identity", guarded(c3_loss_identity));
  report(4, "threshold and AUC oracles", guarded(c4_metric_oracles));

  CliRuns runs;
  try {
    runs = run_cli_twice();
  } catch (const std::exception& e) {
    runs.err = e.what();
  }
  report(5, "leakage freedom", guarded([&] { return c5_leakage(runs); }));

  Verdict margin;
  const Verdict e2e = guarded([&] { return c6_c7_end_to_end(margin); });
  report(6, "end-to-end synthetic generalization", e2e);
  if (!e2e.pass && margin.detail.empty()) margin.fail("not measured");
  report(7, "margin gain over inner-only model", margin);
  report(8, "few-shot trend", guarded(c8_shots));
  report(9, "curriculum diversity", guarded(c9_diversity));
  report(10, "baseline degeneracy", guarded(c10_baselines));
  report(11, "reproducibility", guarded([&] { return c11_reproducible(runs); }));

  std::error_code ec;
  if (!runs.root.empty()) fs::remove_all(runs.root, ec);
  std::printf("%d of 11 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
