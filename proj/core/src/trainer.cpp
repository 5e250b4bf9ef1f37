#include "mdml/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "mdml/errors.hpp"
#include "mdml/metrics.hpp"

namespace mdml {

void TrainerConfig::validate() const {
  if (batch_size == 0) throw ConfigError("trainer: batch_size must be >= 1");
  if (!(inner_lr > 0.0) || !(outer_lr > 0.0)) throw ConfigError("trainer: learning rates must be > 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) || !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("trainer: optimizer betas must lie in [0, 1)");
  }
  if (!(optimizer.epsilon > 0.0)) throw ConfigError("trainer: optimizer epsilon must be > 0");
  if (threads == 0) throw ConfigError("trainer: threads must be >= 1");
  if (!(divergence_threshold > 0.0)) throw ConfigError("trainer: divergence threshold must be > 0");
}

TrainingData prepare_training_data(const FamilyDataset& raw, const SplitPlan& plan, std::uint64_t seed) {
  raw.validate();
  TrainingData data;
  data.plan = plan;
  data.pools = reserve_rows(raw, plan, seed);
  const auto id_train = data.pools.gather(data.pools.train, plan.normal_families);
  data.standardizer = fit_standardizer(raw, id_train);
  data.dataset = apply_standardizer(data.standardizer, raw);
  data.eval = build_evaluation_pools(data.dataset, plan, data.pools, seed);
  if (data.eval.validation.empty()) throw DataError("no validation rows for the meta-OOD families");

  // Reconstruction weights: variance of the standardized ID training rows.
  // Degenerate features carry no signal after standardization, weight 1.
  const std::size_t d = data.dataset.dims();
  data.feature_variance.assign(d, 0.0);
  std::vector<double> mean(d, 0.0);
  for (std::size_t r : id_train) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += data.dataset.features(r, j);
  }
  for (double& m : mean) m /= static_cast<double>(id_train.size());
  for (std::size_t r : id_train) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = data.dataset.features(r, j) - mean[j];
      data.feature_variance[j] += c * c;
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    data.feature_variance[j] /= static_cast<double>(id_train.size());
    if (data.standardizer.degenerate()[j] || data.feature_variance[j] < kVarianceFloor) data.feature_variance[j] = 1.0;
  }
  return data;
}

std::vector<double> TrainLog::aggregated_objective() const {
  std::vector<double> sum;
  std::vector<std::size_t> count;
  for (const auto& r : records) {
    if (r.outer_losses.size() > sum.size()) {
      sum.resize(r.outer_losses.size(), 0.0);
      count.resize(r.outer_losses.size(), 0);
    }
    for (std::size_t s = 0; s < r.outer_losses.size(); ++s) {
      sum[s] += r.outer_losses[s];
      ++count[s];
    }
  }
  for (std::size_t s = 0; s < sum.size(); ++s) sum[s] /= static_cast<double>(count[s]);
  return sum;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void check_loss(double loss, double threshold, const char* stage, std::size_t episode, std::size_t step) {
  if (!std::isfinite(loss) || loss > threshold) {
    std::ostringstream os;
    os << stage << " loss diverged at episode " << episode << ", step " << step << ": " << loss
       << " (limit " << threshold << ")";
    throw DivergenceError(os.str());
  }
}

// Restores the unfrozen state on every exit path.
class FreezeGuard {
 public:
  explicit FreezeGuard(ModelState& s) : state_(s) { state_.set_theta_frozen(true); }
  ~FreezeGuard() { state_.set_theta_frozen(false); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ModelState& state_;
};

}  // namespace

void write_train_log_csv(std::ostream& out, const TrainLog& log, bool include_timing) {
  out << "# config_digest=" << log.config_digest << " seed=" << log.seed << '\n';
  out << "episode,inner_loss,outer_loss,meta_ood_auc,heldout_auc,margin_meta,margin_heldout,temperature,seconds\n";
  for (const auto& r : log.records) {
    const double inner = r.inner_losses.empty() ? std::nan("") : r.inner_losses.back();
    const double outer = r.outer_losses.empty() ? std::nan("") : r.outer_losses.back();
    out << r.episode << ',' << fmt(inner) << ',' << fmt(outer) << ',' << fmt(r.meta_ood_auc) << ','
        << fmt(r.heldout_auc) << ',' << fmt(r.margin_meta) << ',' << fmt(r.margin_heldout) << ','
        << fmt(r.temperature) << ',' << (include_timing ? fmt(r.seconds) : std::string()) << '\n';
  }
}

std::vector<double> inner_adapt(ModelState& state, const TrainingData& data, const EpisodeSpec& episode,
                                const TrainerConfig& cfg, const InnerLossConfig& loss_cfg, bool warmup) {
  std::vector<double> losses;
  if (cfg.inner_steps == 0) return losses;
  if (episode.inner_support.empty()) throw DataError("inner_adapt: episode has no inner support rows");
  std::vector<std::size_t> order = episode.inner_support;
  Rng(cfg.seed).substream(stream::kMinibatch, episode.index).shuffle(order);

  std::vector<Parameter*> params = state.theta();
  if (warmup) {
    for (Parameter* p : state.phi()) params.push_back(p);
    if (loss_cfg.learn_temperature) params.push_back(&state.log_temperature);
  }
  if (cfg.reset_moments_per_stage) reset_optimizer_state(params);
  const std::size_t b = std::min(cfg.batch_size, order.size());
  std::vector<std::size_t> batch(b);
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < cfg.inner_steps; ++step) {
    for (std::size_t i = 0; i < b; ++i) batch[i] = order[(cursor + i) % order.size()];
    cursor = (cursor + b) % order.size();
    const ValueMatrix x = data.dataset.features.gather_rows(batch);
    Tape tape;
    const auto terms = inner_loss(tape, x, state, loss_cfg, data.feature_variance);
    const double loss = tape.scalar(terms.total);
    check_loss(loss, cfg.divergence_threshold, "inner", episode.index, step);
    losses.push_back(loss);
    state.zero_grad();
    tape.backward(terms.total);
    apply_update(params, cfg.inner_lr, cfg.optimizer);
  }
  return losses;
}

std::vector<double> outer_step(ModelState& state, const TrainingData& data, const EpisodeSpec& episode,
                               const TrainerConfig& cfg, const OuterLossConfig& loss_cfg) {
  std::vector<double> losses;
  if (cfg.outer_steps == 0) return losses;
  if (episode.query_id.size() != episode.query_ood.size() || episode.query_id.empty()) {
    throw InvariantError("outer_step: query must be non-empty and balanced");
  }
  FreezeGuard guard(state);
  const std::uint64_t digest = state.theta_digest();
  // Theta is frozen, so the query latents are fixed for the whole stage.
  const ValueMatrix z_id = encode(data.dataset.features.gather_rows(episode.query_id), state);
  const ValueMatrix z_ood = encode(data.dataset.features.gather_rows(episode.query_ood), state);

  std::vector<Parameter*> params = state.phi();
  if (loss_cfg.learn_temperature) params.push_back(&state.log_temperature);
  if (cfg.reset_moments_per_stage) reset_optimizer_state(params);
  for (std::size_t step = 0; step < cfg.outer_steps; ++step) {
    Tape tape;
    const auto terms = outer_loss_from_latent(tape, z_id, z_ood, state, loss_cfg);
    const double loss = tape.scalar(terms.total);
    check_loss(loss, cfg.divergence_threshold, "outer", episode.index, step);
    losses.push_back(loss);
    state.zero_grad();
    meta_gradient(tape, terms, state);
    apply_update(params, cfg.outer_lr, cfg.optimizer);
    if (state.theta_digest() != digest) {
      throw InvariantError("outer_step: theta changed during the outer update (episode " +
                           std::to_string(episode.index) + ", step " + std::to_string(step) + ")");
    }
  }
  return losses;
}

PoolScores score_validation_pools(const ModelState& state, const TrainingData& data, std::size_t threads) {
  ScoringOptions opts;
  opts.threads = threads;
  PoolScores out;
  out.validation = anomaly_score(data.dataset.features.gather_rows(data.eval.validation), state, opts);
  if (!data.eval.heldout_val.empty()) {
    out.heldout_val = anomaly_score(data.dataset.features.gather_rows(data.eval.heldout_val), state, opts);
  }
  return out;
}

namespace {

struct Selection {
  double primary = -1.0;
  double margin = -2.0;
  bool better_than(const Selection& o) const {
    return primary > o.primary || (primary == o.primary && margin > o.margin);
  }
};

}  // namespace

TrainingResult run_meta_training(const TrainingData& data, const TrainingSetup& setup,
                                 std::span<const EpisodeSpec> replay) {
  const TrainerConfig& cfg = setup.trainer;
  cfg.validate();
  setup.inner.validate();
  setup.outer.validate();
  data.plan.validate();
  CurriculumConfig cur = setup.curriculum;
  if (!replay.empty()) {
    cur.total_episodes = replay.size();
    cur.ood_family_schedule.clear();
    cur.shot_schedule.clear();
    for (const auto& ep : replay) {
      cur.ood_family_schedule.push_back(ep.ood_families.size());
      cur.shot_schedule.push_back(ep.shots);
    }
  }
  cur.validate(data.plan);
  if (cur.total_episodes == 0) throw ConfigError("empty episode stream");

  ModelConfig mcfg = setup.model;
  if (mcfg.input_dim == 0) mcfg.input_dim = data.dataset.dims();
  if (mcfg.input_dim != data.dataset.dims()) {
    throw DimensionError("model input_dim " + std::to_string(mcfg.input_dim) + " does not match " +
                         std::to_string(data.dataset.dims()) + " features");
  }

  TrainingResult result;
  ModelState state = ModelState::initialize(mcfg, cfg.seed);
  result.log.config_digest = setup.config_digest;
  result.log.seed = cfg.seed;

  FamilyRotation rotation(data.plan.meta_ood_families);
  const auto distance_ranking = rank_by_distance(data.dataset, data.plan, data.pools);
  std::map<std::string, double> family_confidence;
  const SamplerConfig sampler{cfg.inner_steps, cfg.batch_size};

  Selection best;
  std::size_t stale = 0;
  for (std::size_t e = 0; e < cur.total_episodes; ++e) {
    const auto start = std::chrono::steady_clock::now();
    EpisodeSpec episode;
    if (!replay.empty()) {
      episode = replay[e];
      for (const auto& f : episode.ood_families) {
        if (data.plan.is_held_out(f)) throw LeakageError("replayed episode uses held-out family '" + f + "'");
      }
    } else {
      std::vector<std::string> ranking;
      if (cur.hard_ood_mode == HardOodMode::kDistanceRanked ||
          (cur.hard_ood_mode == HardOodMode::kErrorRanked && family_confidence.empty())) {
        ranking = distance_ranking;
      } else if (cur.hard_ood_mode == HardOodMode::kErrorRanked) {
        ranking = rank_by_error(data.plan, family_confidence);
      }
      const std::size_t k = cur.ood_family_schedule[e];
      const auto chosen = rotation.select(e, k, ranking);
      rotation.record(e, chosen, k);
      episode = sample_episode(data.plan, data.pools, cur, e, cfg.seed, chosen, sampler);
    }
    check_leakage(data.dataset, data.plan, data.pools, std::span<const EpisodeSpec>(&episode, 1));
    for (const auto& w : episode.warnings) result.log.warnings.push_back("episode " + std::to_string(e) + ": " + w);

    EpisodeRecord rec;
    rec.episode = e;
    rec.ood_families = episode.ood_families;
    rec.inner_losses = inner_adapt(state, data, episode, cfg, setup.inner, e < cfg.warmup_episodes);
    rec.outer_losses = outer_step(state, data, episode, cfg, setup.outer);
    rec.temperature = state.temperature();

    const PoolScores scores = score_validation_pools(state, data, cfg.threads);
    const auto val = scored_samples(data.dataset, data.eval.validation, scores.validation);
    rec.meta_ood_auc = auc_roc(val);
    rec.margin_meta = confidence_margin(val);
    rec.tau_star = select_threshold(val).tau_star;
    if (!scores.heldout_val.empty()) {
      const auto held = scored_samples(data.dataset, data.eval.heldout_val, scores.heldout_val);
      rec.heldout_auc = auc_roc(held);
      rec.margin_heldout = confidence_margin(held);
    }
    // Per-family hardness for the next episode's ranking.
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& s : val) {
      if (s.label == 1) {
        auto& a = acc[s.family];
        a.first += 1.0 - s.score;
        ++a.second;
      }
    }
    for (const auto& f : data.plan.meta_ood_families) {
      auto it = acc.find(f);
      family_confidence[f] = it == acc.end() ? 0.0 : it->second.first / static_cast<double>(it->second.second);
    }

    Selection current{rec.meta_ood_auc, rec.margin_meta};
    if (cfg.paper_faithful_selection && !std::isnan(rec.heldout_auc)) {
      current.primary = 0.5 * (rec.meta_ood_auc + rec.heldout_auc);
    }
    if (cfg.record_timing) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    rec.improved = e == 0 || current.better_than(best);
    if (rec.improved) {
      best = current;
      result.best = state;
      result.log.best_episode = e;
      stale = 0;
    } else {
      ++stale;
    }
    result.episodes.push_back(std::move(episode));
    result.log.records.push_back(rec);
    if (setup.on_episode) setup.on_episode(rec);
    if (!rec.improved && stale >= std::max<std::size_t>(cfg.early_stop_patience, 1)) {
      result.log.stopped_early = e + 1 < cur.total_episodes;
      break;
    }
  }
  result.last = std::move(state);
  result.best.set_theta_frozen(false);
  return result;
}

}  // namespace mdml
