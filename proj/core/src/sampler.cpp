#include "mdml/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <tuple>

#include "json.hpp"
#include "mdml/errors.hpp"
#include "mdml/rng.hpp"

namespace mdml {

namespace {

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : ", ") + s;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// split plan

void SplitPlan::validate() const {
  std::vector<std::string> overlap;
  for (const auto& f : meta_ood_families) {
    if (contains(held_out_families, f)) overlap.push_back(f);
  }
  if (!overlap.empty()) {
    throw DisjointnessError("meta-OOD and held-out families must be disjoint; both contain: " + join(overlap));
  }
  for (const auto& f : normal_families) {
    if (contains(meta_ood_families, f) || contains(held_out_families, f)) {
      throw DisjointnessError("normal family '" + f + "' also listed as an anomaly family");
    }
  }
  for (const auto& f : unused_families) {
    if (contains(normal_families, f) || contains(meta_ood_families, f) || contains(held_out_families, f)) {
      throw DisjointnessError("family '" + f + "' is both unused and assigned");
    }
  }
  if (normal_families.empty()) throw ConfigError("split plan: no normal families");
  if (meta_ood_families.empty()) throw ConfigError("split plan: no meta-OOD families remain");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("split plan: validation_fraction must lie in (0, 1)");
  }
  if (!(test_fraction > 0.0 && validation_fraction + test_fraction < 1.0)) {
    throw ConfigError("split plan: test_fraction must be positive and leave rows for training");
  }
}

bool SplitPlan::is_held_out(const std::string& family) const { return contains(held_out_families, family); }

SplitPlan plan_splits(std::span<const FamilyLabel> families, const std::set<std::string>& held_out,
                      const std::set<std::string>& meta_ood, const std::set<std::string>& unused,
                      double validation_fraction, double test_fraction) {
  std::set<std::string> known;
  for (const auto& f : families) known.insert(f.name);
  auto role_of = [&](const std::string& name) {
    for (const auto& f : families) {
      if (f.name == name) return f.role;
    }
    throw ConfigError("split plan: unknown family '" + name + "'");
  };
  for (const auto& name : held_out) {
    if (role_of(name) != Role::kAnomaly) throw ConfigError("split plan: held-out family '" + name + "' is not an anomaly family");
    if (meta_ood.count(name)) {
      throw DisjointnessError("meta-OOD and held-out families must be disjoint; both contain: " + name);
    }
  }
  for (const auto& name : meta_ood) {
    if (role_of(name) != Role::kAnomaly) throw ConfigError("split plan: meta-OOD family '" + name + "' is not an anomaly family");
  }
  for (const auto& name : unused) role_of(name);

  SplitPlan plan;
  plan.validation_fraction = validation_fraction;
  plan.test_fraction = test_fraction;
  for (const auto& f : families) {
    if (unused.count(f.name)) {
      plan.unused_families.push_back(f.name);
    } else if (f.role == Role::kNormal) {
      plan.normal_families.push_back(f.name);
    } else if (held_out.count(f.name)) {
      plan.held_out_families.push_back(f.name);
    } else if (meta_ood.empty() || meta_ood.count(f.name)) {
      plan.meta_ood_families.push_back(f.name);
    } else {
      plan.unused_families.push_back(f.name);
    }
  }
  for (auto* v : {&plan.normal_families, &plan.meta_ood_families, &plan.held_out_families, &plan.unused_families}) {
    std::sort(v->begin(), v->end());
  }
  if (plan.meta_ood_families.empty()) {
    throw DisjointnessError("split plan: held-out set leaves no meta-OOD family");
  }
  plan.validate();
  return plan;
}

// ---------------------------------------------------------------------------
// row pools

std::vector<std::size_t> RowPools::gather(const std::map<std::string, std::vector<std::size_t>>& pool,
                                          std::span<const std::string> families) const {
  std::vector<std::size_t> out;
  for (const auto& f : families) {
    auto it = pool.find(f);
    if (it != pool.end()) out.insert(out.end(), it->second.begin(), it->second.end());
  }
  return out;
}

RowPools reserve_rows(const FamilyDataset& ds, const SplitPlan& plan, std::uint64_t seed) {
  plan.validate();
  RowPools pools;
  const Rng base = Rng(seed).substream(stream::kSplit);
  auto split_family = [&](const std::string& name, bool trainable) {
    auto rows = ds.rows_of_family(name);
    if (rows.empty()) throw DataError("family '" + name + "' has no rows");
    Rng rng = base.substream(stream::kSplit, ds.family_index(name));
    rng.shuffle(rows);
    const auto n = rows.size();
    auto n_val = static_cast<std::size_t>(std::llround(plan.validation_fraction * static_cast<double>(n)));
    auto n_test = trainable ? static_cast<std::size_t>(std::llround(plan.test_fraction * static_cast<double>(n)))
                            : n - std::min(n, n_val);
    n_val = std::min(n_val, n);
    n_test = std::min(n_test, n - n_val);
    auto it = rows.begin();
    pools.validation[name].assign(it, it + static_cast<std::ptrdiff_t>(n_val));
    it += static_cast<std::ptrdiff_t>(n_val);
    pools.test[name].assign(it, it + static_cast<std::ptrdiff_t>(n_test));
    it += static_cast<std::ptrdiff_t>(n_test);
    if (trainable) {
      pools.train[name].assign(it, rows.end());
      if (pools.train[name].empty()) throw DataError("family '" + name + "' has no training rows after the split");
    }
  };
  for (const auto& f : plan.normal_families) split_family(f, true);
  for (const auto& f : plan.meta_ood_families) split_family(f, true);
  for (const auto& f : plan.held_out_families) split_family(f, false);
  return pools;
}

EvaluationPools build_evaluation_pools(const FamilyDataset& ds, const SplitPlan& plan, const RowPools& pools,
                                       std::uint64_t seed) {
  auto make = [&](const std::map<std::string, std::vector<std::size_t>>& normal_src,
                  const std::map<std::string, std::vector<std::size_t>>& anomaly_src,
                  const std::vector<std::string>& anomaly_families, std::uint64_t salt) {
    auto rows = pools.gather(normal_src, plan.normal_families);
    const auto anomalies = pools.gather(anomaly_src, anomaly_families);
    if (anomalies.empty()) return std::vector<std::size_t>{};
    rows.insert(rows.end(), anomalies.begin(), anomalies.end());
    return balance_pool(ds, rows, splitmix64(seed + salt));
  };
  EvaluationPools out;
  out.validation = make(pools.validation, pools.validation, plan.meta_ood_families, 1);
  out.meta_test = make(pools.test, pools.test, plan.meta_ood_families, 2);
  out.heldout_test = make(pools.test, pools.test, plan.held_out_families, 3);
  out.heldout_val = make(pools.validation, pools.validation, plan.held_out_families, 4);
  return out;
}

// ---------------------------------------------------------------------------
// curriculum

std::string to_string(HardOodMode mode) {
  switch (mode) {
    case HardOodMode::kOff: return "off";
    case HardOodMode::kErrorRanked: return "error-ranked";
    case HardOodMode::kDistanceRanked: return "distance-ranked";
  }
  return "off";
}

HardOodMode parse_hard_ood_mode(const std::string& text) {
  if (text == "off") return HardOodMode::kOff;
  if (text == "error-ranked") return HardOodMode::kErrorRanked;
  if (text == "distance-ranked") return HardOodMode::kDistanceRanked;
  throw ConfigError("unknown hard-OOD mode '" + text + "' (off, error-ranked, distance-ranked)");
}

std::vector<std::size_t> expand_schedule(std::span<const std::size_t> stages, std::size_t episodes) {
  if (stages.empty()) throw ConfigError("schedule: no values");
  if (stages.size() == episodes) return {stages.begin(), stages.end()};
  if (stages.size() > episodes) throw ConfigError("schedule: more stages than episodes");
  std::vector<std::size_t> out(episodes);
  for (std::size_t e = 0; e < episodes; ++e) out[e] = stages[e * stages.size() / episodes];
  return out;
}

void CurriculumConfig::validate(const SplitPlan& plan) const {
  if (total_episodes == 0) throw ConfigError("curriculum: total_episodes must be >= 1");
  if (ood_family_schedule.size() != total_episodes || shot_schedule.size() != total_episodes) {
    throw ConfigError("curriculum: schedules must have one entry per episode");
  }
  for (std::size_t e = 0; e < total_episodes; ++e) {
    if (ood_family_schedule[e] == 0 || shot_schedule[e] == 0) {
      throw ConfigError("curriculum: family and shot counts must be >= 1");
    }
    if (ood_family_schedule[e] > plan.meta_ood_families.size()) {
      throw ConfigError("curriculum: episode " + std::to_string(e) + " asks for " +
                        std::to_string(ood_family_schedule[e]) + " meta-OOD families but only " +
                        std::to_string(plan.meta_ood_families.size()) + " exist");
    }
    if (e > 0 && (ood_family_schedule[e] < ood_family_schedule[e - 1] || shot_schedule[e] < shot_schedule[e - 1])) {
      throw ConfigError("curriculum: schedules must be non-decreasing");
    }
  }
}

CurriculumConfig CurriculumConfig::constant(std::size_t episodes, std::size_t families, std::size_t shots,
                                            HardOodMode mode) {
  CurriculumConfig c;
  c.total_episodes = episodes;
  c.ood_family_schedule.assign(episodes, families);
  c.shot_schedule.assign(episodes, shots);
  c.hard_ood_mode = mode;
  return c;
}

// ---------------------------------------------------------------------------
// episodes

std::vector<std::size_t> EpisodeSpec::outer_query() const {
  std::vector<std::size_t> out = query_id;
  out.insert(out.end(), query_ood.begin(), query_ood.end());
  return out;
}

EpisodeSpec sample_episode(const SplitPlan& plan, const RowPools& pools, const CurriculumConfig& cur,
                           std::size_t e, std::uint64_t seed, std::span<const std::string> ood_families,
                           const SamplerConfig& sampler) {
  if (e >= cur.total_episodes) throw ParameterError("sample_episode: episode index beyond the schedule");
  if (ood_families.size() != cur.ood_family_schedule[e]) {
    throw ParameterError("sample_episode: family count does not match the schedule");
  }
  EpisodeSpec ep;
  ep.index = e;
  ep.seed = seed;
  ep.shots = cur.shot_schedule[e];
  ep.ood_families.assign(ood_families.begin(), ood_families.end());
  ep.id_families = plan.normal_families;
  if (cur.vary_id_families && ep.id_families.size() >= 2) {
    ep.id_families.erase(ep.id_families.begin() + static_cast<std::ptrdiff_t>(e % ep.id_families.size()));
  }

  Rng rng = Rng(seed).substream(stream::kEpisode, e);
  for (const auto& f : ep.ood_families) {
    if (!contains(plan.meta_ood_families, f)) {
      throw LeakageError("episode " + std::to_string(e) + " requested non-meta-OOD family '" + f + "'");
    }
    const auto& rows = pools.train.at(f);
    bool replaced = false;
    for (std::size_t i : rng.sample_indices(rows.size(), ep.shots, &replaced)) ep.query_ood.push_back(rows[i]);
    if (replaced) {
      ep.warnings.push_back("family '" + f + "' has " + std::to_string(rows.size()) + " training rows for " +
                            std::to_string(ep.shots) + " shots; sampled with replacement");
    }
  }

  auto id_rows = pools.gather(pools.train, ep.id_families);
  const std::size_t q = ep.query_ood.size();
  if (id_rows.size() <= q) {
    throw DataError("episode " + std::to_string(e) + ": " + std::to_string(id_rows.size()) +
                    " ID training rows cannot cover a query of " + std::to_string(q) + " plus support");
  }
  rng.shuffle(id_rows);
  ep.query_id.assign(id_rows.begin(), id_rows.begin() + static_cast<std::ptrdiff_t>(q));
  const std::size_t support = std::min(sampler.inner_steps * sampler.batch_size, id_rows.size() - q);
  ep.inner_support.assign(id_rows.begin() + static_cast<std::ptrdiff_t>(q),
                          id_rows.begin() + static_cast<std::ptrdiff_t>(q + support));
  return ep;
}

// ---------------------------------------------------------------------------
// hardness

std::vector<std::string> rank_by_distance(const FamilyDataset& ds, const SplitPlan& plan, const RowPools& pools) {
  const std::size_t d = ds.dims();
  auto mean_of = [&](std::span<const std::size_t> rows) {
    std::vector<double> m(d, 0.0);
    for (std::size_t r : rows) {
      for (std::size_t j = 0; j < d; ++j) m[j] += ds.features(r, j);
    }
    for (double& v : m) v /= static_cast<double>(rows.size());
    return m;
  };
  const auto normal_rows = pools.gather(pools.train, plan.normal_families);
  if (normal_rows.empty()) throw DataError("rank_by_distance: no normal training rows");
  const auto centre = mean_of(normal_rows);
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& f : plan.meta_ood_families) {
    const auto m = mean_of(pools.train.at(f));
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (m[j] - centre[j]) * (m[j] - centre[j]);
    scored.emplace_back(std::sqrt(s), f);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (auto& [dist, name] : scored) out.push_back(name);
  return out;
}

std::vector<std::string> rank_by_error(const SplitPlan& plan, const std::map<std::string, double>& mean_confidence) {
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& f : plan.meta_ood_families) {
    auto it = mean_confidence.find(f);
    if (it == mean_confidence.end()) throw ParameterError("rank_by_error: no score for family '" + f + "'");
    scored.emplace_back(-it->second, f);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (auto& [neg, name] : scored) out.push_back(name);
  return out;
}

FamilyRotation::FamilyRotation(std::vector<std::string> families) : families_(std::move(families)) {
  std::sort(families_.begin(), families_.end());
  if (families_.empty()) throw ParameterError("FamilyRotation: no families");
}

std::size_t FamilyRotation::period(std::size_t k) const {
  if (k == 0) throw ParameterError("FamilyRotation: k must be positive");
  return (families_.size() + k - 1) / k;
}

std::vector<std::string> FamilyRotation::select(std::size_t e, std::size_t k,
                                                std::span<const std::string> ranking) const {
  if (k == 0 || k > families_.size()) throw ParameterError("FamilyRotation: bad family count");
  std::vector<std::string> order(ranking.begin(), ranking.end());
  if (order.empty()) order = families_;
  auto rank_of = [&](const std::string& f) {
    return static_cast<std::size_t>(std::find(order.begin(), order.end(), f) - order.begin());
  };
  auto due_of = [&](std::size_t i) -> std::size_t {
    if (!started_) return i / k;
    return due_.at(families_[i]);
  };
  std::vector<std::tuple<std::size_t, std::size_t, std::string>> due;
  for (std::size_t i = 0; i < families_.size(); ++i) {
    if (due_of(i) <= e) due.emplace_back(due_of(i), rank_of(families_[i]), families_[i]);
  }
  std::sort(due.begin(), due.end());
  std::vector<std::string> chosen;
  for (const auto& [when, rank, name] : due) {
    if (chosen.size() == k) break;
    chosen.push_back(name);
  }
  for (const auto& f : order) {
    if (chosen.size() == k) break;
    if (!contains(chosen, f)) chosen.push_back(f);
  }
  std::sort(chosen.begin(), chosen.end(), [&](const auto& a, const auto& b) { return rank_of(a) < rank_of(b); });
  return chosen;
}

void FamilyRotation::record(std::size_t e, std::span<const std::string> selected, std::size_t k) {
  if (!started_) {
    for (std::size_t i = 0; i < families_.size(); ++i) due_[families_[i]] = i / k;
    started_ = true;
  }
  for (const auto& f : selected) due_.at(f) = e + period(k);
}

void check_leakage(const FamilyDataset& ds, const SplitPlan& plan, const RowPools& pools,
                   std::span<const EpisodeSpec> episodes) {
  plan.validate();
  std::vector<char> reserved(ds.rows(), 0);
  for (const auto* pool : {&pools.validation, &pools.test}) {
    for (const auto& [name, rows] : *pool) {
      for (std::size_t r : rows) reserved[r] = 1;
    }
  }
  for (const auto& ep : episodes) {
    auto check = [&](std::span<const std::size_t> rows, const char* where) {
      for (std::size_t r : rows) {
        if (r >= ds.rows()) throw LeakageError("episode row index out of range");
        const auto& fam = ds.family(r).name;
        if (plan.is_held_out(fam)) {
          throw LeakageError("episode " + std::to_string(ep.index) + " " + where + " contains held-out family '" +
                             fam + "' (row " + std::to_string(r) + ")");
        }
        if (reserved[r]) {
          throw LeakageError("episode " + std::to_string(ep.index) + " " + where + " contains evaluation row " +
                             std::to_string(r));
        }
      }
    };
    check(ep.inner_support, "inner support");
    check(ep.query_id, "outer query");
    check(ep.query_ood, "outer query");
  }
}

// ---------------------------------------------------------------------------
// manifest

void write_manifest(std::ostream& out, const ManifestHeader& header, std::span<const EpisodeSpec> episodes) {
  nlohmann::ordered_json h;
  h["type"] = "header";
  h["format"] = "mdml-episodes/1";
  h["config_digest"] = header.config_digest;
  h["seed"] = header.seed;
  out << h.dump() << '\n';
  for (const auto& ep : episodes) {
    nlohmann::ordered_json j;
    j["type"] = "episode";
    j["episode"] = ep.index;
    j["seed"] = ep.seed;
    j["id_families"] = ep.id_families;
    j["ood_families"] = ep.ood_families;
    j["shots"] = ep.shots;
    j["inner_support"] = ep.inner_support;
    j["query_id"] = ep.query_id;
    j["query_ood"] = ep.query_ood;
    j["warnings"] = ep.warnings;
    out << j.dump() << '\n';
  }
}

std::vector<EpisodeSpec> read_manifest(std::istream& in, ManifestHeader* header) {
  std::vector<EpisodeSpec> out;
  std::string line;
  std::size_t line_no = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "header") {
        seen_header = true;
        if (header) {
          header->config_digest = j.at("config_digest").get<std::string>();
          header->seed = j.at("seed").get<std::uint64_t>();
        }
        continue;
      }
      EpisodeSpec ep;
      ep.index = j.at("episode").get<std::size_t>();
      ep.seed = j.at("seed").get<std::uint64_t>();
      ep.id_families = j.at("id_families").get<std::vector<std::string>>();
      ep.ood_families = j.at("ood_families").get<std::vector<std::string>>();
      ep.shots = j.at("shots").get<std::size_t>();
      ep.inner_support = j.at("inner_support").get<std::vector<std::size_t>>();
      ep.query_id = j.at("query_id").get<std::vector<std::size_t>>();
      ep.query_ood = j.at("query_ood").get<std::vector<std::size_t>>();
      ep.warnings = j.at("warnings").get<std::vector<std::string>>();
      out.push_back(std::move(ep));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!seen_header) throw DataError("manifest: missing header record");
  return out;
}

std::vector<EpisodeSpec> read_manifest(const std::filesystem::path& path, ManifestHeader* header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  return read_manifest(in, header);
}

}  // namespace mdml
