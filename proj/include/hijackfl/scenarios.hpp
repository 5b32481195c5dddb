#pragma once

// Scenario orchestration: builds the task pair, runs FL with the requested
// attack or ablation, and writes metrics, round logs, checkpoints, cloaks,
// feature exports, plots and a manifest into the output directory.
//
// Data files are byte-reproducible for a given configuration. Wall-clock
// information lives in manifest.json and in the duration_ms column of
// rounds.csv.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hijackfl/attack.hpp"
#include "hijackfl/baselines.hpp"
#include "hijackfl/config.hpp"
#include "hijackfl/data.hpp"
#include "hijackfl/defenses.hpp"
#include "hijackfl/features.hpp"
#include "hijackfl/fl.hpp"
#include "hijackfl/model.hpp"
#include "hijackfl/report.hpp"

#include "json.hpp"

namespace hijackfl::experiment {

namespace fs = std::filesystem;
using config::ExperimentConfig;
using report::MetricsRecord;

// ---------------------------------------------------------------------------
// Task data

struct TaskData {
  data::LabeledDataset original_train, original_test;
  data::LabeledDataset hijack_train, hijack_test;
  data::ClientPartition partition;
  nn::ModelSpec spec;
};

/// Hijacking dataset with `classes` classes kept from the source task,
/// replicated to three channels.
inline data::LabeledDataset hijack_dataset(const config::TaskPairConfig& t, std::size_t classes) {
  return data::replicate_channels(
      data::select_classes(data::synthesize_task(t.hijack_source), classes, t.hijack_select_seed));
}

inline TaskData build_task_data(const ExperimentConfig& c, std::optional<std::size_t> hijack_classes = std::nullopt) {
  const auto& t = c.task;
  TaskData d;
  auto o = data::train_test_split(data::synthesize_task(t.original), t.original_test_fraction, t.split_seed);
  d.original_train = std::move(o.train);
  d.original_test = std::move(o.test);
  auto h = data::train_test_split(hijack_dataset(t, hijack_classes.value_or(t.hijack_classes)),
                                  t.hijack_test_fraction, t.split_seed + 1);
  d.hijack_train = std::move(h.train);
  d.hijack_test = std::move(h.test);
  d.partition = data::partition_iid(d.original_train, c.fl.n, t.partition_seed);
  d.spec = nn::ModelSpec{d.original_train.dim(), {256, 128}, t.original.num_classes};
  d.spec.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Output collection

class Outputs {
 public:
  Outputs(fs::path dir, const ExperimentConfig& cfg) : dir_(std::move(dir)), cfg_(cfg) {
    fs::create_directories(dir_);
    started_ = report::utc_timestamp();
    t0_ = std::chrono::steady_clock::now();
  }

  const fs::path& dir() const { return dir_; }
  std::vector<MetricsRecord>& records() { return records_; }

  MetricsRecord& add(MetricsRecord r) {
    r.scenario = cfg_.scenario;
    records_.push_back(std::move(r));
    return records_.back();
  }

  void round_rows(const std::string& method, std::uint64_t seed, const std::vector<fl::RoundLog>& logs) {
    fl::write_round_log_csv(rounds_, method, logs);
    for (const auto& l : logs) add(MetricsRecord{"", method, seed, std::to_string(l.round), l.utility, {}, {}});
  }

  template <class F>
  void file(const std::string& rel, F&& writer) {
    report::write_file(dir_ / rel, writer);
    files_.push_back(rel);
  }

  void checkpoint(const std::string& rel, const nn::Parameters& p) {
    file(rel, [&](std::ostream& os) { nn::write_checkpoint(os, p); });
  }
  void cloaks(const std::string& rel, const attack::CloakSet& c) {
    file(rel, [&](std::ostream& os) { attack::write_cloaks(os, c); });
  }

  void timing(const std::string& stage, double ms) { timings_[stage] += ms; }

  /// Writes metrics.csv, rounds.csv and manifest.json.
  void finish() {
    file("metrics.csv", [&](std::ostream& os) { report::write_metrics_csv(os, records_); });
    if (!rounds_.str().empty())
      file("rounds.csv", [&](std::ostream& os) {
        fl::write_round_log_header(os);
        os << rounds_.str();
      });
    nlohmann::json m;
    m["scenario"] = cfg_.scenario;
    m["seed"] = cfg_.seed;
    m["started_utc"] = started_;
    m["finished_utc"] = report::utc_timestamp();
    m["elapsed_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_).count();
    m["metrics_schema_version"] = report::kMetricsSchemaVersion;
    m["config"] = config::serialize(cfg_);
    m["files"] = files_;
    m["stage_ms"] = timings_;
    report::write_file(dir_ / "manifest.json", [&](std::ostream& os) { os << m.dump(2) << "\n"; });
  }

 private:
  fs::path dir_;
  const ExperimentConfig& cfg_;
  std::vector<MetricsRecord> records_;
  std::ostringstream rounds_;
  std::vector<std::string> files_;
  std::map<std::string, double> timings_;
  std::string started_;
  std::chrono::steady_clock::time_point t0_;
};

template <class F>
auto timed(Outputs& out, const std::string& stage, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  if constexpr (std::is_void_v<decltype(f())>) {
    f();
    out.timing(stage, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  } else {
    auto r = f();
    out.timing(stage, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    return r;
  }
}

// ---------------------------------------------------------------------------
// Building blocks

inline fl::FLConfig fl_for_seed(const ExperimentConfig& c, std::uint64_t seed) {
  fl::FLConfig f = c.fl;
  f.master_seed = seed;
  return f;
}

struct SnapshotRun {
  fl::TrainingResult training;
  std::map<std::size_t, nn::Parameters> snapshots;
};

/// Honest FedSGD that records the global model at each of `rounds`.
inline SnapshotRun train_with_snapshots(const ExperimentConfig& c, const TaskData& d, std::uint64_t seed,
                                        const std::vector<std::size_t>& rounds) {
  SnapshotRun run;
  fl::Hooks hooks;
  for (auto r : std::set<std::size_t>(rounds.begin(), rounds.end()))
    hooks.snapshots.push_back({r, [&run](const fl::GlobalState& s) { run.snapshots.emplace(s.round, s.params); }});
  const auto cfg = fl_for_seed(c, seed);
  run.training = fl::run_training(cfg, d.partition, d.original_train, d.original_test,
                                  nn::init_model(d.spec, seed), hooks);
  return run;
}

inline fl::TrainingResult train_clean(const ExperimentConfig& c, const TaskData& d, std::uint64_t seed) {
  return train_with_snapshots(c, d, seed, {}).training;
}

inline std::string mapping_string(const attack::ClassMapping& m) {
  std::string s;
  for (std::size_t h = 0; h < m.forward.size(); ++h) s += (h ? ";" : "") + std::to_string(m.forward[h]);
  return s;
}

/// Rounds after `injection` until utility is back within `tolerance` of the
/// pre-injection level; nullopt when it never recovers.
struct Fluctuation {
  double before = 0.0;
  double after = 0.0;
  double drop = 0.0;
  std::optional<std::size_t> recovery_rounds;
};

inline Fluctuation fluctuation(const std::vector<fl::RoundLog>& logs, std::size_t injection, double tolerance = 0.02) {
  if (injection == 0 || injection >= logs.size())
    throw InvalidArgument("fluctuation: injection round must have a predecessor and lie inside the log");
  Fluctuation f;
  f.before = logs[injection - 1].utility;
  f.after = logs[injection].utility;
  f.drop = f.before - f.after;
  for (std::size_t r = injection + 1; r < logs.size(); ++r)
    if (logs[r].utility >= f.before - tolerance) {
      f.recovery_rounds = r - injection;
      break;
    }
  return f;
}

inline double max_deviation(const std::vector<fl::RoundLog>& a, const std::vector<fl::RoundLog>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i].utility - b[i].utility));
  return m;
}

inline std::vector<report::Series> utility_series(
    const std::vector<std::pair<std::string, const std::vector<fl::RoundLog>*>>& runs) {
  std::vector<report::Series> out;
  for (const auto& [name, logs] : runs) {
    report::Series s{name, {}, {}};
    for (const auto& l : *logs) {
      s.x.push_back(static_cast<double>(l.round));
      s.y.push_back(l.utility);
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Feature-export groups: original test samples, uncloaked hijacking test
/// samples, and the same samples cloaked with their own class's cloak.
inline std::vector<features::FeatureGroup> feature_groups(const TaskData& d, const attack::CloakSet& cloaks) {
  Tensor cloaked = d.hijack_test.all_samples();
  const std::size_t dim = cloaked.cols();
  for (std::size_t i = 0; i < d.hijack_test.size(); ++i) {
    auto row = attack::apply_cloak(d.hijack_test.sample(i), cloaks.cloak_for(d.hijack_test.labels[i]), cloaks.alpha);
    std::copy(row.begin(), row.end(), cloaked.values.begin() + static_cast<std::ptrdiff_t>(i * dim));
  }
  return {{"original", d.original_test.all_samples()}, {"hijack", d.hijack_test.all_samples()}, {"cloaked", cloaked}};
}

inline void export_feature_files(Outputs& out, const nn::Parameters& model, const TaskData& d,
                                 const attack::CloakSet& cloaks) {
  const auto proj = features::export_features(model, feature_groups(d, cloaks));
  out.file("features.csv", [&](std::ostream& os) { features::write_features_csv(os, proj.points); });
  out.file("plots/features.svg", [&](std::ostream& os) {
    report::write_scatter_plot(os, "Feature projection (PCA)", features::scatter_series(proj.points));
  });
}

struct AttackOutcome {
  attack::HijackArtifacts artifacts;
  double asr = 0.0;
  double uncloaked_asr = 0.0;
};

inline AttackOutcome attack_at(const nn::Parameters& snapshot, const nn::Parameters& final_model,
                               const data::LabeledDataset& hijack_train, const data::LabeledDataset& hijack_test,
                               const attack::AttackConfig& ac, attack::MappingKind kind, std::size_t round) {
  AttackOutcome o;
  o.artifacts = attack::run_offline_attack(snapshot, hijack_train, ac, kind, static_cast<std::int64_t>(round));
  o.asr = attack::evaluate_asr(final_model, hijack_test, o.artifacts.cloaks);
  o.uncloaked_asr = attack::evaluate_uncloaked_asr(final_model, hijack_test, o.artifacts.mapping);
  return o;
}

inline baselines::BaselineResult run_baseline(const ExperimentConfig& c, const TaskData& d,
                                              baselines::BaselineKind kind, std::uint64_t seed) {
  const auto cfg = fl_for_seed(c, seed);
  baselines::BaselineSetup setup;
  setup.kind = kind;
  setup.hijack_round = c.hijack_round;
  setup.replacement = baselines::ReplacementConfig::for_fl(cfg);
  setup.seed = c.attack.seed;
  return baselines::run_baseline_attack(cfg, d.partition, d.original_train, d.original_test,
                                        nn::init_model(d.spec, seed), d.hijack_train, setup);
}

// ---------------------------------------------------------------------------
// Scenarios

namespace scenarios {

inline void clean(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto run = timed(out, "train", [&] { return train_clean(c, d, c.seed); });
  out.round_rows("clean", c.seed, run.logs);
  out.add(MetricsRecord{"", "clean", c.seed, "final", run.logs.back().utility, {}, {}});
  out.checkpoint("checkpoints/clean_final.hjck", run.final_params);
  out.file("plots/utility.svg", [&](std::ostream& os) {
    report::write_line_plot(os, "Clean training", "round", "utility", utility_series({{"clean", &run.logs}}));
  });
}

inline void hijackfl(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto run = timed(out, "train", [&] { return train_with_snapshots(c, d, c.seed, {c.hijack_round}); });
  const auto clean_run = timed(out, "train_clean", [&] { return train_clean(c, d, c.seed); });
  const auto& snap = run.snapshots.at(c.hijack_round);
  const auto& final_model = run.training.final_params;
  const auto o = timed(out, "attack", [&] {
    return attack_at(snap, final_model, d.hijack_train, d.hijack_test, c.attack, c.mapping, c.hijack_round);
  });
  out.round_rows("hijackfl", c.seed, run.training.logs);
  out.add(MetricsRecord{"", "clean", c.seed, "final", clean_run.logs.back().utility, {}, {}});
  out.add(MetricsRecord{"", "hijackfl", c.seed, "final", run.training.logs.back().utility, o.asr, {}})
      .extra("uncloaked_asr", o.uncloaked_asr)
      .extra("hijack_round", std::to_string(c.hijack_round))
      .extra("mapping", mapping_string(o.artifacts.mapping))
      .extra("params_identical_to_clean", final_model.same_values(clean_run.final_params) ? "true" : "false");
  out.checkpoint("checkpoints/hijackfl_final.hjck", final_model);
  out.checkpoint("checkpoints/snapshot_r" + std::to_string(c.hijack_round) + ".hjck", snap);
  out.cloaks("cloaks/hijackfl_r" + std::to_string(c.hijack_round) + ".hjcl", o.artifacts.cloaks);
  export_feature_files(out, final_model, d, o.artifacts.cloaks);
}

inline void baseline(const ExperimentConfig& c, const TaskData& d, Outputs& out, baselines::BaselineKind kind) {
  const std::string method = baselines::method_name(kind);
  const auto r = timed(out, "train", [&] { return run_baseline(c, d, kind, c.seed); });
  const auto& logs = r.training.logs;
  const auto f = fluctuation(logs, c.hijack_round);
  out.round_rows(method, c.seed, logs);
  out.add(MetricsRecord{"", method, c.seed, "final", logs.back().utility,
                        baselines::baseline_asr(r.training.final_params, d.hijack_test, r.mapping), {}})
      .extra("hijack_round", std::to_string(c.hijack_round))
      .extra("adversary", std::to_string(r.adversary))
      .extra("mapping", mapping_string(r.mapping))
      .extra("utility_drop", f.drop)
      .extra("recovery_rounds", f.recovery_rounds ? std::to_string(*f.recovery_rounds) : "never");
  out.checkpoint("checkpoints/" + method + "_final.hjck", r.training.final_params);
}

inline void attack_comparison(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto run = timed(out, "train", [&] { return train_with_snapshots(c, d, c.seed, {c.hijack_round}); });
  const auto o = timed(out, "attack", [&] {
    return attack_at(run.snapshots.at(c.hijack_round), run.training.final_params, d.hijack_train, d.hijack_test,
                     c.attack, c.mapping, c.hijack_round);
  });
  const double chance = 1.0 / static_cast<double>(d.hijack_test.num_classes);
  out.add(MetricsRecord{"", "clean", c.seed, "final", run.training.logs.back().utility, {}, {}})
      .extra("chance", chance);
  out.add(MetricsRecord{"", "hijackfl", c.seed, "final", run.training.logs.back().utility, o.asr, {}})
      .extra("chance", chance);
  std::vector<std::pair<std::string, fl::TrainingResult>> runs;
  for (auto kind : {baselines::BaselineKind::data_poison, baselines::BaselineKind::model_poison}) {
    const auto r = timed(out, baselines::method_name(kind), [&] { return run_baseline(c, d, kind, c.seed); });
    out.add(MetricsRecord{"", baselines::method_name(kind), c.seed, "final", r.training.logs.back().utility,
                          baselines::baseline_asr(r.training.final_params, d.hijack_test, r.mapping), {}})
        .extra("chance", chance);
    runs.emplace_back(baselines::method_name(kind), r.training);
  }
  out.cloaks("cloaks/hijackfl_r" + std::to_string(c.hijack_round) + ".hjcl", o.artifacts.cloaks);
  out.file("plots/attack_comparison.svg", [&](std::ostream& os) {
    std::vector<report::Series> s;
    const auto& recs = out.records();
    for (std::size_t i = 0; i < recs.size(); ++i)
      if (recs[i].asr) s.push_back({recs[i].method, {0.0, 1.0}, {*recs[i].asr, *recs[i].asr}});
    report::write_line_plot(os, "Final-model ASR by method", "", "ASR", s);
  });
}

inline void fluctuation_study(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto clean_run = timed(out, "train_clean", [&] { return train_clean(c, d, c.seed); });
  const auto hj = timed(out, "train_hijackfl", [&] { return train_with_snapshots(c, d, c.seed, {c.hijack_round}); });
  const auto mp = timed(out, "train_model_poison",
                        [&] { return run_baseline(c, d, baselines::BaselineKind::model_poison, c.seed); });
  out.round_rows("clean", c.seed, clean_run.logs);
  out.round_rows("hijackfl", c.seed, hj.training.logs);
  out.round_rows("model_poison_naive", c.seed, mp.training.logs);
  const auto f = fluctuation(mp.training.logs, c.hijack_round);
  out.add(MetricsRecord{"", "model_poison_naive", c.seed, "final", mp.training.logs.back().utility, {}, {}})
      .extra("injection_round", std::to_string(c.hijack_round))
      .extra("utility_before", f.before)
      .extra("utility_after", f.after)
      .extra("utility_drop", f.drop)
      .extra("recovery_rounds", f.recovery_rounds ? std::to_string(*f.recovery_rounds) : "never")
      .extra("max_deviation_from_clean", max_deviation(mp.training.logs, clean_run.logs));
  out.add(MetricsRecord{"", "hijackfl", c.seed, "final", hj.training.logs.back().utility, {}, {}})
      .extra("injection_round", std::to_string(c.hijack_round))
      .extra("max_deviation_from_clean", max_deviation(hj.training.logs, clean_run.logs));
  out.file("plots/fluctuation.svg", [&](std::ostream& os) {
    report::write_line_plot(os, "Utility around the hijacking round", "round", "utility",
                            utility_series({{"clean", &clean_run.logs},
                                            {"hijackfl", &hj.training.logs},
                                            {"model_poison_naive", &mp.training.logs}}));
  });
}

inline void class_mapping(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto run = timed(out, "train", [&] { return train_with_snapshots(c, d, c.seed, {c.hijack_round}); });
  for (auto [kind, name] : {std::pair{attack::MappingKind::greedy, "greedy"}, std::pair{attack::MappingKind::direct, "direct"}}) {
    const auto o = timed(out, std::string("attack_") + name, [&] {
      return attack_at(run.snapshots.at(c.hijack_round), run.training.final_params, d.hijack_train, d.hijack_test,
                       c.attack, kind, c.hijack_round);
    });
    out.add(MetricsRecord{"", "hijackfl", c.seed, "final", run.training.logs.back().utility, o.asr, {}})
        .extra("mapping_kind", name)
        .extra("mapping", mapping_string(o.artifacts.mapping));
    out.cloaks(std::string("cloaks/") + name + ".hjcl", o.artifacts.cloaks);
  }
}

inline void hijack_round_sweep(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto rounds = c.resolved_hijack_rounds();
  std::vector<report::Series> series;
  for (auto seed : c.grids.seeds) {
    const auto run = timed(out, "train", [&] { return train_with_snapshots(c, d, seed, rounds); });
    report::Series s{"seed " + std::to_string(seed), {}, {}};
    for (auto r : rounds) {
      const auto o = timed(out, "attack", [&] {
        return attack_at(run.snapshots.at(r), run.training.final_params, d.hijack_train, d.hijack_test, c.attack,
                         c.mapping, r);
      });
      out.add(MetricsRecord{"", "hijackfl", seed, "final", run.training.logs.back().utility, o.asr, {}})
          .extra("hijack_round", std::to_string(r))
          .extra("uncloaked_asr", o.uncloaked_asr);
      s.x.push_back(static_cast<double>(r));
      s.y.push_back(o.asr);
    }
    series.push_back(std::move(s));
  }
  out.file("plots/hijack_round.svg", [&](std::ostream& os) {
    report::write_line_plot(os, "ASR by hijacking round", "hijacking round", "ASR", series);
  });
}

inline void complexity(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto run = timed(out, "train", [&] { return train_with_snapshots(c, d, c.seed, {c.hijack_round}); });
  const auto& snap = run.snapshots.at(c.hijack_round);
  std::vector<report::Series> series;
  for (auto k : c.grids.class_counts) {
    const auto td = build_task_data(c, k);
    report::Series s{std::to_string(k) + " classes", {}, {}};
    for (auto per_class : c.grids.samples_per_class) {
      const auto train = data::take_per_class(td.hijack_train, per_class);
      const auto o = timed(out, "attack", [&] {
        return attack_at(snap, run.training.final_params, train, td.hijack_test, c.attack, c.mapping, c.hijack_round);
      });
      out.add(MetricsRecord{"", "hijackfl", c.seed, "final", run.training.logs.back().utility, o.asr, {}})
          .extra("hijack_classes", std::to_string(k))
          .extra("samples_per_class", std::to_string(per_class))
          .extra("chance", 1.0 / static_cast<double>(k));
      s.x.push_back(static_cast<double>(per_class));
      s.y.push_back(o.asr);
    }
    series.push_back(std::move(s));
  }
  out.file("plots/complexity.svg", [&](std::ostream& os) {
    report::write_line_plot(os, "ASR by task complexity", "samples per class", "ASR", series);
  });
}

inline void alpha_sweep(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto run = timed(out, "train", [&] { return train_with_snapshots(c, d, c.seed, {c.hijack_round}); });
  const auto& snap = run.snapshots.at(c.hijack_round);
  const auto& final_model = run.training.final_params;
  const double utility = run.training.logs.back().utility;
  const auto freq = attack::build_frequency_matrix(snap, attack::probe_set(d.hijack_train), d.spec.num_classes);
  const auto mapping = c.mapping == attack::MappingKind::greedy
                           ? attack::greedy_class_mapping(freq, d.spec.num_classes)
                           : attack::direct_class_mapping(d.hijack_train.num_classes, d.spec.num_classes);
  const auto anchors = timed(out, "anchors", [&] { return attack::compute_mapping_anchors(snap, mapping, c.attack); });
  const double no_cloak = attack::evaluate_uncloaked_asr(final_model, d.hijack_test, mapping);
  out.add(MetricsRecord{"", "no_cloak", c.seed, "final", utility, no_cloak, {}});
  report::Series s{"hijackfl", {}, {}}, base{"no cloak", {}, {}};
  for (double a : c.grids.alphas) {
    auto ac = c.attack;
    ac.alpha = a;
    const auto cloaks = timed(out, "cloaks", [&] { return attack::compute_cloaks(snap, d.hijack_train, mapping, anchors, ac); });
    const double asr = attack::evaluate_asr(final_model, d.hijack_test, cloaks);
    out.add(MetricsRecord{"", "hijackfl", c.seed, "final", utility, asr, {}}).extra("alpha", a);
    s.x.push_back(a);
    s.y.push_back(asr);
    base.x.push_back(a);
    base.y.push_back(no_cloak);
  }
  out.file("plots/alpha_sweep.svg", [&](std::ostream& os) {
    report::write_line_plot(os, "ASR by alpha", "alpha", "ASR", {s, base});
  });
}

inline void one_cloak(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto run = timed(out, "train", [&] { return train_with_snapshots(c, d, c.seed, {c.hijack_round}); });
  const double chance = 1.0 / static_cast<double>(d.hijack_test.num_classes);
  for (bool one : {false, true}) {
    auto ac = c.attack;
    ac.one_cloak = one;
    const auto o = timed(out, one ? "one_cloak" : "multi_cloak", [&] {
      return attack_at(run.snapshots.at(c.hijack_round), run.training.final_params, d.hijack_train, d.hijack_test, ac,
                       c.mapping, c.hijack_round);
    });
    out.add(MetricsRecord{"", "hijackfl", c.seed, "final", run.training.logs.back().utility, o.asr, {}})
        .extra("cloak_mode", one ? "one" : "multi")
        .extra("chance", chance);
    out.cloaks(std::string("cloaks/") + (one ? "one" : "multi") + ".hjcl", o.artifacts.cloaks);
  }
}

}  // namespace scenarios

// ---------------------------------------------------------------------------
// Defense study (shared by the defenses scenario and the calibrate command)

struct DefenseStudy {
  defenses::AnomalyCalibration anomaly;
  defenses::SqueezeCalibration squeeze;
  double undefended_asr = 0.0;
  double undefended_utility = 0.0;
  defenses::DefenseReport anomaly_report, squeeze_low, squeeze_high;
};

/// Stratified calibration/evaluation halves of a test set.
inline data::Split calibration_split(const data::LabeledDataset& ds, double fraction, std::uint64_t seed) {
  // train = evaluation part, test = calibration part
  return data::train_test_split(ds, fraction, seed);
}

inline DefenseStudy defense_study(const ExperimentConfig& c, const TaskData& d, const nn::Parameters& final_model,
                                  const attack::CloakSet& cloaks) {
  const auto& ds = c.defense;
  const auto hij = calibration_split(d.hijack_test, ds.calibration_fraction, ds.defender_seed);
  const auto orig = calibration_split(d.original_test, ds.calibration_fraction, ds.defender_seed + 1);
  attack::AttackConfig defender = c.attack;
  defender.seed = ds.defender_seed;
  std::vector<std::size_t> all(d.spec.num_classes);
  std::iota(all.begin(), all.end(), 0);
  const auto anchors = attack::compute_anchors(final_model, all, defender);

  DefenseStudy s;
  s.anomaly = defenses::calibrate_anomaly_tau(final_model, anchors, hij.test, orig.test, cloaks, ds.anomaly_max_fpr,
                                              ds.defender_seed);
  s.squeeze = defenses::calibrate_squeeze_thresholds(final_model, ds.squeeze_bits, hij.test, orig.test, cloaks,
                                                     ds.squeeze_detect_target, ds.squeeze_benign_budget);
  s.undefended_asr = attack::evaluate_asr(final_model, hij.train, cloaks);
  s.undefended_utility = fl::accuracy(final_model, orig.train);
  s.anomaly_report = defenses::evaluate_under_defense(final_model, defenses::AnomalyConfig{anchors, s.anomaly.tau},
                                                      hij.train, orig.train, cloaks, ds.defender_seed);
  s.squeeze_low = defenses::evaluate_under_defense(
      final_model, defenses::SqueezeConfig{ds.squeeze_bits, s.squeeze.low}, hij.train, orig.train, cloaks);
  s.squeeze_high = defenses::evaluate_under_defense(
      final_model, defenses::SqueezeConfig{ds.squeeze_bits, s.squeeze.high}, hij.train, orig.train, cloaks);
  return s;
}

namespace scenarios {

inline void defense_rows(Outputs& out, std::uint64_t seed, const DefenseStudy& s) {
  out.add(MetricsRecord{"", "hijackfl", seed, "final", s.undefended_utility, s.undefended_asr, {}})
      .extra("defense", "none");
  auto row = [&](const char* defense, const char* setting, double threshold, const defenses::DefenseReport& r) {
    out.add(MetricsRecord{"", "hijackfl", seed, "final", r.utility, r.asr, {}})
        .extra("defense", defense)
        .extra("setting", setting)
        .extra("threshold", threshold)
        .extra("detection_rate", r.detection_rate)
        .extra("fpr", r.fpr);
  };
  row("anomaly", "calibrated", s.anomaly.tau, s.anomaly_report);
  row("squeeze", "low", s.squeeze.low, s.squeeze_low);
  row("squeeze", "high", s.squeeze.high, s.squeeze_high);
}

inline void defenses_scenario(const ExperimentConfig& c, const TaskData& d, Outputs& out) {
  const auto run = timed(out, "train", [&] { return train_with_snapshots(c, d, c.seed, {c.hijack_round}); });
  const auto o = timed(out, "attack", [&] {
    return attack_at(run.snapshots.at(c.hijack_round), run.training.final_params, d.hijack_train, d.hijack_test,
                     c.attack, c.mapping, c.hijack_round);
  });
  const auto s = timed(out, "defenses", [&] { return defense_study(c, d, run.training.final_params, o.artifacts.cloaks); });
  defense_rows(out, c.seed, s);
  out.cloaks("cloaks/hijackfl_r" + std::to_string(c.hijack_round) + ".hjcl", o.artifacts.cloaks);
}

}  // namespace scenarios

// ---------------------------------------------------------------------------
// Entry point

struct ScenarioResult {
  fs::path output_dir;
  std::vector<MetricsRecord> records;
};

/// Runs `c.scenario`; errors from any module are rethrown with the
/// scenario name prepended.
inline ScenarioResult run_scenario(const ExperimentConfig& c, std::optional<fs::path> dir = std::nullopt) {
  config::validate(c);
  Outputs out(dir.value_or(report::resolve_output_dir(c.output_dir)), c);
  try {
    const auto d = timed(out, "data", [&] { return build_task_data(c); });
    const auto& s = c.scenario;
    if (s == "clean") scenarios::clean(c, d, out);
    else if (s == "hijackfl") scenarios::hijackfl(c, d, out);
    else if (s == "data_poison") scenarios::baseline(c, d, out, baselines::BaselineKind::data_poison);
    else if (s == "model_poison") scenarios::baseline(c, d, out, baselines::BaselineKind::model_poison);
    else if (s == "attack_comparison") scenarios::attack_comparison(c, d, out);
    else if (s == "fluctuation") scenarios::fluctuation_study(c, d, out);
    else if (s == "class_mapping") scenarios::class_mapping(c, d, out);
    else if (s == "hijack_round") scenarios::hijack_round_sweep(c, d, out);
    else if (s == "complexity") scenarios::complexity(c, d, out);
    else if (s == "alpha_sweep") scenarios::alpha_sweep(c, d, out);
    else if (s == "one_cloak") scenarios::one_cloak(c, d, out);
    else if (s == "defenses") scenarios::defenses_scenario(c, d, out);
    out.finish();
  } catch (const Error& e) {
    throw Error("scenario " + c.scenario + ": " + e.what());
  }
  return {out.dir(), out.records()};
}

}  // namespace hijackfl::experiment
