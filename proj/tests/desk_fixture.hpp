#pragma once

#include "hijackfl/scenarios.hpp"

namespace hijackfl::testkit {

using namespace experiment;

/// Default desk-scale task trained once per test binary, with the global
/// model kept at the configured hijack round and at the end.
struct DeskRun {
  config::ExperimentConfig cfg;
  TaskData data;
  nn::Parameters snapshot;
  nn::Parameters final_model;
  std::vector<fl::RoundLog> logs;
};

inline const DeskRun& desk_run() {
  static const DeskRun run = [] {
    DeskRun r;
    r.cfg.scenario = "hijackfl";
    r.data = build_task_data(r.cfg);
    auto s = train_with_snapshots(r.cfg, r.data, r.cfg.seed, {r.cfg.hijack_round});
    r.snapshot = s.snapshots.at(r.cfg.hijack_round);
    r.final_model = s.training.final_params;
    r.logs = s.training.logs;
    return r;
  }();
  return run;
}

/// Offline attack artifacts on the desk snapshot with the default attack seed.
inline const attack::HijackArtifacts& desk_artifacts() {
  static const attack::HijackArtifacts a = [] {
    const auto& r = desk_run();
    return attack::run_offline_attack(r.snapshot, r.data.hijack_train, r.cfg.attack, attack::MappingKind::greedy,
                                      static_cast<std::int64_t>(r.cfg.hijack_round));
  }();
  return a;
}

}  // namespace hijackfl::testkit
