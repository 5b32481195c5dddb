// hijackfl: command-line front end for the experiment scenarios.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "hijackfl/config.hpp"
#include "hijackfl/features.hpp"
#include "hijackfl/report.hpp"
#include "hijackfl/scenarios.hpp"

namespace fs = std::filesystem;
using namespace hijackfl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

config::ExperimentConfig load(const std::string& path, const std::string& output) {
  auto cfg = config::load_config(path);
  if (!output.empty()) cfg.output_dir = output;
  return cfg;
}

fs::path out_dir(const config::ExperimentConfig& cfg, const std::string& explicit_dir) {
  return explicit_dir.empty() ? report::resolve_output_dir(cfg.output_dir) : fs::path(explicit_dir);
}

void print_summary(const experiment::ScenarioResult& r) {
  for (const auto& rec : r.records) {
    if (rec.round != "final") continue;
    std::cout << rec.method;
    if (rec.utility) std::cout << " utility=" << report::fmt(*rec.utility);
    if (rec.asr) std::cout << " asr=" << report::fmt(*rec.asr);
    for (const auto& [k, v] : rec.extras) std::cout << " " << k << "=" << v;
    std::cout << "\n";
  }
  std::cout << "outputs written to " << r.output_dir.string() << "\n";
}

int cmd_run(const std::string& path, const std::string& output) {
  const auto cfg = load(path, output);
  print_summary(experiment::run_scenario(cfg, out_dir(cfg, output)));
  return 0;
}

int cmd_calibrate(const std::string& path, const std::string& output) {
  const auto cfg = load(path, output);
  const auto dir = out_dir(cfg, output);
  const auto d = experiment::build_task_data(cfg);
  const auto run = experiment::train_with_snapshots(cfg, d, cfg.seed, {cfg.hijack_round});
  const auto o = experiment::attack_at(run.snapshots.at(cfg.hijack_round), run.training.final_params, d.hijack_train,
                                       d.hijack_test, cfg.attack, cfg.mapping, cfg.hijack_round);
  const auto s = experiment::defense_study(cfg, d, run.training.final_params, o.artifacts.cloaks);
  report::write_file(dir / "calibration.csv", [&](std::ostream& os) {
    os << "defense,setting,threshold,calibration_detection_rate,calibration_fpr,asr,utility,detection_rate,fpr\n";
    auto row = [&](const char* def, const char* setting, double thr, std::optional<double> cdet,
                   std::optional<double> cfpr, const defenses::DefenseReport& r) {
      os << def << "," << setting << "," << report::fmt(thr) << "," << (cdet ? report::fmt(*cdet) : "") << ","
         << (cfpr ? report::fmt(*cfpr) : "") << "," << report::fmt(r.asr) << "," << report::fmt(r.utility) << ","
         << report::fmt(r.detection_rate) << "," << report::fmt(r.fpr) << "\n";
    };
    row("anomaly", "calibrated", s.anomaly.tau, s.anomaly.detection_rate, s.anomaly.fpr, s.anomaly_report);
    row("squeeze", "low", s.squeeze.low, std::nullopt, std::nullopt, s.squeeze_low);
    row("squeeze", "high", s.squeeze.high, std::nullopt, std::nullopt, s.squeeze_high);
  });
  std::cout << "anomaly tau=" << report::fmt(s.anomaly.tau) << " detection=" << report::fmt(s.anomaly_report.detection_rate)
            << " fpr=" << report::fmt(s.anomaly_report.fpr) << "\n"
            << "squeeze low=" << report::fmt(s.squeeze.low) << " fpr=" << report::fmt(s.squeeze_low.fpr)
            << " asr=" << report::fmt(s.squeeze_low.asr) << "\n"
            << "squeeze high=" << report::fmt(s.squeeze.high) << " fpr=" << report::fmt(s.squeeze_high.fpr)
            << " asr=" << report::fmt(s.squeeze_high.asr) << "\n"
            << "written " << (dir / "calibration.csv").string() << "\n";
  return 0;
}

int cmd_export(const std::string& path, const std::string& output, const std::string& model_path,
               const std::string& cloak_path) {
  const auto cfg = load(path, output);
  const auto dir = out_dir(cfg, output);
  const auto d = experiment::build_task_data(cfg);
  nn::Parameters model;
  attack::CloakSet cloaks;
  if (!model_path.empty() && !cloak_path.empty()) {
    model = nn::load_checkpoint(model_path);
    cloaks = attack::load_cloaks(cloak_path);
  } else if (model_path.empty() && cloak_path.empty()) {
    const auto run = experiment::train_with_snapshots(cfg, d, cfg.seed, {cfg.hijack_round});
    model = run.training.final_params;
    cloaks = attack::run_offline_attack(run.snapshots.at(cfg.hijack_round), d.hijack_train, cfg.attack, cfg.mapping,
                                        static_cast<std::int64_t>(cfg.hijack_round))
                 .cloaks;
  } else {
    throw ConfigError("--model and --cloaks must be given together");
  }
  const auto proj = features::export_features(model, experiment::feature_groups(d, cloaks));
  report::write_file(dir / "features.csv", [&](std::ostream& os) { features::write_features_csv(os, proj.points); });
  report::write_file(dir / "plots/features.svg", [&](std::ostream& os) {
    report::write_scatter_plot(os, "Feature projection (PCA)", features::scatter_series(proj.points));
  });
  std::cout << "variance pc1=" << report::fmt(proj.variance1) << " pc2=" << report::fmt(proj.variance2) << "\n"
            << "written " << (dir / "features.csv").string() << "\n";
  return 0;
}

int cmd_validate(const std::string& path, bool print) {
  const auto cfg = config::load_config(path);
  if (print) std::cout << config::serialize(cfg);
  std::cout << "config ok: scenario " << cfg.scenario << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HijackFL lab: federated-learning model-hijacking experiments"};
  app.require_subcommand(1);
  app.footer("Config keys and defaults:\n" + config::reference() +
             "\nHIJACKFL_OUTPUT_DIR overrides scenario.output_dir.\nExit codes: 0 success, 2 config error, 3 runtime error.");

  std::string config_path, output, model_path, cloak_path;
  bool print = false;

  auto* run = app.add_subcommand("run", "run the configured scenario");
  run->add_option("-c,--config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--output", output, "output directory (overrides config and environment)");

  auto* cal = app.add_subcommand("calibrate", "calibrate the defense thresholds and write calibration.csv");
  cal->add_option("-c,--config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
  cal->add_option("-o,--output", output, "output directory");

  auto* exp = app.add_subcommand("export-features", "write a PCA-2D feature export and scatter plot");
  exp->add_option("-c,--config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
  exp->add_option("-o,--output", output, "output directory");
  exp->add_option("--model", model_path, "checkpoint of the model to project with")->check(CLI::ExistingFile);
  exp->add_option("--cloaks", cloak_path, "cloak file to apply")->check(CLI::ExistingFile);

  auto* val = app.add_subcommand("validate-config", "parse and validate a config file");
  val->add_option("-c,--config", config_path, "experiment config file")->required();
  val->add_flag("-p,--print", print, "print the normalized config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, output);
    if (*cal) return cmd_calibrate(config_path, output);
    if (*exp) return cmd_export(config_path, output, model_path, cloak_path);
    if (*val) return cmd_validate(config_path, print);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << (e.field.empty() ? "" : " [" + e.field + "]") << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
