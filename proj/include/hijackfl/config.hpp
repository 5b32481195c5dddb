#pragma once

// Experiment configuration: an INI-style file with [scenario], [fl],
// [attack], [task] and [defense] sections of `key = value` lines. `#` and
// `;` start comments. List values are comma separated.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hijackfl/attack.hpp"
#include "hijackfl/data.hpp"
#include "hijackfl/errors.hpp"
#include "hijackfl/fl.hpp"

namespace hijackfl::config {

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names{"clean",         "hijackfl",    "data_poison",  "model_poison",
                                              "attack_comparison", "fluctuation", "class_mapping", "hijack_round",
                                              "complexity",    "alpha_sweep", "one_cloak",    "defenses"};
  return names;
}

struct TaskPairConfig {
  data::TaskSpec original;
  /// Source task of the hijacking classes (one channel, replicated to three).
  data::TaskSpec hijack_source;
  std::size_t hijack_classes = 9;
  std::uint64_t hijack_select_seed = 5;
  double original_test_fraction = 0.2;
  double hijack_test_fraction = 0.25;
  std::uint64_t split_seed = 1;
  std::uint64_t partition_seed = 3;

  TaskPairConfig() {
    original.name = "original";
    original.num_classes = 10;
    original.samples_per_class = 300;
    original.shape = {3, 16, 16};
    original.style = data::PatternStyle::blobs;
    original.separation = 0.3;
    original.noise_std = 40.0;
    original.position_jitter = 1.0;
    original.seed = 11;
    hijack_source.name = "hijack";
    hijack_source.num_classes = 10;
    hijack_source.samples_per_class = 200;
    hijack_source.shape = {1, 16, 16};
    hijack_source.style = data::PatternStyle::strokes;
    hijack_source.separation = 1.0;
    hijack_source.noise_std = 20.0;
    hijack_source.position_jitter = 0.6;
    hijack_source.seed = 23;
  }
};

struct Grids {
  std::vector<double> alphas{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  /// Empty means {10%, 40%, 75%} of the training rounds.
  std::vector<std::size_t> hijack_rounds;
  std::vector<std::size_t> class_counts{3, 5, 7, 9};
  std::vector<std::size_t> samples_per_class{50, 100, 150};
  /// Extra FL seeds for scenarios that repeat over seeds.
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

struct DefenseSettings {
  double anomaly_max_fpr = 0.1;
  int squeeze_bits = 4;
  double squeeze_detect_target = 0.9;
  double squeeze_benign_budget = 0.05;
  /// Share of each test set held out for threshold calibration.
  double calibration_fraction = 0.5;
  std::uint64_t defender_seed = 99;
};

inline attack::AttackConfig desk_attack() {
  attack::AttackConfig a;
  a.cloak_lr = 0.05;
  a.cloak_iters = 300;
  return a;
}

struct ExperimentConfig {
  std::string scenario;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  std::size_t hijack_round = 45;
  attack::MappingKind mapping = attack::MappingKind::greedy;
  fl::FLConfig fl;
  /// Desk-scale attack settings: more cloak iterations at a larger step than
  /// AttackConfig's defaults, which only converge on far larger models.
  attack::AttackConfig attack = desk_attack();
  TaskPairConfig task;
  Grids grids;
  DefenseSettings defense;

  std::vector<std::size_t> resolved_hijack_rounds() const {
    if (!grids.hijack_rounds.empty()) return grids.hijack_rounds;
    return {fl.rounds / 10, fl.rounds * 2 / 5, fl.rounds * 3 / 4};
  }
};

// ---------------------------------------------------------------------------
// Value codecs

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <class T>
T parse_number(const std::string& text) {
  T v{};
  const char* b = text.data();
  const char* e = b + text.size();
  if constexpr (std::is_floating_point_v<T>) {
    // libstdc++ 11 lacks floating from_chars for some targets; strtod is exact enough.
    char* end = nullptr;
    v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v))
      throw InvalidArgument("expected a finite number, got '" + text + "'");
  } else {
    if (!text.empty() && text.front() == '-') throw InvalidArgument("expected a non-negative integer, got '" + text + "'");
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e) throw InvalidArgument("expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& t) {
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw InvalidArgument("expected true/false, got '" + t + "'");
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
template <class T>
std::string fmt(T v) requires std::is_integral_v<T> {
  return std::to_string(v);
}
inline std::string fmt(bool v) { return v ? "true" : "false"; }

template <class T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + fmt(v[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Field table

struct Field {
  std::string section;
  std::string key;
  std::string help;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
  bool required = false;
};

namespace detail {

template <class T>
Field num(std::string sec, std::string key, T& ref, std::string help) {
  return Field{std::move(sec), std::move(key), std::move(help),
               [&ref](const std::string& s) { ref = parse_number<T>(s); }, [&ref] { return fmt(ref); }};
}

inline Field flag(std::string sec, std::string key, bool& ref, std::string help) {
  return Field{std::move(sec), std::move(key), std::move(help), [&ref](const std::string& s) { ref = parse_bool(s); },
               [&ref] { return fmt(ref); }};
}

template <class T>
Field list(std::string sec, std::string key, std::vector<T>& ref, std::string help) {
  return Field{std::move(sec), std::move(key), std::move(help),
               [&ref](const std::string& s) {
                 ref.clear();
                 for (const auto& item : split_list(s)) ref.push_back(parse_number<T>(item));
               },
               [&ref] { return fmt_list(ref); }};
}

inline Field style(std::string sec, std::string key, data::PatternStyle& ref, std::string help) {
  return Field{std::move(sec), std::move(key), std::move(help),
               [&ref](const std::string& s) {
                 if (s == "blobs") ref = data::PatternStyle::blobs;
                 else if (s == "strokes") ref = data::PatternStyle::strokes;
                 else throw InvalidArgument("expected blobs or strokes, got '" + s + "'");
               },
               [&ref] { return std::string(ref == data::PatternStyle::blobs ? "blobs" : "strokes"); }};
}

inline void task_fields(std::vector<Field>& f, const std::string& prefix, data::TaskSpec& t) {
  f.push_back(num("task", prefix + "_classes", t.num_classes, "number of classes"));
  f.push_back(num("task", prefix + "_samples_per_class", t.samples_per_class, "samples generated per class"));
  f.push_back(num("task", prefix + "_separation", t.separation, "0 = identical class templates, 1 = fully distinct"));
  f.push_back(num("task", prefix + "_noise", t.noise_std, "per-pixel Gaussian noise std"));
  f.push_back(num("task", prefix + "_jitter", t.position_jitter, "per-sample template displacement std (pixels)"));
  f.push_back(style("task", prefix + "_style", t.style, "blobs | strokes"));
  f.push_back(num("task", prefix + "_stroke_width", t.stroke_width, "stroke half-width in pixels (strokes style)"));
  f.push_back(num("task", prefix + "_seed", t.seed, "generator seed"));
}

}  // namespace detail

/// Every configurable field, bound to `c`.
inline std::vector<Field> fields(ExperimentConfig& c) {
  using namespace detail;
  std::vector<Field> f;
  f.push_back(Field{"scenario", "name", "scenario id: clean, hijackfl, data_poison, model_poison, attack_comparison, "
                                        "fluctuation, class_mapping, hijack_round, complexity, alpha_sweep, one_cloak, "
                                        "defenses",
                    [&c](const std::string& s) { c.scenario = s; }, [&c] { return c.scenario; }, true});
  f.push_back(num("scenario", "seed", c.seed, "master seed for FL (init, selection, local shuffles)"));
  f.back().required = true;
  f.push_back(Field{"scenario", "output_dir", "output directory (overridden by HIJACKFL_OUTPUT_DIR)",
                    [&c](const std::string& s) { c.output_dir = s; }, [&c] { return c.output_dir; }});
  f.push_back(num("scenario", "hijack_round", c.hijack_round, "round whose global model the adversary uses (full scale: 150 of 200)"));
  f.push_back(list("scenario", "alphas", c.grids.alphas, "alpha grid for alpha_sweep"));
  f.push_back(list("scenario", "hijack_rounds", c.grids.hijack_rounds,
                   "hijack-round grid; empty = 10%, 40%, 75% of rounds"));
  f.push_back(list("scenario", "class_counts", c.grids.class_counts, "hijacking class counts for complexity"));
  f.push_back(list("scenario", "samples_per_class", c.grids.samples_per_class, "per-class sizes for complexity"));
  f.push_back(list("scenario", "seeds", c.grids.seeds, "seeds for hijack_round repeats"));

  f.push_back(num("fl", "n", c.fl.n, "total clients (full scale: 50)"));
  f.push_back(num("fl", "m", c.fl.m, "clients selected per round (full scale: 5)"));
  f.push_back(num("fl", "rounds", c.fl.rounds, "training rounds (full scale: 200)"));
  f.push_back(num("fl", "eta", c.fl.eta, "global learning rate (full scale: 10)"));
  f.push_back(num("fl", "local_lr", c.fl.local_lr, "client SGD learning rate"));
  f.push_back(num("fl", "local_epochs", c.fl.local_epochs, "client epochs per round"));
  f.push_back(num("fl", "batch_size", c.fl.batch_size, "client mini-batch size"));
  f.push_back(flag("fl", "parallel_clients", c.fl.parallel_clients, "train selected clients on threads"));

  f.push_back(Field{"attack", "mapping", "greedy | direct",
                    [&c](const std::string& s) {
                      if (s == "greedy") c.mapping = attack::MappingKind::greedy;
                      else if (s == "direct") c.mapping = attack::MappingKind::direct;
                      else throw InvalidArgument("expected greedy or direct, got '" + s + "'");
                    },
                    [&c] { return std::string(c.mapping == attack::MappingKind::greedy ? "greedy" : "direct"); }});
  f.push_back(num("attack", "alpha", c.attack.alpha, "cloak mixing weight (full scale: 0.5)"));
  f.push_back(num("attack", "lambda", c.attack.lambda, "negative-term weight (full scale: 1.2)"));
  f.push_back(num("attack", "anchor_iters", c.attack.anchor_iters, "anchor search iteration cap"));
  f.push_back(num("attack", "anchor_lr", c.attack.anchor_lr, "anchor Adam learning rate (full scale: 0.005)"));
  f.push_back(num("attack", "confidence_threshold", c.attack.confidence_threshold, "anchor stop probability (full scale: 0.99)"));
  f.push_back(num("attack", "anchor_restarts", c.attack.anchor_restarts, "anchor restart budget"));
  f.push_back(num("attack", "anchor_init_mean", c.attack.anchor_init_mean, "anchor init mean (normalized input)"));
  f.push_back(num("attack", "anchor_init_std", c.attack.anchor_init_std, "anchor init std (normalized input)"));
  f.push_back(num("attack", "cloak_iters", c.attack.cloak_iters, "cloak iterations (full scale: 100)"));
  f.push_back(num("attack", "cloak_lr", c.attack.cloak_lr, "cloak Adam learning rate (full scale: 0.005)"));
  f.push_back(num("attack", "cloak_init_std", c.attack.cloak_init_std, "cloak init std (pre-sigmoid)"));
  f.push_back(num("attack", "batch_size", c.attack.batch_size, "positive and negative batch size"));
  f.push_back(flag("attack", "one_cloak", c.attack.one_cloak, "optimize one shared cloak"));
  f.push_back(num("attack", "seed", c.attack.seed, "attack seed (anchors, cloak init, batches)"));

  task_fields(f, "original", c.task.original);
  task_fields(f, "hijack", c.task.hijack_source);
  f.push_back(num("task", "hijack_selected_classes", c.task.hijack_classes, "hijacking classes kept from the source task"));
  f.push_back(num("task", "hijack_select_seed", c.task.hijack_select_seed, "seed choosing the kept classes"));
  f.push_back(num("task", "original_test_fraction", c.task.original_test_fraction, "original test split"));
  f.push_back(num("task", "hijack_test_fraction", c.task.hijack_test_fraction, "hijacking test split"));
  f.push_back(num("task", "split_seed", c.task.split_seed, "train/test split seed"));
  f.push_back(num("task", "partition_seed", c.task.partition_seed, "client partition seed"));

  f.push_back(num("defense", "anomaly_max_fpr", c.defense.anomaly_max_fpr, "FPR budget when calibrating tau"));
  f.push_back(num("defense", "squeeze_bits", c.defense.squeeze_bits, "bit depth of the squeezer"));
  f.push_back(num("defense", "squeeze_detect_target", c.defense.squeeze_detect_target,
                  "cloaked-query share the low threshold must flag"));
  f.push_back(num("defense", "squeeze_benign_budget", c.defense.squeeze_benign_budget,
                  "benign share the high threshold may flag"));
  f.push_back(num("defense", "calibration_fraction", c.defense.calibration_fraction, "held-out calibration share"));
  f.push_back(num("defense", "defender_seed", c.defense.defender_seed, "seed of the defender's anchors"));
  return f;
}

// ---------------------------------------------------------------------------
// Validation, parsing, serialization

inline void validate(const ExperimentConfig& c) {
  const auto& names = scenario_names();
  if (std::find(names.begin(), names.end(), c.scenario) == names.end())
    throw ConfigError("unknown scenario '" + c.scenario + "'", 0, "scenario.name");
  auto wrap = [](const char* field, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what(), 0, field);
    }
  };
  wrap("fl", [&] { c.fl.validate(); });
  wrap("attack", [&] { c.attack.validate(); });
  if (c.hijack_round >= c.fl.rounds)
    throw ConfigError("hijack_round " + std::to_string(c.hijack_round) + " must be < rounds " +
                          std::to_string(c.fl.rounds),
                      0, "scenario.hijack_round");
  const auto& t = c.task;
  if (t.original.num_classes < 3) throw ConfigError("original task needs >= 3 classes", 0, "task.original_classes");
  if (t.hijack_classes < 2 || t.hijack_classes > t.hijack_source.num_classes)
    throw ConfigError("hijack_selected_classes must lie in [2, hijack_classes]", 0, "task.hijack_selected_classes");
  if (t.hijack_classes > t.original.num_classes - 1)
    throw ConfigError("hijacking classes must not exceed original classes - 1", 0, "task.hijack_selected_classes");
  if (t.hijack_source.shape.channels != 1)
    throw ConfigError("hijacking source task must have one channel", 0, "task.hijack_style");
  for (auto [v, f] : {std::pair{t.original_test_fraction, "task.original_test_fraction"},
                      std::pair{t.hijack_test_fraction, "task.hijack_test_fraction"},
                      std::pair{c.defense.calibration_fraction, "defense.calibration_fraction"}})
    if (!(v > 0.0 && v < 1.0)) throw ConfigError("value must lie in (0,1)", 0, f);
  if (c.defense.squeeze_bits < 1 || c.defense.squeeze_bits > 8)
    throw ConfigError("squeeze_bits must lie in [1,8]", 0, "defense.squeeze_bits");

  const auto& s = c.scenario;
  auto need = [&](bool empty, const char* field) {
    if (empty) throw ConfigError("grid must be non-empty for scenario " + s, 0, field);
  };
  if (s == "alpha_sweep") need(c.grids.alphas.empty(), "scenario.alphas");
  if (s == "complexity") {
    need(c.grids.class_counts.empty(), "scenario.class_counts");
    need(c.grids.samples_per_class.empty(), "scenario.samples_per_class");
  }
  if (s == "hijack_round") need(c.grids.seeds.empty(), "scenario.seeds");
  for (double a : c.grids.alphas)
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("alpha " + detail::fmt(a) + " outside [0,1]", 0, "scenario.alphas");
  for (auto r : c.resolved_hijack_rounds())
    if (r >= c.fl.rounds)
      throw ConfigError("hijack round " + std::to_string(r) + " must be < rounds " + std::to_string(c.fl.rounds), 0,
                        "scenario.hijack_rounds");
  for (auto k : c.grids.class_counts)
    if (k < 2 || k > t.hijack_source.num_classes || k > t.original.num_classes - 1)
      throw ConfigError("class count " + std::to_string(k) + " out of range", 0, "scenario.class_counts");
  for (auto k : c.grids.samples_per_class)
    if (k < 4) throw ConfigError("samples per class must be >= 4", 0, "scenario.samples_per_class");
}

inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  auto table = fields(c);
  std::map<std::string, Field*> by_name;
  for (auto& f : table) by_name[f.section + "." + f.key] = &f;
  std::set<std::string> seen;
  std::string section, raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto cut = raw.find_first_of("#;");
    const std::string line = detail::trim(cut == std::string::npos ? raw : raw.substr(0, cut));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("unterminated section header", line_no);
      section = detail::trim(line.substr(1, line.size() - 2));
      static const std::set<std::string> sections{"scenario", "fl", "attack", "task", "defense"};
      if (!sections.count(section)) throw ConfigError("unknown section [" + section + "]", line_no, section);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value", line_no);
    if (section.empty()) throw ConfigError("key outside of any section", line_no);
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const std::string name = section + "." + key;
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("unknown key '" + key + "' in [" + section + "]", line_no, name);
    if (!seen.insert(name).second) throw ConfigError("duplicate key '" + key + "'", line_no, name);
    try {
      it->second->set(value);
    } catch (const InvalidArgument& e) {
      throw ConfigError(name + ": " + e.what(), line_no, name);
    }
  }
  for (const auto& f : table)
    if (f.required && !seen.count(f.section + "." + f.key))
      throw ConfigError("missing required key '" + f.key + "' in [" + f.section + "]", 0, f.section + "." + f.key);
  if (!seen.count("scenario.hijack_round")) c.hijack_round = c.fl.rounds * 3 / 4;
  validate(c);
  return c;
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in);
}

/// Every field, section by section, in a form parse_config reads back to an
/// equal configuration.
inline std::string serialize(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  std::string out, section;
  for (const auto& f : fields(c)) {
    if (f.section != section) {
      section = f.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

/// Reference text listing every key with its default and meaning.
inline std::string reference() {
  ExperimentConfig c;
  std::string out, section;
  for (const auto& f : fields(c)) {
    if (f.section != section) {
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += "  " + f.key + " = " + f.get() + (f.required ? "  (required)" : "") + "\n      " + f.help + "\n";
  }
  return out;
}

/// Field-wise equality via the serialized form.
inline bool equivalent(const ExperimentConfig& a, const ExperimentConfig& b) { return serialize(a) == serialize(b); }

}  // namespace hijackfl::config
