#pragma once

// Parameter-poisoning hijacking baselines.
//
// Data poison (naive): at the hijacking round the adversary trains on its
// local original data mixed with relabelled hijacking samples and submits
// the result like any other client.
// Model poison (naive): same local model X, but the submitted update is
// scaled by gamma = n / eta so that X survives averaging and replaces the
// global model.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "hijackfl/attack.hpp"
#include "hijackfl/data.hpp"
#include "hijackfl/errors.hpp"
#include "hijackfl/fl.hpp"
#include "hijackfl/model.hpp"
#include "hijackfl/rng.hpp"

namespace hijackfl::baselines {

using nn::Parameters;

struct PoisonPlan {
  /// relabel[h]: original class assigned to hijacking class h.
  std::vector<std::size_t> relabel;
  /// Fraction of the hijacking training set mixed into the local data.
  double poison_fraction = 1.0;

  void validate(std::size_t original_classes) const {
    std::vector<bool> used(original_classes, false);
    for (auto y : relabel) {
      if (y >= original_classes)
        throw InvalidArgument("PoisonPlan: relabel target " + std::to_string(y) + " outside " +
                              std::to_string(original_classes) + " original classes");
      if (used[y]) throw InvalidArgument("PoisonPlan: relabel mapping is not injective");
      used[y] = true;
    }
    if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0))
      throw InvalidArgument("PoisonPlan: poison fraction must lie in [0,1]");
  }

  static PoisonPlan from_mapping(const attack::ClassMapping& m) { return PoisonPlan{m.forward, 1.0}; }
};

struct ReplacementConfig {
  double gamma = 4.0;

  void validate() const {
    if (!(gamma > 0.0)) throw InvalidArgument("ReplacementConfig: gamma must be positive");
  }
  /// gamma = n / eta, the scale at which one update replaces the global model.
  static ReplacementConfig for_fl(const fl::FLConfig& cfg) {
    return ReplacementConfig{static_cast<double>(cfg.n) / cfg.eta};
  }
};

/// Local original data followed by relabelled hijacking samples, then
/// shuffled with `seed`.
inline data::LabeledDataset build_poisoned_dataset(const data::LabeledDataset& local,
                                                   const data::LabeledDataset& hijack, const PoisonPlan& plan,
                                                   std::uint64_t seed) {
  plan.validate(local.num_classes);
  if (hijack.size() > 0) {
    if (!(hijack.shape == local.shape))
      throw DimensionError("build_poisoned_dataset: hijacking and original samples differ in shape");
    if (hijack.num_classes > plan.relabel.size())
      throw InvalidArgument("build_poisoned_dataset: plan does not cover every hijacking class");
  }
  if (hijack.size() == 0 || plan.poison_fraction == 0.0) return local;
  Rng rng = make_stream(seed, "poisoned_dataset");
  std::vector<std::size_t> hidx(hijack.size());
  std::iota(hidx.begin(), hidx.end(), 0);
  std::shuffle(hidx.begin(), hidx.end(), rng);
  hidx.resize(static_cast<std::size_t>(plan.poison_fraction * static_cast<double>(hijack.size())));

  data::LabeledDataset merged{local.name + "+poison", local.num_classes, local.shape, local.pixels, local.labels};
  for (auto i : hidx) {
    auto s = hijack.sample(i);
    merged.pixels.insert(merged.pixels.end(), s.begin(), s.end());
    merged.labels.push_back(plan.relabel[hijack.labels[i]]);
  }
  std::vector<std::size_t> order(merged.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return merged.subset(order);
}

/// Submitted difference gamma * (X - G^t), i.e. the local model gamma*(X-G^t)+G^t.
inline fl::ClientUpdate model_poison_update(const Parameters& global, const Parameters& malicious,
                                            const ReplacementConfig& cfg, std::size_t client_id = 0) {
  cfg.validate();
  Parameters d = nn::delta(malicious, global);
  d.zip(d, [g = cfg.gamma](double& a, double) { a *= g; });
  return fl::ClientUpdate{client_id, std::move(d)};
}

/// Direct classification of uncloaked samples: the full argmax is decoded
/// through the inverse relabel plan, and unmapped predictions count as misses.
inline double baseline_asr(const Parameters& global, const data::LabeledDataset& hijack_test,
                           const attack::ClassMapping& m) {
  if (hijack_test.size() == 0) return 0.0;
  const auto pred = nn::predict(global, hijack_test.all_samples());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto h = m.inverse(pred[i]);
    hits += h && *h == hijack_test.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(hijack_test.size());
}

enum class BaselineKind { data_poison, model_poison };

inline const char* method_name(BaselineKind k) {
  return k == BaselineKind::data_poison ? "data_poison_naive" : "model_poison_naive";
}

struct BaselineSetup {
  BaselineKind kind = BaselineKind::model_poison;
  std::size_t hijack_round = 45;
  ReplacementConfig replacement;
  /// Fixed relabel plan; when empty, the greedy mapping of G^t is used.
  std::optional<PoisonPlan> plan;
  double poison_fraction = 1.0;
  std::uint64_t seed = 7;
};

struct BaselineResult {
  fl::TrainingResult training;
  attack::ClassMapping mapping;
  std::size_t adversary = 0;
};

/// Runs FedSGD with the adversary substituting its update at the hijacking
/// round. The adversary is the lowest-id client selected in that round.
inline BaselineResult run_baseline_attack(const fl::FLConfig& cfg, const data::ClientPartition& partition,
                                          const data::LabeledDataset& train, const data::LabeledDataset& test,
                                          const Parameters& initial, const data::LabeledDataset& hijack_train,
                                          const BaselineSetup& setup) {
  if (setup.hijack_round >= cfg.rounds)
    throw InvalidArgument("baseline hijack round " + std::to_string(setup.hijack_round) + " >= rounds " +
                          std::to_string(cfg.rounds));
  const std::size_t C = initial.spec.num_classes;
  BaselineResult out;
  fl::Hooks hooks;
  hooks.replacements.push_back(fl::ReplaceHook{
      setup.hijack_round, std::nullopt, [&](const fl::ReplaceContext& ctx) {
        out.adversary = ctx.client_id;
        if (hijack_train.size() == 0) {
          // nothing to inject: the adversary behaves like its honest self
          if (setup.kind == BaselineKind::model_poison)
            return model_poison_update(ctx.global, ctx.honest_local, setup.replacement, ctx.client_id);
          return fl::ClientUpdate{ctx.client_id, nn::delta(ctx.honest_local, ctx.global)};
        }
        if (setup.plan) {
          out.mapping = attack::ClassMapping{setup.plan->relabel, C - 1, C};
        } else {
          const auto freq = attack::build_frequency_matrix(ctx.global, attack::probe_set(hijack_train), C);
          out.mapping = attack::greedy_class_mapping(freq, C);
        }
        PoisonPlan plan = setup.plan.value_or(PoisonPlan::from_mapping(out.mapping));
        plan.poison_fraction = setup.poison_fraction;
        const auto local = train.subset(ctx.client_data);
        const auto poisoned = build_poisoned_dataset(local, hijack_train, plan, stream_seed(setup.seed, "poison"));
        std::vector<std::size_t> idx(poisoned.size());
        std::iota(idx.begin(), idx.end(), 0);
        Rng rng = make_stream(setup.seed, "adversary_train", {ctx.round});
        const Parameters x = fl::train_sgd(ctx.global, poisoned, std::move(idx), cfg.local_epochs, cfg.batch_size,
                                           cfg.local_lr, rng);
        if (setup.kind == BaselineKind::model_poison)
          return model_poison_update(ctx.global, x, setup.replacement, ctx.client_id);
        return fl::ClientUpdate{ctx.client_id, nn::delta(x, ctx.global)};
      }});
  out.training = fl::run_training(cfg, partition, train, test, initial, hooks);
  return out;
}

}  // namespace hijackfl::baselines
