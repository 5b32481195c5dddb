#pragma once

// In-process FedSGD simulation.
//
// Each round the server samples m of n clients uniformly without
// replacement, every selected client runs local mini-batch SGD from the
// current global model, and the server applies
//
//   G^{t+1} = G^t + (eta / n) * sum_i (F_i^{t+1} - G^t)
//
// summing deltas in ascending client-id order. Randomness comes from named
// streams keyed by (master_seed, round, client), so extra work done by hooks
// never shifts the honest trajectory.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <future>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hijackfl/autodiff.hpp"
#include "hijackfl/data.hpp"
#include "hijackfl/errors.hpp"
#include "hijackfl/model.hpp"
#include "hijackfl/optim.hpp"
#include "hijackfl/rng.hpp"

namespace hijackfl::fl {

using nn::Parameters;

struct FLConfig {
  std::size_t n = 20;
  std::size_t m = 4;
  std::size_t rounds = 60;
  double eta = 5.0;
  double local_lr = 0.1;
  std::size_t local_epochs = 2;
  std::size_t batch_size = 32;
  std::uint64_t master_seed = 1;
  /// Train the selected clients of a round on separate threads.
  bool parallel_clients = false;

  /// Larger federation: n=50, m=5, eta=10, 200 rounds.
  static FLConfig full_scale() {
    FLConfig c;
    c.n = 50;
    c.m = 5;
    c.rounds = 200;
    c.eta = 10.0;
    return c;
  }

  void validate() const {
    if (n == 0 || m == 0 || m > n)
      throw InvalidArgument("FLConfig: need 1 <= m <= n (m=" + std::to_string(m) +
                            ", n=" + std::to_string(n) + ")");
    if (!(eta > 0.0)) throw InvalidArgument("FLConfig: eta must be positive");
    if (rounds == 0) throw InvalidArgument("FLConfig: rounds must be >= 1");
    if (batch_size == 0) throw InvalidArgument("FLConfig: batch_size must be >= 1");
    if (local_lr < 0.0) throw InvalidArgument("FLConfig: local_lr must be >= 0");
  }
};

struct GlobalState {
  std::size_t round = 0;
  Parameters params;
};

struct ClientUpdate {
  std::size_t client_id = 0;
  Parameters delta;
};

struct RoundLog {
  std::size_t round = 0;
  std::vector<std::size_t> selected;
  double utility = 0.0;
  double duration_ms = 0.0;
};

/// m distinct client ids drawn uniformly without replacement, ascending.
inline std::vector<std::size_t> select_clients(std::size_t round, std::size_t n, std::size_t m,
                                               std::uint64_t master_seed) {
  if (m > n) throw InvalidArgument("select_clients: m > n");
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = make_stream(master_seed, "select_clients", {round});
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline Rng client_stream(std::uint64_t master_seed, std::size_t round, std::size_t client) {
  return make_stream(master_seed, "local_train", {round, client});
}

/// Mean softmax cross-entropy of `p` on the given samples.
inline double mean_loss(const Parameters& p, const data::LabeledDataset& ds,
                        std::span<const std::size_t> idx) {
  autodiff::Graph g;
  auto layers = nn::bind(g, p, false);
  std::vector<std::size_t> targets;
  for (auto i : idx) targets.push_back(ds.labels[i]);
  auto out = nn::forward_pixels(layers, g.constant(ds.batch(idx)));
  return g.value(autodiff::softmax_cross_entropy(out.logits, targets))[0];
}

/// One SGD step on a mini-batch; returns the batch loss before the step.
inline double sgd_minibatch(Parameters& p, const data::LabeledDataset& ds,
                            std::span<const std::size_t> batch, double lr) {
  autodiff::Graph g;
  auto layers = nn::bind(g, p, true);
  std::vector<std::size_t> targets;
  targets.reserve(batch.size());
  for (auto i : batch) targets.push_back(ds.labels[i]);
  auto out = nn::forward_pixels(layers, g.constant(ds.batch(batch)));
  auto loss = autodiff::softmax_cross_entropy(out.logits, targets);
  g.backward(loss);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto gw = g.grad(layers[l].weight);
    const auto gb = g.grad(layers[l].bias);
    optim::sgd_step(p.layers[l].weight.values, gw, lr);
    optim::sgd_step(p.layers[l].bias.values, gb, lr);
  }
  return g.value(loss)[0];
}

/// `epochs` passes of shuffled mini-batch SGD starting from a copy of `start`.
inline Parameters train_sgd(const Parameters& start, const data::LabeledDataset& ds,
                            std::vector<std::size_t> idx, std::size_t epochs,
                            std::size_t batch_size, double lr, Rng& rng) {
  if (idx.empty()) throw InvalidArgument("local training needs at least one sample");
  Parameters p = start;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t b = 0; b < idx.size(); b += batch_size) {
      const auto end = std::min(idx.size(), b + batch_size);
      sgd_minibatch(p, ds, std::span<const std::size_t>(idx.data() + b, end - b), lr);
    }
  }
  return p;
}

/// Honest client training: F_i^{t+1}.
inline Parameters local_train(const Parameters& global, const data::LabeledDataset& ds,
                              const std::vector<std::size_t>& client_idx, const FLConfig& cfg,
                              Rng& rng) {
  if (client_idx.empty()) throw InvalidArgument("local_train: client has no data");
  return train_sgd(global, ds, client_idx, cfg.local_epochs, cfg.batch_size, cfg.local_lr, rng);
}

/// G + (eta / n) * sum of deltas, summed in ascending client-id order.
inline Parameters aggregate(const Parameters& global, std::vector<ClientUpdate> updates,
                            double eta, std::size_t n) {
  std::sort(updates.begin(), updates.end(),
            [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
  Parameters acc = nn::zeros_like(global);
  for (const auto& u : updates) {
    global.require_same_spec(u.delta);
    acc.zip(u.delta, [](double& a, double d) { a += d; });
  }
  Parameters out = nn::add_scaled(global, acc, eta / static_cast<double>(n));
  out.version = global.version + 1;
  return out;
}

/// Fraction of correctly classified samples.
inline double accuracy(const Parameters& p, const data::LabeledDataset& ds) {
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  constexpr std::size_t chunk = 512;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) idx.push_back(i);
    const auto pred = nn::predict(p, ds.batch(idx));
    for (std::size_t r = 0; r < idx.size(); ++r) correct += pred[r] == ds.labels[idx[r]];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// Hooks

/// Read-only view of G^t, delivered before round t trains.
struct SnapshotHook {
  std::size_t round = 0;
  std::function<void(const GlobalState&)> fn;
};

struct ReplaceContext {
  std::size_t round;
  std::size_t client_id;
  const Parameters& global;
  const Parameters& honest_local;
  const std::vector<std::size_t>& client_data;
};

/// Substitutes one selected client's update at `round`. Without an explicit
/// client id the lowest selected id is used.
struct ReplaceHook {
  std::size_t round = 0;
  std::optional<std::size_t> client_id;
  std::function<ClientUpdate(const ReplaceContext&)> fn;
};

struct Hooks {
  std::vector<SnapshotHook> snapshots;
  std::vector<ReplaceHook> replacements;
  std::function<void(const RoundLog&, const Parameters&)> after_round;
};

struct TrainingResult {
  Parameters final_params;
  std::vector<RoundLog> logs;
};

inline void validate_hooks(const Hooks& hooks, const FLConfig& cfg) {
  for (const auto& h : hooks.snapshots)
    if (h.round >= cfg.rounds)
      throw InvalidArgument("snapshot hook round " + std::to_string(h.round) + " >= rounds " +
                            std::to_string(cfg.rounds));
  for (const auto& h : hooks.replacements) {
    if (h.round >= cfg.rounds)
      throw InvalidArgument("replace hook round " + std::to_string(h.round) + " >= rounds " +
                            std::to_string(cfg.rounds));
    if (h.client_id && *h.client_id >= cfg.n)
      throw InvalidArgument("replace hook references unknown client " + std::to_string(*h.client_id) +
                            " (n=" + std::to_string(cfg.n) + ")");
  }
}

inline TrainingResult run_training(const FLConfig& cfg, const data::ClientPartition& partition,
                                   const data::LabeledDataset& train, const data::LabeledDataset& test,
                                   const Parameters& initial, const Hooks& hooks = {}) {
  cfg.validate();
  if (partition.clients() != cfg.n)
    throw InvalidArgument("partition has " + std::to_string(partition.clients()) +
                          " clients, config expects " + std::to_string(cfg.n));
  validate_hooks(hooks, cfg);

  TrainingResult result;
  Parameters global = initial;
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const auto started = std::chrono::steady_clock::now();
    for (const auto& h : hooks.snapshots)
      if (h.round == t) h.fn(GlobalState{t, global});

    const auto selected = select_clients(t, cfg.n, cfg.m, cfg.master_seed);
    auto train_client = [&](std::size_t id) {
      Rng rng = client_stream(cfg.master_seed, t, id);
      return local_train(global, train, partition.assignment[id], cfg, rng);
    };
    std::vector<Parameters> locals;
    locals.reserve(selected.size());
    if (cfg.parallel_clients && selected.size() > 1) {
      std::vector<std::future<Parameters>> jobs;
      for (auto id : selected) jobs.push_back(std::async(std::launch::async, train_client, id));
      for (auto& j : jobs) locals.push_back(j.get());
    } else {
      for (auto id : selected) locals.push_back(train_client(id));
    }

    std::vector<ClientUpdate> updates;
    for (std::size_t k = 0; k < selected.size(); ++k)
      updates.push_back(ClientUpdate{selected[k], nn::delta(locals[k], global)});

    for (const auto& h : hooks.replacements) {
      if (h.round != t) continue;
      const std::size_t target = h.client_id.value_or(selected.front());
      auto it = std::find(selected.begin(), selected.end(), target);
      if (it == selected.end())
        throw InvalidArgument("replace hook client " + std::to_string(target) +
                              " is not selected in round " + std::to_string(t));
      const auto k = static_cast<std::size_t>(it - selected.begin());
      ClientUpdate u = h.fn(ReplaceContext{t, target, global, locals[k], partition.assignment[target]});
      u.client_id = target;
      global.require_same_spec(u.delta);
      updates[k] = std::move(u);
    }

    global = aggregate(global, std::move(updates), cfg.eta, cfg.n);
    RoundLog log{t, selected, accuracy(global, test), 0.0};
    log.duration_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    if (hooks.after_round) hooks.after_round(log, global);
    result.logs.push_back(std::move(log));
  }
  result.final_params = std::move(global);
  return result;
}

inline void write_round_log_header(std::ostream& os) {
  os << "method,round,selected_ids,utility,duration_ms\n";
}

/// One CSV row per round; selected ids joined with ';'.
inline void write_round_log_csv(std::ostream& os, const std::string& method,
                                const std::vector<RoundLog>& logs) {
  for (const auto& l : logs) {
    os << method << ',' << l.round << ',';
    for (std::size_t i = 0; i < l.selected.size(); ++i) os << (i ? ";" : "") << l.selected[i];
    char buf[64];
    std::snprintf(buf, sizeof buf, ",%.6f,%.3f\n", l.utility, l.duration_ms);
    os << buf;
  }
}

}  // namespace hijackfl::fl
