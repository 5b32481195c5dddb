#pragma once

// Model hijacking through class-specific cloaks.
//
// Pipeline, all run against a frozen snapshot of the global model:
//   1. Class mapping: probe the model with hijacking samples and greedily
//      assign each hijacking class h an original class M(h). The highest
//      original class index is reserved as the negative class y*.
//   2. Anchor features: for every original class y, optimise a synthetic
//      input until the model is >= 99% confident in y, and keep its feature
//      vector Phi_y.
//   3. Cloaks: for every h, optimise an unconstrained delta_h so that
//      alpha*x + (1-alpha)*255*sigmoid(delta_h) lands on Phi_{M(h)} for
//      x in class h and on Phi_{y*} for every other hijacking class.
//   4. Execution: cloak a query with every delta_h, read the probability of
//      M(h) from each cloaked query, and answer the argmax h.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hijackfl/autodiff.hpp"
#include "hijackfl/binary_io.hpp"
#include "hijackfl/data.hpp"
#include "hijackfl/errors.hpp"
#include "hijackfl/model.hpp"
#include "hijackfl/optim.hpp"
#include "hijackfl/rng.hpp"

namespace hijackfl::attack {

using nn::Parameters;

// ---------------------------------------------------------------------------
// Class mapping

struct ClassMapping {
  /// forward[h] = M(h), the original class hijacking class h is routed to.
  std::vector<std::size_t> forward;
  std::size_t negative_class = 0;
  std::size_t original_classes = 0;

  std::size_t hijack_classes() const { return forward.size(); }

  /// M^-(y); empty when y is not in the image of M.
  std::optional<std::size_t> inverse(std::size_t y) const {
    for (std::size_t h = 0; h < forward.size(); ++h)
      if (forward[h] == y) return h;
    return std::nullopt;
  }

  void validate() const {
    if (negative_class >= original_classes)
      throw InvalidArgument("ClassMapping: negative class outside original classes");
    if (forward.size() + 1 > original_classes)
      throw InvalidArgument("ClassMapping: " + std::to_string(forward.size()) +
                            " hijacking classes need at least " + std::to_string(forward.size() + 1) +
                            " original classes");
    std::vector<bool> used(original_classes, false);
    for (auto y : forward) {
      if (y >= original_classes) throw InvalidArgument("ClassMapping: target outside original classes");
      if (y == negative_class) throw InvalidArgument("ClassMapping: hijacking class mapped onto y*");
      if (used[y]) throw InvalidArgument("ClassMapping: mapping is not injective");
      used[y] = true;
    }
  }

  friend bool operator==(const ClassMapping&, const ClassMapping&) = default;
};

/// counts[h][y]: probes of hijacking class h classified as original class y,
/// with y* excluded from the argmax.
struct FrequencyMatrix {
  std::vector<std::vector<std::size_t>> counts;

  std::size_t rows() const { return counts.size(); }
  std::size_t cols() const { return counts.empty() ? 0 : counts.front().size(); }
};

/// Argmax of `row` restricted to `candidates`; ties go to the earliest candidate.
inline std::size_t restricted_argmax(std::span<const double> row, std::span<const std::size_t> candidates) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < candidates.size(); ++k)
    if (row[candidates[k]] > row[candidates[best]]) best = k;
  return best;
}

inline FrequencyMatrix build_frequency_matrix(const Parameters& model, const data::LabeledDataset& probes,
                                              std::size_t original_classes) {
  if (original_classes < 2) throw InvalidArgument("build_frequency_matrix: need >= 2 original classes");
  const auto counts = probes.class_counts();
  for (auto c : counts)
    if (c != counts.front())
      throw InvalidArgument("build_frequency_matrix: hijacking classes need equal probe counts");
  const std::size_t cols = original_classes - 1;
  std::vector<std::size_t> candidates(cols);
  for (std::size_t y = 0; y < cols; ++y) candidates[y] = y;
  FrequencyMatrix f{std::vector<std::vector<std::size_t>>(probes.num_classes, std::vector<std::size_t>(cols, 0))};
  const Tensor logits = nn::forward_logits(model, probes.all_samples());
  if (logits.cols() != original_classes)
    throw DimensionError("build_frequency_matrix: model has " + std::to_string(logits.cols()) + " classes");
  for (std::size_t i = 0; i < probes.size(); ++i) {
    std::span<const double> row(logits.values.data() + i * logits.cols(), logits.cols());
    ++f.counts[probes.labels[i]][restricted_argmax(row, candidates)];
  }
  return f;
}

struct GreedyPick {
  std::size_t hijack_class;
  std::size_t original_class;
  std::size_t count;
};

/// Repeatedly take the largest remaining cell (ties: lowest row, then lowest
/// column), assign it, and strike out its row and column.
inline ClassMapping greedy_class_mapping(const FrequencyMatrix& freq, std::size_t original_classes,
                                         std::vector<GreedyPick>* picks = nullptr) {
  const std::size_t rows = freq.rows(), cols = freq.cols();
  if (cols + 1 != original_classes)
    throw InvalidArgument("greedy_class_mapping: matrix must have original_classes-1 columns");
  if (rows > cols)
    throw InvalidArgument("greedy_class_mapping: " + std::to_string(rows) + " hijacking classes exceed " +
                          std::to_string(cols) + " assignable original classes");
  ClassMapping m{std::vector<std::size_t>(rows, 0), original_classes - 1, original_classes};
  std::vector<bool> row_used(rows, false), col_used(cols, false);
  for (std::size_t step = 0; step < rows; ++step) {
    std::optional<std::pair<std::size_t, std::size_t>> best;
    for (std::size_t h = 0; h < rows; ++h) {
      if (row_used[h]) continue;
      for (std::size_t y = 0; y < cols; ++y) {
        if (col_used[y]) continue;
        if (!best || freq.counts[h][y] > freq.counts[best->first][best->second]) best = {h, y};
      }
    }
    const auto [h, y] = *best;
    row_used[h] = col_used[y] = true;
    m.forward[h] = y;
    if (picks) picks->push_back({h, y, freq.counts[h][y]});
  }
  return m;
}

/// Identity-style mapping h -> h used as the non-greedy comparison.
inline ClassMapping direct_class_mapping(std::size_t hijack_classes, std::size_t original_classes) {
  ClassMapping m{{}, original_classes - 1, original_classes};
  for (std::size_t h = 0; h < hijack_classes; ++h) m.forward.push_back(h);
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Configuration

struct AttackConfig {
  double alpha = 0.5;
  double lambda = 1.2;
  std::size_t anchor_iters = 500;
  double anchor_lr = 0.005;
  double confidence_threshold = 0.99;
  std::size_t anchor_restarts = 5;
  double anchor_init_mean = 0.5;
  double anchor_init_std = 0.25;
  std::size_t cloak_iters = 100;
  double cloak_lr = 0.005;
  double cloak_init_std = 1.0;
  std::size_t batch_size = 32;
  bool one_cloak = false;
  std::uint64_t seed = 7;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("AttackConfig: alpha must lie in [0,1]");
    if (!(lambda >= 0.0)) throw InvalidArgument("AttackConfig: lambda must be >= 0");
    if (!(confidence_threshold > 0.0 && confidence_threshold < 1.0))
      throw InvalidArgument("AttackConfig: confidence threshold must lie in (0,1)");
    if (batch_size == 0) throw InvalidArgument("AttackConfig: batch size must be >= 1");
    if (anchor_restarts == 0) throw InvalidArgument("AttackConfig: anchor restart budget must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Anchor features

struct AnchorFeature {
  std::size_t cls = 0;
  std::vector<double> feature;
  double confidence = 0.0;
  /// Generating input, in the model's normalised input space.
  std::vector<double> sample;
  std::size_t iterations = 0;
  std::size_t restarts = 0;
};

/// Softmax probability of `cls` for one normalised input.
inline double normalized_confidence(const Parameters& model, std::span<const double> input, std::size_t cls) {
  autodiff::Graph g;
  auto layers = nn::bind(g, model, false);
  Tensor x({1, input.size()}, std::vector<double>(input.begin(), input.end()));
  auto out = nn::forward_normalized(layers, g.constant(std::move(x)));
  return nn::softmax_rows(g.value(out.logits))[cls];
}

inline AnchorFeature compute_anchor_feature(const Parameters& model, std::size_t cls, const AttackConfig& cfg,
                                            std::uint64_t stream_key = 0) {
  cfg.validate();
  if (cls >= model.spec.num_classes)
    throw InvalidArgument("compute_anchor_feature: class " + std::to_string(cls) + " >= " +
                          std::to_string(model.spec.num_classes));
  const std::size_t dim = model.spec.input_dim;
  const std::vector<std::size_t> target{cls};
  for (std::size_t attempt = 0; attempt < cfg.anchor_restarts; ++attempt) {
    Rng rng = make_stream(cfg.seed, "anchor", {stream_key, cls, attempt});
    std::normal_distribution<double> init(cfg.anchor_init_mean, cfg.anchor_init_std);
    std::vector<double> r(dim);
    for (auto& v : r) v = init(rng);
    optim::AdamState state(dim);
    const optim::AdamConfig adam{cfg.anchor_lr};
    for (std::size_t it = 0; it <= cfg.anchor_iters; ++it) {
      autodiff::Graph g;
      auto layers = nn::bind(g, model, false);
      auto input = g.parameter(Tensor({1, dim}, r));
      auto out = nn::forward_normalized(layers, input);
      const double p = nn::softmax_rows(g.value(out.logits))[cls];
      if (p >= cfg.confidence_threshold) {
        return AnchorFeature{cls, g.value(out.features).values, p, r, it, attempt};
      }
      if (it == cfg.anchor_iters) break;
      auto loss = autodiff::softmax_cross_entropy(out.logits, target);
      g.backward(loss);
      optim::adam_step(r, g.grad(input), state, adam);
    }
  }
  throw AnchorSearchFailed(cls, "anchor search for class " + std::to_string(cls) + " did not reach confidence " +
                                    std::to_string(cfg.confidence_threshold) + " within " +
                                    std::to_string(cfg.anchor_restarts) + " restarts");
}

using AnchorSet = std::map<std::size_t, AnchorFeature>;

inline AnchorSet compute_anchors(const Parameters& model, std::span<const std::size_t> classes,
                                 const AttackConfig& cfg, std::uint64_t stream_key = 0) {
  AnchorSet out;
  for (auto c : classes) out.emplace(c, compute_anchor_feature(model, c, cfg, stream_key));
  return out;
}

/// Anchors for every mapped class plus y*.
inline AnchorSet compute_mapping_anchors(const Parameters& model, const ClassMapping& m, const AttackConfig& cfg) {
  std::vector<std::size_t> classes = m.forward;
  classes.push_back(m.negative_class);
  return compute_anchors(model, classes, cfg);
}

// ---------------------------------------------------------------------------
// Cloaks

/// 255 * sigmoid(delta)
inline std::vector<double> materialize(std::span<const double> raw) {
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = nn::kPixelMax * autodiff::sigmoid_value(raw[i]);
  return out;
}

/// alpha * x + (1 - alpha) * 255 * sigmoid(delta), elementwise.
inline std::vector<double> apply_cloak(std::span<const double> x, std::span<const double> raw, double alpha) {
  if (x.size() != raw.size())
    throw DimensionError("apply_cloak: sample has " + std::to_string(x.size()) + " values, cloak " +
                         std::to_string(raw.size()));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = nn::kPixelMax * autodiff::sigmoid_value(raw[i]);
    out[i] = std::clamp(alpha * x[i] + (1.0 - alpha) * c, 0.0, nn::kPixelMax);
  }
  return out;
}

/// Cloak every row of a [k x dim] batch.
inline Tensor apply_cloak_batch(const Tensor& batch, std::span<const double> raw, double alpha) {
  Tensor out = batch;
  const std::size_t dim = batch.cols();
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto row = apply_cloak(std::span<const double>(batch.values.data() + r * dim, dim), raw, alpha);
    std::copy(row.begin(), row.end(), out.values.begin() + static_cast<std::ptrdiff_t>(r * dim));
  }
  return out;
}

struct CloakSet {
  /// One raw (pre-sigmoid) cloak per hijacking class, or a single shared
  /// cloak when `one_cloak` is set.
  std::vector<std::vector<double>> raw;
  double alpha = 0.5;
  ClassMapping mapping;
  bool one_cloak = false;
  std::int64_t hijack_round = -1;
  std::uint64_t snapshot_hash = 0;
  /// Per-cloak loss trace of the optimisation (not persisted).
  std::vector<std::vector<double>> loss_traces;

  std::span<const double> cloak_for(std::size_t h) const { return one_cloak ? raw.front() : raw.at(h); }

  bool same_content(const CloakSet& o) const {
    return raw == o.raw && alpha == o.alpha && mapping == o.mapping && one_cloak == o.one_cloak &&
           hijack_round == o.hijack_round && snapshot_hash == o.snapshot_hash;
  }
};

namespace detail {

inline std::vector<std::size_t> sample_without_replacement(const std::vector<std::size_t>& pool, std::size_t k,
                                                           Rng& rng) {
  std::vector<std::size_t> v = pool;
  k = std::min(k, v.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
    std::swap(v[i], v[pick(rng)]);
  }
  v.resize(k);
  return v;
}

inline Tensor tile(std::span<const double> row, std::size_t times) {
  Tensor t = Tensor::zeros({times, row.size()});
  for (std::size_t r = 0; r < times; ++r)
    std::copy(row.begin(), row.end(), t.values.begin() + static_cast<std::ptrdiff_t>(r * row.size()));
  return t;
}

/// Dist(Phi(batch (+) delta), anchor), recorded on `g`.
inline autodiff::Var cloaked_feature_distance(autodiff::Graph& g, const std::vector<nn::BoundLayer>& layers,
                                              autodiff::Var cloak_pixels, const Tensor& batch, double alpha,
                                              std::span<const double> anchor) {
  Tensor scaled = batch;
  for (auto& v : scaled.values) v *= alpha;
  auto cloaked = autodiff::add_row_vector(g.constant(std::move(scaled)), cloak_pixels);
  auto feats = nn::forward_pixels(layers, cloaked).features;
  return autodiff::l2_distance(feats, g.constant(tile(anchor, batch.rows())));
}

}  // namespace detail

/// Optimises cloaks against a frozen model. Throws if an anchor is missing or
/// the hijacking set lacks negatives for some class.
inline CloakSet compute_cloaks(const Parameters& model, const data::LabeledDataset& hijack_train,
                               const ClassMapping& mapping, const AnchorSet& anchors, const AttackConfig& cfg) {
  cfg.validate();
  mapping.validate();
  const std::size_t H = mapping.hijack_classes();
  if (hijack_train.num_classes != H)
    throw InvalidArgument("compute_cloaks: mapping covers " + std::to_string(H) + " classes, dataset has " +
                          std::to_string(hijack_train.num_classes));
  if (hijack_train.dim() != model.spec.input_dim)
    throw DimensionError("compute_cloaks: sample size does not match model input");
  auto anchor_of = [&](std::size_t y) -> const std::vector<double>& {
    auto it = anchors.find(y);
    if (it == anchors.end()) throw InvalidArgument("compute_cloaks: missing anchor for class " + std::to_string(y));
    return it->second.feature;
  };
  const auto& negative_anchor = anchor_of(mapping.negative_class);
  std::vector<std::vector<std::size_t>> pos(H), neg(H);
  for (std::size_t i = 0; i < hijack_train.size(); ++i)
    for (std::size_t h = 0; h < H; ++h) (hijack_train.labels[i] == h ? pos[h] : neg[h]).push_back(i);
  for (std::size_t h = 0; h < H; ++h) {
    anchor_of(mapping.forward[h]);
    if (pos[h].empty()) throw InvalidArgument("compute_cloaks: hijacking class " + std::to_string(h) + " is empty");
    if (neg[h].empty())
      throw InvalidArgument("compute_cloaks: no samples outside class " + std::to_string(h) +
                            "; the negative term needs at least two hijacking classes");
  }

  const std::size_t dim = hijack_train.dim();
  const double alpha = cfg.alpha;
  CloakSet out;
  out.alpha = alpha;
  out.mapping = mapping;
  out.one_cloak = cfg.one_cloak;
  const std::size_t cloak_count = cfg.one_cloak ? 1 : H;
  const optim::AdamConfig adam{cfg.cloak_lr};

  for (std::size_t k = 0; k < cloak_count; ++k) {
    Rng rng = make_stream(cfg.seed, cfg.one_cloak ? "one_cloak" : "cloak", {k});
    std::normal_distribution<double> init(0.0, cfg.cloak_init_std);
    std::vector<double> raw(dim);
    for (auto& v : raw) v = init(rng);
    optim::AdamState state(dim);
    std::vector<double> trace;
    trace.reserve(cfg.cloak_iters + 1);
    const std::size_t first_h = cfg.one_cloak ? 0 : k;
    const std::size_t last_h = cfg.one_cloak ? H : k + 1;

    for (std::size_t it = 0; it <= cfg.cloak_iters; ++it) {
      autodiff::Graph g;
      auto layers = nn::bind(g, model, false);
      auto delta = g.parameter(Tensor({dim}, raw));
      auto cloak_pixels = autodiff::scale(autodiff::sigmoid(delta), (1.0 - alpha) * nn::kPixelMax);
      std::optional<autodiff::Var> loss;
      for (std::size_t h = first_h; h < last_h; ++h) {
        const auto pb = detail::sample_without_replacement(pos[h], cfg.batch_size, rng);
        const auto nb = detail::sample_without_replacement(neg[h], pb.size(), rng);
        auto d_pos = detail::cloaked_feature_distance(g, layers, cloak_pixels, hijack_train.batch(pb), alpha,
                                                      anchor_of(mapping.forward[h]));
        auto d_neg = detail::cloaked_feature_distance(g, layers, cloak_pixels, hijack_train.batch(nb), alpha,
                                                      negative_anchor);
        auto term = autodiff::add(d_pos, autodiff::scale(d_neg, cfg.lambda));
        loss = loss ? autodiff::add(*loss, term) : term;
      }
      trace.push_back(g.value(*loss)[0]);
      if (it == cfg.cloak_iters) break;
      g.backward(*loss);
      optim::adam_step(raw, g.grad(delta), state, adam);
    }
    out.raw.push_back(std::move(raw));
    out.loss_traces.push_back(std::move(trace));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Execution

/// scores[i][h]: probability of M(h) for sample i cloaked with delta_h.
inline std::vector<std::vector<double>> cloak_scores(const Parameters& global, const Tensor& samples,
                                                     const CloakSet& cloaks) {
  const auto& m = cloaks.mapping;
  const std::size_t H = m.hijack_classes();
  std::vector<std::vector<double>> scores(samples.rows(), std::vector<double>(H, 0.0));
  std::optional<Tensor> shared;
  for (std::size_t h = 0; h < H; ++h) {
    Tensor proba;
    if (cloaks.one_cloak) {
      if (!shared) shared = nn::predict_proba(global, apply_cloak_batch(samples, cloaks.raw.front(), cloaks.alpha));
      proba = *shared;
    } else {
      proba = nn::predict_proba(global, apply_cloak_batch(samples, cloaks.cloak_for(h), cloaks.alpha));
    }
    for (std::size_t i = 0; i < samples.rows(); ++i) scores[i][h] = proba.at(i, m.forward[h]);
  }
  return scores;
}

/// argmax_h scores[h]; ties go to the lowest h.
inline std::size_t decide(std::span<const double> scores) {
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

inline std::size_t execute_query(const Parameters& global, std::span<const double> x, const CloakSet& cloaks) {
  Tensor one({1, x.size()}, std::vector<double>(x.begin(), x.end()));
  return decide(cloak_scores(global, one, cloaks).front());
}

inline double evaluate_asr(const Parameters& global, const data::LabeledDataset& hijack_test, const CloakSet& cloaks) {
  if (hijack_test.size() == 0) return 0.0;
  const auto scores = cloak_scores(global, hijack_test.all_samples(), cloaks);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hits += decide(scores[i]) == hijack_test.labels[i];
  return static_cast<double>(hits) / static_cast<double>(hijack_test.size());
}

/// Direct classification of uncloaked samples, decoded through M^-: the
/// predicted class is the argmax over the mapped original classes only.
inline std::vector<std::size_t> uncloaked_predictions(const Parameters& global, const Tensor& samples,
                                                      const ClassMapping& m) {
  const Tensor logits = nn::forward_logits(global, samples);
  std::vector<std::size_t> out(samples.rows());
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    std::span<const double> row(logits.values.data() + i * logits.cols(), logits.cols());
    out[i] = restricted_argmax(row, m.forward);
  }
  return out;
}

inline double evaluate_uncloaked_asr(const Parameters& global, const data::LabeledDataset& hijack_test,
                                     const ClassMapping& m) {
  if (hijack_test.size() == 0) return 0.0;
  const auto pred = uncloaked_predictions(global, hijack_test.all_samples(), m);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == hijack_test.labels[i];
  return static_cast<double>(hits) / static_cast<double>(hijack_test.size());
}

// ---------------------------------------------------------------------------
// End-to-end offline computation

enum class MappingKind { greedy, direct };

struct HijackArtifacts {
  FrequencyMatrix frequencies;
  ClassMapping mapping;
  AnchorSet anchors;
  CloakSet cloaks;
};

/// Equal-sized probe set: the first k samples of every class, k = smallest class size.
inline data::LabeledDataset probe_set(const data::LabeledDataset& hijack) {
  const auto counts = hijack.class_counts();
  const auto k = *std::min_element(counts.begin(), counts.end());
  return data::take_per_class(hijack, k);
}

inline HijackArtifacts run_offline_attack(const Parameters& snapshot, const data::LabeledDataset& hijack_train,
                                          const AttackConfig& cfg, MappingKind kind = MappingKind::greedy,
                                          std::int64_t hijack_round = -1) {
  const std::size_t C = snapshot.spec.num_classes;
  if (hijack_train.num_classes + 1 > C)
    throw InvalidArgument("hijacking task has " + std::to_string(hijack_train.num_classes) +
                          " classes; at most " + std::to_string(C - 1) + " fit beside the negative class");
  HijackArtifacts a;
  a.frequencies = build_frequency_matrix(snapshot, probe_set(hijack_train), C);
  a.mapping = kind == MappingKind::greedy ? greedy_class_mapping(a.frequencies, C)
                                          : direct_class_mapping(hijack_train.num_classes, C);
  a.anchors = compute_mapping_anchors(snapshot, a.mapping, cfg);
  a.cloaks = compute_cloaks(snapshot, hijack_train, a.mapping, a.anchors, cfg);
  a.cloaks.hijack_round = hijack_round;
  a.cloaks.snapshot_hash = snapshot.hash();
  return a;
}

// ---------------------------------------------------------------------------
// CloakSet file
//
//   "HJCL" u32 version=1
//   f64 alpha, u64 snapshot_hash, i64 hijack_round
//   u32 original_classes, u32 negative_class, u32 hijack_classes,
//   u32 target[hijack_classes]
//   u32 one_cloak, u32 cloak_count, u64 dim, f64 raw[cloak_count * dim]
//
// Little-endian throughout.

inline constexpr std::uint32_t kCloakSetVersion = 1;

inline void write_cloaks(std::ostream& os, const CloakSet& c) {
  using namespace binary;
  os.write("HJCL", 4);
  write_u32(os, kCloakSetVersion);
  write_f64(os, c.alpha);
  write_u64(os, c.snapshot_hash);
  write_i64(os, c.hijack_round);
  write_u32(os, static_cast<std::uint32_t>(c.mapping.original_classes));
  write_u32(os, static_cast<std::uint32_t>(c.mapping.negative_class));
  write_u32(os, static_cast<std::uint32_t>(c.mapping.forward.size()));
  for (auto y : c.mapping.forward) write_u32(os, static_cast<std::uint32_t>(y));
  write_u32(os, c.one_cloak ? 1u : 0u);
  write_u32(os, static_cast<std::uint32_t>(c.raw.size()));
  const std::uint64_t dim = c.raw.empty() ? 0 : c.raw.front().size();
  write_u64(os, dim);
  for (const auto& r : c.raw) {
    if (r.size() != dim) throw DimensionError("write_cloaks: cloaks differ in size");
    write_f64_array(os, r);
  }
}

inline CloakSet read_cloaks(std::istream& is) {
  using namespace binary;
  expect_magic(is, "HJCL");
  const auto version = read_u32(is, "cloak version");
  if (version != kCloakSetVersion) throw FormatError("unsupported cloak file version " + std::to_string(version));
  CloakSet c;
  c.alpha = read_f64(is, "alpha");
  c.snapshot_hash = read_u64(is, "snapshot hash");
  c.hijack_round = read_i64(is, "hijack round");
  c.mapping.original_classes = read_u32(is, "original classes");
  c.mapping.negative_class = read_u32(is, "negative class");
  const auto H = read_u32(is, "hijack classes");
  if (H > 4096) throw FormatError("implausible hijacking class count");
  for (std::uint32_t h = 0; h < H; ++h) c.mapping.forward.push_back(read_u32(is, "mapping"));
  c.one_cloak = read_u32(is, "one_cloak") != 0;
  const auto count = read_u32(is, "cloak count");
  const auto dim = read_u64(is, "cloak dim");
  if (count > 4096 || dim > (1u << 24)) throw FormatError("implausible cloak dimensions");
  for (std::uint32_t k = 0; k < count; ++k) c.raw.push_back(read_f64_array(is, dim, "cloak values"));
  try {
    c.mapping.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("cloak file mapping invalid: ") + e.what());
  }
  if (count != (c.one_cloak ? 1u : H)) throw FormatError("cloak count does not match mapping");
  return c;
}

inline void save_cloaks(const std::string& path, const CloakSet& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_cloaks(os, c);
}

inline CloakSet load_cloaks(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_cloaks(is);
}

}  // namespace hijackfl::attack
