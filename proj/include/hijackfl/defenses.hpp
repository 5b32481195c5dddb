#pragma once

// Prediction-time defenses against cloaked query sets.
//
// Anomaly detection looks at one query batch at a time. For every defender
// anchor it counts the queries whose feature distance exceeds tau, and it
// flags the batch when some anchor sees exactly one such query.
// Feature squeezing flags single inputs whose prediction moves too much
// under bit-depth reduction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "hijackfl/attack.hpp"
#include "hijackfl/autodiff.hpp"
#include "hijackfl/data.hpp"
#include "hijackfl/errors.hpp"
#include "hijackfl/model.hpp"
#include "hijackfl/rng.hpp"

namespace hijackfl::defenses {

using nn::Parameters;

struct AnomalyConfig {
  attack::AnchorSet anchors;
  double tau = 0.6;

  void validate() const {
    if (!(tau > 0.0)) throw InvalidArgument("AnomalyConfig: tau must be positive");
    if (anchors.empty()) throw InvalidArgument("AnomalyConfig: defender anchor set is empty");
  }
};

struct SqueezeConfig {
  int bits = 4;
  double threshold = 0.5;

  void validate() const {
    if (bits < 1 || bits > 8) throw InvalidArgument("SqueezeConfig: bit depth must lie in [1,8]");
  }
};

using Defense = std::variant<AnomalyConfig, SqueezeConfig>;

inline const char* defense_name(const Defense& d) {
  return std::holds_alternative<AnomalyConfig>(d) ? "anomaly" : "squeeze";
}

// ---------------------------------------------------------------------------
// Anomaly detection

/// dist[a][k]: Dist(Phi(query k), anchor a), anchors in ascending class order.
inline std::vector<std::vector<double>> anchor_distances(const Parameters& model, const Tensor& queries,
                                                         const attack::AnchorSet& anchors) {
  const Tensor feats = nn::forward_features(model, queries);
  const std::size_t k = feats.rows(), dim = feats.cols();
  std::vector<std::vector<double>> out;
  out.reserve(anchors.size());
  for (const auto& [cls, anchor] : anchors) {
    if (anchor.feature.size() != dim)
      throw DimensionError("anomaly detector: anchor for class " + std::to_string(cls) + " has wrong feature size");
    std::vector<double> row(k);
    for (std::size_t q = 0; q < k; ++q)
      row[q] = autodiff::l2_distance_value(std::span<const double>(feats.values.data() + q * dim, dim), anchor.feature);
    out.push_back(std::move(row));
  }
  return out;
}

inline bool anomaly_flag(const std::vector<std::vector<double>>& dist, double tau) {
  for (const auto& row : dist)
    if (std::count_if(row.begin(), row.end(), [tau](double d) { return d > tau; }) == 1) return true;
  return false;
}

inline bool feature_anomaly_detect(const Parameters& model, const Tensor& queries, const AnomalyConfig& cfg) {
  cfg.validate();
  if (queries.rank() != 2 || queries.rows() < 2)
    throw InvalidArgument("feature_anomaly_detect: query batch needs at least two samples");
  return anomaly_flag(anchor_distances(model, queries, cfg.anchors), cfg.tau);
}

/// The H cloaked versions of one sample, as the adversary would submit them.
inline Tensor cloak_query_set(std::span<const double> x, const attack::CloakSet& cloaks) {
  const std::size_t H = cloaks.mapping.hijack_classes();
  Tensor out = Tensor::zeros({H, x.size()});
  for (std::size_t h = 0; h < H; ++h) {
    auto row = attack::apply_cloak(x, cloaks.cloak_for(h), cloaks.alpha);
    std::copy(row.begin(), row.end(), out.values.begin() + static_cast<std::ptrdiff_t>(h * x.size()));
  }
  return out;
}

/// Benign query batches: consecutive groups of `batch` samples of a
/// deterministic shuffle. A trailing group smaller than two is merged into
/// the previous one.
inline std::vector<std::vector<std::size_t>> benign_batches(std::size_t count, std::size_t batch, std::uint64_t seed) {
  if (batch < 2) throw InvalidArgument("benign_batches: batch size must be >= 2");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_stream(seed, "benign_batches");
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < count; b += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(count, b + batch)));
  if (out.size() > 1 && out.back().size() < 2) {
    auto tail = out.back();
    out.pop_back();
    out.back().insert(out.back().end(), tail.begin(), tail.end());
  }
  if (!out.empty() && out.back().size() < 2) out.pop_back();
  return out;
}

// ---------------------------------------------------------------------------
// Feature squeezing

inline std::vector<double> feature_squeeze(std::span<const double> x, int bits) {
  if (bits < 1 || bits > 8) throw InvalidArgument("feature_squeeze: bit depth " + std::to_string(bits) + " outside [1,8]");
  const double levels = std::ldexp(1.0, bits) - 1.0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::clamp(x[i], 0.0, nn::kPixelMax);
    out[i] = std::round(v * levels / nn::kPixelMax) * nn::kPixelMax / levels;
  }
  return out;
}

inline Tensor feature_squeeze(const Tensor& batch, int bits) {
  return Tensor(batch.shape, feature_squeeze(std::span<const double>(batch.values), bits));
}

/// L1 distance between the probability vectors of each row and its squeezed copy.
inline std::vector<double> squeeze_scores(const Parameters& model, const Tensor& batch, int bits) {
  const Tensor p = nn::predict_proba(model, batch);
  const Tensor q = nn::predict_proba(model, feature_squeeze(batch, bits));
  const std::size_t C = p.cols();
  std::vector<double> out(p.rows(), 0.0);
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t c = 0; c < C; ++c) out[r] += std::abs(p.values[r * C + c] - q.values[r * C + c]);
  return out;
}

inline bool squeeze_detect(const Parameters& model, std::span<const double> x, const SqueezeConfig& cfg) {
  cfg.validate();
  Tensor one({1, x.size()}, std::vector<double>(x.begin(), x.end()));
  return squeeze_scores(model, one, cfg.bits).front() > cfg.threshold;
}

// ---------------------------------------------------------------------------
// Evaluation

struct DefenseReport {
  double asr = 0.0;
  double utility = 0.0;
  double detection_rate = 0.0;
  double fpr = 0.0;
  /// Per hijacking test sample: attack succeeded despite the defense.
  std::vector<bool> attack_success;
  /// Per original test sample: accepted and classified correctly.
  std::vector<bool> benign_correct;
  std::size_t attack_flags = 0, attack_units = 0;
  std::size_t benign_flags = 0, benign_units = 0;
};

namespace detail {

inline double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

inline void finish(DefenseReport& r) {
  r.asr = ratio(static_cast<std::size_t>(std::count(r.attack_success.begin(), r.attack_success.end(), true)),
                r.attack_success.size());
  r.utility = ratio(static_cast<std::size_t>(std::count(r.benign_correct.begin(), r.benign_correct.end(), true)),
                    r.benign_correct.size());
  r.detection_rate = ratio(r.attack_flags, r.attack_units);
  r.fpr = ratio(r.benign_flags, r.benign_units);
}

}  // namespace detail

/// Anomaly detection: each hijacking sample's cloak set is one batch, and a
/// flagged batch is a failed attack. The original test set is queried in
/// benign batches of the same size; a flagged batch rejects all its inputs.
/// Squeezing: every query is judged alone. Rejected cloaked queries return
/// no score and the adversary decides among the rest; with none left the
/// attack fails. Rejected benign inputs count as errors.
inline DefenseReport evaluate_under_defense(const Parameters& global, const Defense& defense,
                                            const data::LabeledDataset& hijack_test,
                                            const data::LabeledDataset& original_test, const attack::CloakSet& cloaks,
                                            std::uint64_t seed = 0) {
  const std::size_t H = cloaks.mapping.hijack_classes();
  DefenseReport r;
  r.attack_success.assign(hijack_test.size(), false);
  r.benign_correct.assign(original_test.size(), false);
  const auto benign_pred = original_test.size() ? nn::predict(global, original_test.all_samples())
                                                : std::vector<std::size_t>{};
  const auto scores = hijack_test.size() ? attack::cloak_scores(global, hijack_test.all_samples(), cloaks)
                                         : std::vector<std::vector<double>>{};

  if (const auto* an = std::get_if<AnomalyConfig>(&defense)) {
    an->validate();
    for (std::size_t i = 0; i < hijack_test.size(); ++i) {
      const bool flagged = H >= 2 && feature_anomaly_detect(global, cloak_query_set(hijack_test.sample(i), cloaks), *an);
      r.attack_flags += flagged;
      r.attack_success[i] = !flagged && attack::decide(scores[i]) == hijack_test.labels[i];
    }
    r.attack_units = hijack_test.size();
    const auto batches = benign_batches(original_test.size(), std::max<std::size_t>(H, 2), seed);
    std::vector<bool> rejected(original_test.size(), false);
    for (const auto& b : batches) {
      const bool flagged = feature_anomaly_detect(global, original_test.batch(b), *an);
      r.benign_flags += flagged;
      for (auto i : b) rejected[i] = flagged;
    }
    r.benign_units = batches.size();
    for (std::size_t i = 0; i < original_test.size(); ++i)
      r.benign_correct[i] = !rejected[i] && benign_pred[i] == original_test.labels[i];
  } else {
    const auto& sq = std::get<SqueezeConfig>(defense);
    sq.validate();
    for (std::size_t i = 0; i < hijack_test.size(); ++i) {
      const auto sc = squeeze_scores(global, cloak_query_set(hijack_test.sample(i), cloaks), sq.bits);
      std::optional<std::size_t> best;
      for (std::size_t h = 0; h < H; ++h) {
        if (sc[h] > sq.threshold) {
          ++r.attack_flags;
          continue;
        }
        if (!best || scores[i][h] > scores[i][*best]) best = h;
      }
      r.attack_success[i] = best && *best == hijack_test.labels[i];
    }
    r.attack_units = hijack_test.size() * H;
    if (original_test.size()) {
      const auto sc = squeeze_scores(global, original_test.all_samples(), sq.bits);
      for (std::size_t i = 0; i < original_test.size(); ++i) {
        const bool flagged = sc[i] > sq.threshold;
        r.benign_flags += flagged;
        r.benign_correct[i] = !flagged && benign_pred[i] == original_test.labels[i];
      }
    }
    r.benign_units = original_test.size();
  }
  detail::finish(r);
  return r;
}

// ---------------------------------------------------------------------------
// Threshold calibration

struct AnomalyCalibration {
  double tau = 0.0;
  double detection_rate = 0.0;
  double fpr = 0.0;
};

/// Picks the tau with the highest detection rate on the calibration split
/// subject to benign FPR <= max_fpr (ties: lower FPR, then smaller tau).
inline AnomalyCalibration calibrate_anomaly_tau(const Parameters& global, const attack::AnchorSet& anchors,
                                                const data::LabeledDataset& hijack_calib,
                                                const data::LabeledDataset& original_calib,
                                                const attack::CloakSet& cloaks, double max_fpr,
                                                std::uint64_t seed = 0) {
  const std::size_t H = cloaks.mapping.hijack_classes();
  if (H < 2) throw InvalidArgument("calibrate_anomaly_tau: cloak sets need at least two queries");
  std::vector<std::vector<std::vector<double>>> attack_d, benign_d;
  std::vector<double> candidates;
  auto collect = [&](const auto& d) {
    for (const auto& row : d) {
      // Only the two largest distances per anchor can move the decision.
      std::vector<double> s = row;
      std::sort(s.begin(), s.end(), std::greater<>());
      candidates.push_back(s[0]);
      if (s.size() > 1) candidates.push_back(s[1]);
    }
  };
  for (std::size_t i = 0; i < hijack_calib.size(); ++i) {
    attack_d.push_back(anchor_distances(global, cloak_query_set(hijack_calib.sample(i), cloaks), anchors));
    collect(attack_d.back());
  }
  for (const auto& b : benign_batches(original_calib.size(), H, seed)) {
    benign_d.push_back(anchor_distances(global, original_calib.batch(b), anchors));
    collect(benign_d.back());
  }
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  candidates.erase(std::remove_if(candidates.begin(), candidates.end(), [](double t) { return !(t > 0.0); }),
                   candidates.end());
  if (candidates.empty()) throw InvalidArgument("calibrate_anomaly_tau: no positive distances to calibrate on");

  auto rate = [](const auto& sets, double tau) {
    std::size_t f = 0;
    for (const auto& d : sets) f += anomaly_flag(d, tau);
    return detail::ratio(f, sets.size());
  };
  AnomalyCalibration best{candidates.back(), rate(attack_d, candidates.back()), rate(benign_d, candidates.back())};
  bool found = false;
  for (double tau : candidates) {
    const double fpr = rate(benign_d, tau);
    if (fpr > max_fpr) continue;
    const double det = rate(attack_d, tau);
    if (!found || det > best.detection_rate || (det == best.detection_rate && fpr < best.fpr)) {
      best = {tau, det, fpr};
      found = true;
    }
  }
  return best;
}

struct SqueezeCalibration {
  /// Flags at least `detect_target` of cloaked calibration queries.
  double low = 0.0;
  /// Flags at most `benign_budget` of benign calibration samples.
  double high = 0.0;
};

inline SqueezeCalibration calibrate_squeeze_thresholds(const Parameters& global, int bits,
                                                       const data::LabeledDataset& hijack_calib,
                                                       const data::LabeledDataset& original_calib,
                                                       const attack::CloakSet& cloaks, double detect_target = 0.9,
                                                       double benign_budget = 0.05) {
  std::vector<double> cloaked;
  for (std::size_t i = 0; i < hijack_calib.size(); ++i) {
    const auto sc = squeeze_scores(global, cloak_query_set(hijack_calib.sample(i), cloaks), bits);
    cloaked.insert(cloaked.end(), sc.begin(), sc.end());
  }
  auto benign = squeeze_scores(global, original_calib.all_samples(), bits);
  if (cloaked.empty() || benign.empty())
    throw InvalidArgument("calibrate_squeeze_thresholds: calibration sets must be non-empty");
  std::sort(cloaked.begin(), cloaked.end());
  std::sort(benign.begin(), benign.end());
  const auto N = cloaked.size(), B = benign.size();
  const auto need = static_cast<std::size_t>(std::ceil(detect_target * static_cast<double>(N)));
  const std::size_t j = N - std::clamp<std::size_t>(need, 1, N);
  SqueezeCalibration out;
  out.low = std::max(0.0, std::nextafter(cloaked[j], -1.0));
  const auto allowed = static_cast<std::size_t>(std::floor(benign_budget * static_cast<double>(B)));
  out.high = benign[B - 1 - std::min(allowed, B - 1)];
  return out;
}

}  // namespace hijackfl::defenses
