#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>

#include "hijackfl/defenses.hpp"
#include "hijackfl/fl.hpp"

using namespace hijackfl;
using defenses::AnomalyConfig;
using defenses::SqueezeConfig;

namespace {

const nn::ModelSpec kSpec{12, {10, 6}, 4};

data::LabeledDataset random_set(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  data::LabeledDataset ds{"r", classes, {1, 1, 12}, {}, {}};
  Rng rng = make_stream(seed, "defense-set");
  std::uniform_int_distribution<int> px(0, 255);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      for (int k = 0; k < 12; ++k) ds.pixels.push_back(px(rng));
      ds.labels.push_back(c);
    }
  return ds;
}

attack::CloakSet random_cloaks(std::size_t H, std::uint64_t seed) {
  attack::CloakSet c;
  c.mapping = attack::ClassMapping{{}, 3, 4};
  for (std::size_t h = 0; h < H; ++h) c.mapping.forward.push_back(h);
  Rng rng = make_stream(seed, "defense-cloaks");
  std::normal_distribution<double> n(0, 2);
  for (std::size_t h = 0; h < H; ++h) {
    c.raw.emplace_back(12);
    for (auto& v : c.raw.back()) v = n(rng);
  }
  return c;
}

attack::AnchorSet fixed_anchors(const nn::Parameters& model) {
  attack::AnchorSet a;
  for (std::size_t cls = 0; cls < 4; ++cls) {
    attack::AnchorFeature f;
    f.cls = cls;
    f.feature.assign(model.spec.hidden_widths.back(), 0.1 * static_cast<double>(cls));
    a.emplace(cls, f);
  }
  return a;
}

}  // namespace

TEST(AnomalyFlag, ExactlyOneFarQuery) {
  EXPECT_TRUE(defenses::anomaly_flag({{0.1, 0.2, 5.0}}, 1.0));
  EXPECT_FALSE(defenses::anomaly_flag({{0.1, 0.2, 0.3}}, 1.0));
  EXPECT_FALSE(defenses::anomaly_flag({{5.0, 0.2, 5.0}}, 1.0));
  EXPECT_TRUE(defenses::anomaly_flag({{5.0, 0.2, 5.0}, {0.0, 3.0, 0.0}}, 1.0));
}

TEST(AnomalyDetect, IdenticalBatchNotFlagged) {
  const auto model = nn::init_model(kSpec, 1);
  const auto ds = random_set(1, 1, 2);
  std::vector<double> rows;
  for (int r = 0; r < 3; ++r) rows.insert(rows.end(), ds.pixels.begin(), ds.pixels.end());
  const Tensor batch({3, 12}, rows);
  AnomalyConfig cfg{fixed_anchors(model), 1e-9};
  EXPECT_FALSE(defenses::feature_anomaly_detect(model, batch, cfg));
}

TEST(AnomalyDetect, SingleDisplacedFeatureIsFlagged) {
  // first layer copies the first 6 inputs; one query is bright, the rest dark
  nn::Parameters p = nn::init_model(nn::ModelSpec{6, {6}, 2}, 0);
  std::fill(p.layers[0].weight.values.begin(), p.layers[0].weight.values.end(), 0.0);
  for (std::size_t i = 0; i < 6; ++i) p.layers[0].weight.values[i * 6 + i] = 1.0;
  attack::AnchorSet anchors;
  anchors.emplace(1, attack::AnchorFeature{1, std::vector<double>(6, 0.0), 1.0, {}, 0, 0});
  Tensor q({3, 6}, std::vector<double>(18, 0.0));
  for (std::size_t k = 0; k < 6; ++k) q.values[12 + k] = 255.0;
  EXPECT_TRUE(defenses::feature_anomaly_detect(p, q, AnomalyConfig{anchors, 0.5}));
  EXPECT_THROW(defenses::feature_anomaly_detect(p, Tensor({1, 6}, std::vector<double>(6, 0.0)),
                                                AnomalyConfig{anchors, 0.5}),
               InvalidArgument);
}

TEST(AnomalyDetect, PermutationInvariant) {
  const auto model = nn::init_model(kSpec, 4);
  const auto anchors = fixed_anchors(model);
  const auto ds = random_set(1, 5, 3);
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const double tau = std::uniform_real_distribution<double>(0.001, 0.3)(rng);
    std::vector<std::size_t> order{0, 1, 2, 3, 4};
    const bool base = defenses::feature_anomaly_detect(model, ds.batch(order), AnomalyConfig{anchors, tau});
    std::shuffle(order.begin(), order.end(), rng);
    ASSERT_EQ(defenses::feature_anomaly_detect(model, ds.batch(order), AnomalyConfig{anchors, tau}), base);
  }
}

TEST(Squeeze, Examples) {
  std::vector<double> x(256);
  for (int i = 0; i < 256; ++i) x[i] = i;
  const auto s8 = defenses::feature_squeeze(x, 8);
  for (int i = 0; i < 256; ++i) EXPECT_LT(std::abs(s8[i] - x[i]), 1.0);
  for (double v : defenses::feature_squeeze(x, 1)) EXPECT_TRUE(v == 0.0 || v == 255.0);
  EXPECT_THROW(defenses::feature_squeeze(x, 0), InvalidArgument);
  EXPECT_THROW(defenses::feature_squeeze(x, 9), InvalidArgument);
}

TEST(Squeeze, RangeLevelsAndIdempotence) {
  Rng rng(2);
  std::uniform_real_distribution<double> px(0, 255);
  for (int bits = 1; bits <= 8; ++bits)
    for (int t = 0; t < 50; ++t) {
      std::vector<double> x(64);
      for (auto& v : x) v = px(rng);
      const auto once = defenses::feature_squeeze(x, bits);
      EXPECT_EQ(defenses::feature_squeeze(once, bits), once);
      std::set<double> levels(once.begin(), once.end());
      EXPECT_LE(levels.size(), std::size_t{1} << bits);
      for (double v : once) ASSERT_TRUE(v >= 0.0 && v <= 255.0);
    }
}

TEST(SqueezeDetect, ThresholdExtremesAndMonotonicity) {
  const auto model = nn::init_model(kSpec, 6);
  const auto ds = random_set(2, 20, 5);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto x = ds.sample(i);
    EXPECT_FALSE(defenses::squeeze_detect(model, x, SqueezeConfig{2, std::numeric_limits<double>::infinity()}));
    const auto p = nn::predict_proba(model, Tensor({1, 12}, std::vector<double>(x.begin(), x.end())));
    const auto q = nn::predict_proba(model, Tensor({1, 12}, defenses::feature_squeeze(x, 2)));
    if (p.values != q.values) {
      EXPECT_TRUE(defenses::squeeze_detect(model, x, SqueezeConfig{2, 0.0}));
    }
    bool prev = true;
    for (double t = 0.0; t < 0.5; t += 0.01) {
      const bool now = defenses::squeeze_detect(model, x, SqueezeConfig{2, t});
      ASSERT_FALSE(now && !prev) << "flag reappeared at threshold " << t;
      prev = now;
    }
  }
}

TEST(Evaluate, FlagNothingMatchesUndefended) {
  const auto model = nn::init_model(kSpec, 7);
  const auto hijack = random_set(3, 10, 1);
  const auto original = random_set(4, 10, 2);
  const auto cloaks = random_cloaks(3, 3);
  const auto r = defenses::evaluate_under_defense(model, SqueezeConfig{4, std::numeric_limits<double>::infinity()},
                                                  hijack, original, cloaks);
  EXPECT_DOUBLE_EQ(r.asr, attack::evaluate_asr(model, hijack, cloaks));
  EXPECT_DOUBLE_EQ(r.utility, fl::accuracy(model, original));
  EXPECT_EQ(r.detection_rate, 0.0);
  EXPECT_EQ(r.fpr, 0.0);
  const auto a = defenses::evaluate_under_defense(model, AnomalyConfig{fixed_anchors(model), 1e9}, hijack, original,
                                                  cloaks);
  EXPECT_DOUBLE_EQ(a.asr, attack::evaluate_asr(model, hijack, cloaks));
  EXPECT_DOUBLE_EQ(a.utility, fl::accuracy(model, original));
}

TEST(Evaluate, FlagEverythingZeroesBoth) {
  const auto model = nn::init_model(kSpec, 7);
  const auto hijack = random_set(3, 10, 1);
  const auto original = random_set(4, 10, 2);
  const auto r = defenses::evaluate_under_defense(model, SqueezeConfig{4, -1.0}, hijack, original, random_cloaks(3, 3));
  EXPECT_EQ(r.asr, 0.0);
  EXPECT_EQ(r.utility, 0.0);
  EXPECT_EQ(r.detection_rate, 1.0);
  EXPECT_EQ(r.fpr, 1.0);
}

TEST(Evaluate, RatesMatchIndependentRecount) {
  const auto model = nn::init_model(kSpec, 11);
  const auto hijack = random_set(3, 12, 4);
  const auto original = random_set(4, 9, 6);
  const auto cloaks = random_cloaks(3, 2);
  for (double thr : {0.0005, 0.002, 0.01}) {
    const auto r = defenses::evaluate_under_defense(model, SqueezeConfig{3, thr}, hijack, original, cloaks);
    std::size_t flags = 0, wins = 0;
    for (std::size_t i = 0; i < hijack.size(); ++i) {
      std::optional<std::size_t> best;
      double best_score = -1;
      for (std::size_t h = 0; h < 3; ++h) {
        const auto q = attack::apply_cloak(hijack.sample(i), cloaks.raw[h], cloaks.alpha);
        if (defenses::squeeze_detect(model, q, SqueezeConfig{3, thr})) {
          ++flags;
          continue;
        }
        const double s = nn::predict_proba(model, Tensor({1, 12}, q)).at(0, h);
        if (s > best_score) best = h, best_score = s;
      }
      wins += best && *best == hijack.labels[i];
    }
    std::size_t benign_flags = 0, correct = 0;
    for (std::size_t i = 0; i < original.size(); ++i) {
      const bool f = defenses::squeeze_detect(model, original.sample(i), SqueezeConfig{3, thr});
      benign_flags += f;
      const auto x = original.sample(i);
      correct += !f && nn::predict(model, Tensor({1, 12}, std::vector<double>(x.begin(), x.end())))[0] == original.labels[i];
    }
    EXPECT_DOUBLE_EQ(r.asr, static_cast<double>(wins) / hijack.size());
    EXPECT_DOUBLE_EQ(r.detection_rate, static_cast<double>(flags) / (3.0 * hijack.size()));
    EXPECT_DOUBLE_EQ(r.fpr, static_cast<double>(benign_flags) / original.size());
    EXPECT_DOUBLE_EQ(r.utility, static_cast<double>(correct) / original.size());
  }
}

TEST(BenignBatches, CoverEverySampleOnce) {
  for (std::size_t count : {0u, 1u, 7u, 10u, 31u}) {
    const auto b = defenses::benign_batches(count, 3, 1);
    std::vector<std::size_t> all;
    for (const auto& g : b) {
      EXPECT_GE(g.size(), 2u);
      all.insert(all.end(), g.begin(), g.end());
    }
    std::sort(all.begin(), all.end());
    if (count >= 2) {
      std::vector<std::size_t> expect(count);
      std::iota(expect.begin(), expect.end(), 0);
      EXPECT_EQ(all, expect);
    }
  }
  EXPECT_THROW(defenses::benign_batches(5, 1, 1), InvalidArgument);
}

TEST(Calibration, SqueezeThresholdsHitTheirTargets) {
  const auto model = nn::init_model(kSpec, 3);
  const auto hijack = random_set(3, 20, 7);
  const auto original = random_set(4, 25, 8);
  const auto cloaks = random_cloaks(3, 9);
  const auto c = defenses::calibrate_squeeze_thresholds(model, 3, hijack, original, cloaks, 0.9, 0.05);
  const auto low = defenses::evaluate_under_defense(model, SqueezeConfig{3, c.low}, hijack, original, cloaks);
  const auto high = defenses::evaluate_under_defense(model, SqueezeConfig{3, c.high}, hijack, original, cloaks);
  EXPECT_GE(low.detection_rate, 0.9);
  EXPECT_LE(high.fpr, 0.05);
}
