#include <gtest/gtest.h>

#include <map>

#include "hijackfl/baselines.hpp"

using namespace hijackfl;
using baselines::PoisonPlan;

namespace {

data::LabeledDataset tiny(std::size_t classes, std::size_t per_class, std::uint64_t seed, double offset) {
  data::LabeledDataset ds{"tiny", classes, {1, 1, 3}, {}, {}};
  Rng rng = make_stream(seed, "tiny");
  std::uniform_int_distribution<int> px(0, 200);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      for (int k = 0; k < 3; ++k) ds.pixels.push_back(px(rng) + offset);
      ds.labels.push_back(c);
    }
  return ds;
}

std::multiset<std::pair<std::vector<double>, std::size_t>> rows(const data::LabeledDataset& ds) {
  std::multiset<std::pair<std::vector<double>, std::size_t>> out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    out.emplace(std::vector<double>(ds.sample(i).begin(), ds.sample(i).end()), ds.labels[i]);
  return out;
}

struct SmallFL {
  data::Split orig;
  data::LabeledDataset hijack;
  data::ClientPartition partition;
  nn::Parameters init;
  fl::FLConfig cfg;
};

SmallFL small_fl() {
  data::TaskSpec o;
  o.num_classes = 5;
  o.samples_per_class = 60;
  o.shape = {3, 6, 6};
  o.seed = 4;
  data::TaskSpec h = o;
  h.num_classes = 2;
  h.style = data::PatternStyle::strokes;
  h.seed = 9;
  SmallFL f;
  f.orig = data::train_test_split(data::synthesize_task(o), 0.25, 1);
  f.hijack = data::synthesize_task(h);
  f.cfg.n = 5;
  f.cfg.m = 2;
  f.cfg.eta = 2.5;
  f.cfg.rounds = 6;
  f.cfg.batch_size = 8;
  f.partition = data::partition_iid(f.orig.train, f.cfg.n, 2);
  f.init = nn::init_model(nn::ModelSpec{f.orig.train.dim(), {16, 8}, 5}, 3);
  return f;
}

}  // namespace

TEST(PoisonPlan, Validation) {
  EXPECT_NO_THROW((PoisonPlan{{2, 0}, 1.0}.validate(4)));
  EXPECT_THROW((PoisonPlan{{2, 4}, 1.0}.validate(4)), InvalidArgument);
  EXPECT_THROW((PoisonPlan{{2, 2}, 1.0}.validate(4)), InvalidArgument);
  EXPECT_THROW((PoisonPlan{{2, 0}, 1.5}.validate(4)), InvalidArgument);
  EXPECT_THROW((baselines::ReplacementConfig{0.0}.validate()), InvalidArgument);
  EXPECT_EQ(baselines::ReplacementConfig::for_fl(fl::FLConfig::full_scale()).gamma, 5.0);
}

TEST(PoisonedDataset, EmptyHijackLeavesLocalDataUntouched) {
  const auto local = tiny(4, 5, 1, 0);
  data::LabeledDataset empty{"empty", 2, local.shape, {}, {}};
  const auto out = baselines::build_poisoned_dataset(local, empty, PoisonPlan{{1, 3}, 1.0}, 7);
  EXPECT_EQ(out.pixels, local.pixels);
  EXPECT_EQ(out.labels, local.labels);
}

TEST(PoisonedDataset, CompositionIsExact) {
  const auto local = tiny(4, 6, 1, 0);
  const auto hijack = tiny(2, 7, 2, 50);
  const PoisonPlan plan{{3, 1}, 1.0};
  const auto out = baselines::build_poisoned_dataset(local, hijack, plan, 7);
  EXPECT_EQ(out.size(), local.size() + hijack.size());
  auto expect = rows(local);
  for (std::size_t i = 0; i < hijack.size(); ++i)
    expect.emplace(std::vector<double>(hijack.sample(i).begin(), hijack.sample(i).end()),
                   plan.relabel[hijack.labels[i]]);
  EXPECT_EQ(rows(out), expect);
  EXPECT_EQ(baselines::build_poisoned_dataset(local, hijack, plan, 7).pixels, out.pixels);
  EXPECT_THROW(baselines::build_poisoned_dataset(local, hijack, PoisonPlan{{3, 4}, 1.0}, 7), InvalidArgument);
}

TEST(PoisonedDataset, FractionLimitsInjectedSamples) {
  const auto local = tiny(4, 6, 1, 0);
  const auto hijack = tiny(2, 10, 2, 50);
  EXPECT_EQ(baselines::build_poisoned_dataset(local, hijack, PoisonPlan{{3, 1}, 0.5}, 7).size(), local.size() + 10);
}

TEST(ModelPoison, IdenticalModelGivesZeroDelta) {
  const auto g = nn::init_model(nn::ModelSpec{6, {4}, 3}, 1);
  const auto u = baselines::model_poison_update(g, g, baselines::ReplacementConfig{5.0}, 3);
  EXPECT_EQ(u.client_id, 3u);
  EXPECT_TRUE(u.delta.same_values(nn::zeros_like(g)));
}

TEST(ModelPoison, ScaledUpdateReplacesGlobalModel) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = nn::init_model(nn::ModelSpec{6, {4, 4}, 3}, seed);
    const auto x = nn::init_model(nn::ModelSpec{6, {4, 4}, 3}, seed + 100);
    fl::FLConfig cfg;
    cfg.n = 50;
    cfg.m = 1;
    cfg.eta = 10;
    const auto u = baselines::model_poison_update(g, x, baselines::ReplacementConfig::for_fl(cfg));
    const auto next = fl::aggregate(g, {u}, cfg.eta, cfg.n);
    for (std::size_t l = 0; l < next.layers.size(); ++l) {
      for (std::size_t i = 0; i < next.layers[l].weight.size(); ++i)
        ASSERT_NEAR(next.layers[l].weight.values[i], x.layers[l].weight.values[i], 1e-12);
      for (std::size_t i = 0; i < next.layers[l].bias.size(); ++i)
        ASSERT_NEAR(next.layers[l].bias.values[i], x.layers[l].bias.values[i], 1e-12);
    }
  }
  const auto a = nn::init_model(nn::ModelSpec{6, {4}, 3}, 1);
  const auto b = nn::init_model(nn::ModelSpec{6, {5}, 3}, 1);
  EXPECT_THROW(baselines::model_poison_update(a, b, {}), DimensionError);
}

TEST(BaselineAsr, DecodesThroughInversePlanAndMissesUnmapped) {
  // logits depend only on the bias: every sample is predicted as class `winner`
  auto p = nn::init_model(nn::ModelSpec{1, {1}, 4}, 0);
  std::fill(p.layers[1].weight.values.begin(), p.layers[1].weight.values.end(), 0.0);
  data::LabeledDataset test{"t", 2, {1, 1, 1}, {1, 2, 3, 4}, {0, 1, 1, 1}};
  const attack::ClassMapping m{{2, 0}, 3, 4};
  p.layers[1].bias.values = {5, 0, 0, 0};  // class 0 = M(1)
  EXPECT_DOUBLE_EQ(baselines::baseline_asr(p, test, m), 0.75);
  p.layers[1].bias.values = {0, 0, 5, 0};  // class 2 = M(0)
  EXPECT_DOUBLE_EQ(baselines::baseline_asr(p, test, m), 0.25);
  p.layers[1].bias.values = {0, 0, 0, 5};  // y*
  EXPECT_DOUBLE_EQ(baselines::baseline_asr(p, test, m), 0.0);
  p.layers[1].bias.values = {0, 5, 0, 0};  // unmapped class
  EXPECT_DOUBLE_EQ(baselines::baseline_asr(p, test, m), 0.0);
}

TEST(RunBaseline, EmptyHijackDataMatchesCleanRun) {
  const auto f = small_fl();
  const auto clean = fl::run_training(f.cfg, f.partition, f.orig.train, f.orig.test, f.init);
  baselines::BaselineSetup setup;
  setup.kind = baselines::BaselineKind::data_poison;
  setup.hijack_round = 3;
  data::LabeledDataset empty{"empty", 2, f.hijack.shape, {}, {}};
  const auto r = baselines::run_baseline_attack(f.cfg, f.partition, f.orig.train, f.orig.test, f.init, empty, setup);
  EXPECT_TRUE(r.training.final_params.same_values(clean.final_params));
}

TEST(RunBaseline, AdversaryIsLowestSelectedAndEarlierRoundsAreHonest) {
  const auto f = small_fl();
  const auto clean = fl::run_training(f.cfg, f.partition, f.orig.train, f.orig.test, f.init);
  for (auto kind : {baselines::BaselineKind::data_poison, baselines::BaselineKind::model_poison}) {
    baselines::BaselineSetup setup;
    setup.kind = kind;
    setup.hijack_round = 3;
    setup.replacement = baselines::ReplacementConfig::for_fl(f.cfg);
    const auto r =
        baselines::run_baseline_attack(f.cfg, f.partition, f.orig.train, f.orig.test, f.init, f.hijack, setup);
    EXPECT_EQ(r.adversary, fl::select_clients(3, f.cfg.n, f.cfg.m, f.cfg.master_seed).front());
    EXPECT_NO_THROW(r.mapping.validate());
    for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(r.training.logs[t].utility, clean.logs[t].utility);
    EXPECT_FALSE(r.training.final_params.same_values(clean.final_params));
  }
  baselines::BaselineSetup late;
  late.hijack_round = f.cfg.rounds;
  EXPECT_THROW(baselines::run_baseline_attack(f.cfg, f.partition, f.orig.train, f.orig.test, f.init, f.hijack, late),
               InvalidArgument);
}

TEST(RunBaseline, FixedPlanIsUsedVerbatim) {
  const auto f = small_fl();
  baselines::BaselineSetup setup;
  setup.kind = baselines::BaselineKind::data_poison;
  setup.hijack_round = 2;
  setup.plan = PoisonPlan{{3, 1}, 1.0};
  const auto r = baselines::run_baseline_attack(f.cfg, f.partition, f.orig.train, f.orig.test, f.init, f.hijack, setup);
  EXPECT_EQ(r.mapping.forward, (std::vector<std::size_t>{3, 1}));
  EXPECT_EQ(r.mapping.negative_class, 4u);
}
