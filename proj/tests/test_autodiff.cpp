#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "hijackfl/autodiff.hpp"
#include "hijackfl/optim.hpp"
#include "hijackfl/rng.hpp"
#include "hijackfl/tensor.hpp"

#include "fd_oracle.hpp"

using namespace hijackfl;
using namespace hijackfl::autodiff;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor::matrix(r, c, std::move(v)); }

}  // namespace

TEST(Tensor, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
  EXPECT_EQ(Tensor::scalar(3.0).size(), 1u);
}

TEST(Affine, IdentityWeight) {
  Graph g;
  auto y = affine(g.constant(mat(1, 2, {1, 2})), g.constant(mat(2, 2, {1, 0, 0, 1})),
                  g.constant(Tensor::vector({0, 0})));
  EXPECT_EQ(g.value(y).values, (std::vector<double>{1, 2}));
}

TEST(Affine, DotPlusBias) {
  Graph g;
  auto y = affine(g.constant(mat(1, 2, {1, 1})), g.constant(mat(2, 1, {2, 3})), g.constant(Tensor::vector({1})));
  EXPECT_EQ(g.value(y).values, (std::vector<double>{6}));
}

TEST(Affine, BiasGradientOfSumIsOnes) {
  Graph g;
  auto b = g.parameter(Tensor::vector({0.5, -1, 2}));
  auto y = affine(g.constant(mat(2, 2, {1, 2, 3, 4})), g.constant(mat(2, 3, {1, 2, 3, 4, 5, 6})), b);
  g.backward(sum(y));
  // two batch rows, so each bias entry receives 2
  EXPECT_EQ(g.grad(b), (std::vector<double>{2, 2, 2}));
}

TEST(Affine, ShapeMismatchIsDimensionError) {
  Graph g;
  EXPECT_THROW(affine(g.constant(mat(1, 3, {1, 2, 3})), g.constant(mat(2, 2, {1, 0, 0, 1})),
                      g.constant(Tensor::vector({0, 0}))),
               DimensionError);
  EXPECT_THROW(affine(g.constant(mat(1, 2, {1, 2})), g.constant(mat(2, 2, {1, 0, 0, 1})),
                      g.constant(Tensor::vector({0, 0, 0}))),
               DimensionError);
}

TEST(Relu, ValuesAndGradient) {
  Graph g;
  auto x = g.parameter(Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(g.value(relu(x)).values, (std::vector<double>{0, 0, 2}));
  Graph g2;
  auto x2 = g2.parameter(Tensor::vector({-1, 2}));
  g2.backward(sum(relu(x2)));
  EXPECT_EQ(g2.grad(x2), (std::vector<double>{0, 1}));
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Graph g;
  auto x = g.parameter(Tensor::vector({0.0}));
  g.backward(sum(relu(x)));
  EXPECT_EQ(g.grad(x)[0], 0.0);
}

TEST(Relu, Idempotent) {
  Rng rng(5);
  std::normal_distribution<double> n(0, 3);
  std::vector<double> v(200);
  for (auto& x : v) x = n(rng);
  Graph g;
  auto once = relu(g.constant(Tensor::vector(v)));
  auto twice = relu(once);
  EXPECT_EQ(g.value(once).values, g.value(twice).values);
}

TEST(Sigmoid, ValueSymmetryAndSlope) {
  Graph g;
  auto x = g.parameter(Tensor::vector({0.0}));
  auto s = sigmoid(x);
  EXPECT_EQ(g.value(s)[0], 0.5);
  g.backward(sum(s));
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 0.25);
  for (double v : {-30.0, -2.5, -0.1, 0.7, 4.0, 40.0})
    EXPECT_NEAR(sigmoid_value(v), 1.0 - sigmoid_value(-v), 1e-15);
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  Graph g;
  const std::vector<std::size_t> t{2};
  auto l = softmax_cross_entropy(g.constant(mat(1, 4, {0.3, 0.3, 0.3, 0.3})), t);
  EXPECT_NEAR(g.value(l)[0], std::log(4.0), 1e-14);
}

TEST(SoftmaxCrossEntropy, ConfidentLogitsNearZero) {
  Graph g;
  const std::vector<std::size_t> t{0};
  auto l = softmax_cross_entropy(g.constant(mat(1, 4, {100, 0, 0, 0})), t);
  EXPECT_LT(g.value(l)[0], 1e-40);
  EXPECT_GE(g.value(l)[0], 0.0);
}

TEST(SoftmaxCrossEntropy, GradientRowsSumToZero) {
  Graph g;
  auto z = g.parameter(mat(3, 4, {1, -2, 0.5, 3, 0, 0, 0, 0, -4, 2, 9, 1}));
  const std::vector<std::size_t> t{3, 0, 1};
  g.backward(softmax_cross_entropy(z, t));
  const auto gr = g.grad(z);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(gr[r * 4] + gr[r * 4 + 1] + gr[r * 4 + 2] + gr[r * 4 + 3], 0.0, 1e-15);
}

TEST(SoftmaxCrossEntropy, TargetOutOfRange) {
  Graph g;
  const std::vector<std::size_t> t{4};
  EXPECT_THROW(softmax_cross_entropy(g.constant(mat(1, 4, {0, 0, 0, 0})), t), InvalidArgument);
}

TEST(L2Distance, MeanOfSquares) {
  Graph g;
  auto a = g.constant(Tensor::vector({0, 3}));
  auto b = g.constant(Tensor::vector({4, 0}));
  EXPECT_EQ(g.value(l2_distance(a, b))[0], 12.5);
  EXPECT_EQ(g.value(l2_distance(a, a))[0], 0.0);
  EXPECT_EQ(g.value(l2_distance(b, a))[0], g.value(l2_distance(a, b))[0]);
  EXPECT_THROW(l2_distance(a, g.constant(Tensor::vector({1, 2, 3}))), DimensionError);
}

TEST(Backward, SquareSum) {
  Graph g;
  auto x = g.parameter(Tensor::vector({3}));
  g.backward(sum(square(x)));
  EXPECT_EQ(g.grad(x), (std::vector<double>{6}));
}

TEST(Backward, UnrelatedTensorGetsZeros) {
  Graph g;
  auto x = g.parameter(Tensor::vector({1, 2}));
  auto unrelated = g.parameter(Tensor::vector({5, 5, 5}));
  g.backward(sum(square(x)));
  EXPECT_EQ(g.grad(unrelated), (std::vector<double>{0, 0, 0}));
}

TEST(Backward, NonScalarLossRejected) {
  Graph g;
  auto x = g.parameter(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(square(x)), DimensionError);
}

TEST(Backward, VisitsEachOperationOnce) {
  Graph g;
  auto x = g.parameter(Tensor::vector({1, 2}));
  auto y = square(x);
  auto z = add(y, y);  // diamond: y is consumed twice
  auto loss = sum(mul(z, x));
  g.backward(loss);
  EXPECT_EQ(g.last_backward_visits(), 4u);
  // d/dx sum(2x^2 * x) = 6x^2
  EXPECT_EQ(g.grad(x), (std::vector<double>{6, 24}));
}

TEST(Optim, SgdStep) {
  std::vector<double> p{1.0};
  const std::vector<double> gr{2.0};
  optim::sgd_step(p, gr, 0.1);
  EXPECT_DOUBLE_EQ(p[0], 0.8);
  const std::vector<double> zero{0.0};
  optim::sgd_step(p, zero, 0.1);
  EXPECT_DOUBLE_EQ(p[0], 0.8);
}

TEST(Optim, AdamFirstStepMovesByLr) {
  std::vector<double> p{1.0, -3.0};
  const std::vector<double> gr{1.0, -250.0};
  optim::AdamState st(2);
  optim::adam_step(p, gr, st, optim::AdamConfig{0.01});
  EXPECT_NEAR(p[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p[1], -3.0 + 0.01, 1e-9);
  EXPECT_EQ(st.step, 1u);
}

TEST(Determinism, SameSeedSameOutputs) {
  auto run = [] {
    Rng rng = make_stream(42, "det");
    std::normal_distribution<double> n;
    std::vector<double> w(12), x(8);
    for (auto& v : w) v = n(rng);
    for (auto& v : x) v = n(rng);
    Graph g;
    auto wv = g.parameter(mat(4, 3, w));
    auto out = sigmoid(affine(g.constant(mat(2, 4, x)), wv, g.constant(Tensor::vector({0.1, 0.2, 0.3}))));
    g.backward(sum(square(out)));
    auto vals = g.value(out).values;
    auto gr = g.grad(wv);
    vals.insert(vals.end(), gr.begin(), gr.end());
    return vals;
  };
  EXPECT_EQ(run(), run());
  EXPECT_NE(stream_seed(1, "a"), stream_seed(1, "b"));
  EXPECT_NE(stream_seed(1, "a", {1}), stream_seed(1, "a", {2}));
}

TEST(FiniteDifference, RandomGraphsMatchCentralDifferences) {
  const auto rep = testkit::fd::check_random_graphs(2024, 150);
  EXPECT_EQ(rep.failures, 0u) << "worst relative error " << rep.worst;
  EXPECT_LT(rep.worst, 1e-4);
  EXPECT_LT(rep.skipped, 1000u);
  RecordProperty("worst_relative_error", std::to_string(rep.worst));
}


TEST(L2Distance, ConvexityProperty) {
  Rng rng = make_stream(7, "l2_convexity");
  std::normal_distribution<double> n(0, 5);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<std::size_t> len(1, 32);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto k = len(rng);
    std::vector<double> a(k), b(k), c(k), mix(k);
    for (std::size_t i = 0; i < k; ++i) a[i] = n(rng), b[i] = n(rng), c[i] = n(rng);
    const double t = u(rng);
    for (std::size_t i = 0; i < k; ++i) mix[i] = t * a[i] + (1 - t) * b[i];
    EXPECT_LE(l2_distance_value(mix, c), t * l2_distance_value(a, c) + (1 - t) * l2_distance_value(b, c) + 1e-9);
  }
}
