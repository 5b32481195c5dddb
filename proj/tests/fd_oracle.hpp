#pragma once

// Random computation graphs checked against central finite differences.

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "hijackfl/autodiff.hpp"
#include "hijackfl/rng.hpp"

namespace hijackfl::testkit::fd {

using namespace hijackfl::autodiff;

enum class Op { relu, sigmoid, square, scale, add_scalar, add, mul, add_row, affine };
enum class Reduce { sum, mean, l2, xent };

struct Recipe {
  std::size_t batch = 1, width = 1;
  std::vector<Op> ops;
  std::vector<double> consts;  // scale / add_scalar constants, in op order
  std::vector<std::size_t> widths;  // output width of each affine, in op order
  Reduce reduce = Reduce::sum;
  std::vector<std::size_t> targets;
  std::vector<Tensor> params;  // inputs of every parameterised op, then the reduction operand
};

/// Evaluates the recipe with `params`; when `grads` is given also runs
/// backward and stores the gradient of every parameter. Returns the loss and
/// the smallest |pre-activation| seen by a relu (kink proximity).
inline std::pair<double, double> evaluate(const Recipe& r, const std::vector<Tensor>& params,
                                   std::vector<std::vector<double>>* grads) {
  Graph g;
  std::vector<Var> pv;
  for (const auto& p : params) pv.push_back(g.parameter(p));
  std::size_t next = 0, ci = 0, wi = 0;
  Var v = pv[next++];
  double kink = 1e300;
  for (auto op : r.ops) {
    switch (op) {
      case Op::relu:
        for (double x : g.value(v).values) kink = std::min(kink, std::abs(x));
        v = relu(v);
        break;
      case Op::sigmoid: v = sigmoid(v); break;
      case Op::square: v = square(v); break;
      case Op::scale: v = scale(v, r.consts[ci++]); break;
      case Op::add_scalar: v = add_scalar(v, r.consts[ci++]); break;
      case Op::add: v = add(v, pv[next++]); break;
      case Op::mul: v = mul(v, pv[next++]); break;
      case Op::add_row: v = add_row_vector(v, pv[next++]); break;
      case Op::affine: {
        auto w = pv[next++];
        auto b = pv[next++];
        ++wi;
        v = affine(v, w, b);
        break;
      }
    }
  }
  Var loss;
  switch (r.reduce) {
    case Reduce::sum: loss = sum(v); break;
    case Reduce::mean: loss = mean(v); break;
    case Reduce::l2: loss = l2_distance(v, pv[next++]); break;
    case Reduce::xent: loss = softmax_cross_entropy(v, r.targets); break;
  }
  if (grads) {
    g.backward(loss);
    grads->clear();
    for (auto p : pv) grads->push_back(g.grad(p));
  }
  return {g.value(loss)[0], kink};
}

inline Recipe random_recipe(Rng& rng) {
  std::uniform_int_distribution<int> pick_op(0, 8), depth(1, 4), dim(1, 4), pick_red(0, 3);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  auto rand_tensor = [&](Shape s) {
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& x : t.values) x = u(rng);
    return t;
  };
  Recipe r;
  r.batch = static_cast<std::size_t>(dim(rng) % 3 + 1);
  std::size_t width = static_cast<std::size_t>(dim(rng));
  r.params.push_back(rand_tensor({r.batch, width}));
  const int d = depth(rng);
  for (int k = 0; k < d; ++k) {
    const auto op = static_cast<Op>(pick_op(rng));
    r.ops.push_back(op);
    switch (op) {
      case Op::scale:
      case Op::add_scalar: r.consts.push_back(u(rng)); break;
      case Op::add:
      case Op::mul: r.params.push_back(rand_tensor({r.batch, width})); break;
      case Op::add_row: r.params.push_back(rand_tensor({width})); break;
      case Op::affine: {
        const auto out = static_cast<std::size_t>(dim(rng));
        r.params.push_back(rand_tensor({width, out}));
        r.params.push_back(rand_tensor({out}));
        r.widths.push_back(out);
        width = out;
        break;
      }
      default: break;
    }
  }
  r.reduce = static_cast<Reduce>(pick_red(rng));
  if (r.reduce == Reduce::l2) r.params.push_back(rand_tensor({r.batch, width}));
  if (r.reduce == Reduce::xent) {
    std::uniform_int_distribution<std::size_t> t(0, width - 1);
    for (std::size_t b = 0; b < r.batch; ++b) r.targets.push_back(t(rng));
  }
  return r;
}

struct Report {
  std::size_t graphs = 0;
  std::size_t skipped = 0;
  std::size_t entries = 0;
  std::size_t failures = 0;
  double worst = 0.0;
};

/// Checks `count` random graphs whose relu inputs stay clear of the kink.
inline Report check_random_graphs(std::uint64_t seed, std::size_t count, double step = 1e-5,
                                  double tolerance = 1e-4) {
  Rng rng = make_stream(seed, "fd_graphs");
  Report rep;
  while (rep.graphs < count) {
    const Recipe r = random_recipe(rng);
    std::vector<std::vector<double>> grads;
    const auto [loss, kink] = evaluate(r, r.params, &grads);
    if (kink < 1e-3 || !std::isfinite(loss)) {
      ++rep.skipped;
      continue;
    }
    for (std::size_t p = 0; p < r.params.size(); ++p)
      for (std::size_t i = 0; i < r.params[p].size(); ++i) {
        auto plus = r.params, minus = r.params;
        plus[p].values[i] += step;
        minus[p].values[i] -= step;
        const double fd = (evaluate(r, plus, nullptr).first - evaluate(r, minus, nullptr).first) / (2 * step);
        const double an = grads[p][i];
        const double denom = std::abs(an) + std::abs(fd);
        if (denom <= 1e-8) continue;
        const double rel = std::abs(an - fd) / denom;
        ++rep.entries;
        rep.worst = std::max(rep.worst, rel);
        rep.failures += !(rel < tolerance);
      }
    ++rep.graphs;
  }
  return rep;
}

}  // namespace hijackfl::testkit::fd
