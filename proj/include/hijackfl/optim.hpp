#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "hijackfl/errors.hpp"

namespace hijackfl::optim {

/// p <- p - lr * g
inline void sgd_step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != grads.size()) throw DimensionError("sgd_step: size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

struct AdamConfig {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates; zero-initialised with step 0.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::span<double> params, std::span<const double> grads,
                      AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size() || state.m.size() != params.size()) {
    throw DimensionError("adam_step: size mismatch");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
  }
}

}  // namespace hijackfl::optim
