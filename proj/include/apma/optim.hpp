// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_OPTIM_HPP
#define APMA_OPTIM_HPP

#include <cmath>
#include <numbers>

#include "apma/tensor.hpp"

namespace apma {

struct AdamState {
  Tensor<float> first;
  Tensor<float> second;
  std::int64_t step = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One adaptive-moment step with decoupled weight decay: the decay term
/// shrinks the weight directly and never enters the moment estimates.
template <typename T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, AdamState& state, double lr,
                double weight_decay, const AdamConfig& cfg = {}) {
  if (grad.shape() != param.shape()) {
    throw DimensionError("adamw gradient " + shape_str(grad.shape()) + " for parameter " +
                         shape_str(param.shape()));
  }
  if (state.first.shape() != param.shape()) {
    state.first = Tensor<float>(param.shape());
    state.second = Tensor<float>(param.shape());
    state.step = 0;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = cfg.beta1 * state.first[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * state.second[i] + (1.0 - cfg.beta2) * g * g;
    state.first[i] = static_cast<float>(m);
    state.second[i] = static_cast<float>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    double w = param[i];
    w -= lr * weight_decay * w;
    w -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    param[i] = static_cast<T>(w);
  }
}

/// Cosine interpolation from `start` at step 0 to `end` at `total_steps`.
inline double cosine_lr(double start, double end, std::int64_t step,
                        std::int64_t total_steps) {
  if (total_steps <= 1) return start;
  const double t = std::min(1.0, double(step) / double(total_steps - 1));
  return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace apma

#endif  // APMA_OPTIM_HPP
