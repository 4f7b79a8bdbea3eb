// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_REWEIGHT_HPP
#define APMA_REWEIGHT_HPP

#include <cmath>

#include "apma/autodiff.hpp"

namespace apma {

/// Bias giving an initial channel scale of tanh(bias) = 0.76.
inline constexpr double kReweightInitBias = 0.9962150823451031;  // artanh(0.76)

/// Channel compensation scale for one token set F (N x C):
///   tanh(mean_tokens(F) * W + b), shape 1 x C.
template <typename T>
Tensor<T> reweight_forward(const Tensor<T>& features, const Tensor<T>& weight,
                           const Tensor<T>& bias) {
  require_matrix(features.shape(), "reweight_forward");
  const std::size_t n = features.rows(), c = features.cols();
  if (weight.shape() != Shape{c, c} || bias.size() != c) {
    throw DimensionError("reweight parameters " + shape_str(weight.shape()) + "/" +
                         shape_str(bias.shape()) + " for " + std::to_string(c) +
                         " channels");
  }
  Tensor<T> pooled({1, c});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) pooled[j] += features(r, j);
  for (auto& v : pooled.values()) v /= T(n);
  Tensor<T> out = matmul(pooled, weight);
  for (std::size_t j = 0; j < c; ++j) out[j] = std::tanh(out[j] + bias[j]);
  return out;
}

namespace ad {

/// Taped variant over B stacked token sets of `tokens` rows: returns B x C.
template <typename T>
Var<T> reweight_forward(const Var<T>& features, const Var<T>& weight, const Var<T>& bias,
                        std::size_t tokens) {
  auto pooled = segment_mean_rows(features, tokens);
  return tanh(add_row(matmul(pooled, weight), bias));
}

/// Multiplies each token set's rows by its own compensation scale.
template <typename T>
Var<T> apply_reweight(const Var<T>& query, const Var<T>& weight, const Var<T>& bias,
                      std::size_t tokens) {
  return segment_mul_rows(query, reweight_forward(query, weight, bias, tokens), tokens);
}

}  // namespace ad
}  // namespace apma

#endif  // APMA_REWEIGHT_HPP
