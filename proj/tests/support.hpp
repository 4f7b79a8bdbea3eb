// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

// Fixtures shared by the unit tests and the acceptance runner.

#ifndef APMA_TESTS_SUPPORT_HPP
#define APMA_TESTS_SUPPORT_HPP

#include <algorithm>
#include <numeric>
#include <random>

#include "apma/log.hpp"
#include "apma/pruning.hpp"

namespace apma::testing {

/// Masks as pruning-core produces them: random indicators through refresh.
/// `spread` widens the indicator range so more channels cross the threshold.
inline MaskSet refreshed_masks(const ModelSpec& spec, const ModelParams<float>& params,
                               std::uint64_t seed, float spread = 0.6f) {
  log::ScopedSink quiet(nullptr);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.0f, spread);
  auto layers = make_layers(spec, 0.0f);
  for (auto& l : layers)
    for (auto& v : l.indicator.values()) v = d(rng);
  refresh_all(layers, params);
  return masks_from_layers(spec, layers);
}

/// Per-head aligned masks drawn directly, without the projection weights.
inline MaskSet aligned_masks(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto m = MaskSet::ones(spec);
  auto thin = [&](Tensor<float>& t, std::size_t heads) {
    const std::size_t w = t.size() / heads, keep = 1 + rng() % w;
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<std::size_t> idx(w);
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t i = keep; i < w; ++i) t[h * w + idx[i]] = 0.0f;
    }
  };
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    thin(m.blocks[b].qk, spec.blocks[b].heads);
    thin(m.blocks[b].v, spec.blocks[b].heads);
    thin(m.blocks[b].ffn, 1);
  }
  return m;
}

}  // namespace apma::testing

#endif  // APMA_TESTS_SUPPORT_HPP
