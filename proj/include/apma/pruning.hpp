// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_PRUNING_HPP
#define APMA_PRUNING_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "apma/autodiff.hpp"
#include "apma/log.hpp"
#include "apma/model.hpp"

namespace apma {

/// Cosine similarity between the columns of one head's projection slice
/// (C_in x C_h). A zero-norm column resembles nothing: its off-diagonal
/// entries are 0 and its diagonal entry is 1.
template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& head_projection) {
  require_matrix(head_projection.shape(), "similarity_matrix");
  const std::size_t rows = head_projection.rows(), ch = head_projection.cols();
  std::vector<double> norm(ch, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < ch; ++j)
      norm[j] += double(head_projection(r, j)) * double(head_projection(r, j));
  for (auto& n : norm) n = std::sqrt(n);
  for (std::size_t j = 0; j < ch; ++j)
    if (norm[j] == 0.0) log::warn("zero-norm channel " + std::to_string(j) + " in similarity");

  Tensor<T> s({ch, ch});
  for (std::size_t i = 0; i < ch; ++i) {
    s(i, i) = T(1);
    for (std::size_t j = i + 1; j < ch; ++j) {
      double v = 0.0;
      if (norm[i] > 0.0 && norm[j] > 0.0) {
        double dot = 0.0;
        for (std::size_t r = 0; r < rows; ++r)
          dot += double(head_projection(r, i)) * double(head_projection(r, j));
        v = std::clamp(dot / (norm[i] * norm[j]), -1.0, 1.0);
      }
      s(i, j) = s(j, i) = static_cast<T>(v);
    }
  }
  return s;
}

/// w_i = 1 + max_{n != i} |S[i, n]|, the Chebyshev-norm limit. A single
/// channel has nothing to resemble and gets weight 1.
template <typename T>
Tensor<T> similarity_weights(const Tensor<T>& similarity) {
  require_matrix(similarity.shape(), "similarity_weights");
  const std::size_t c = similarity.rows();
  Tensor<T> w({c});
  for (std::size_t i = 0; i < c; ++i) {
    T mx = T(0);
    for (std::size_t n = 0; n < c; ++n)
      if (n != i) mx = std::max(mx, std::abs(similarity(i, n)));
    w[i] = T(1) + mx;
  }
  return w;
}

/// Similarity weights of a full projection (C_in x C_out) split into heads.
template <typename T>
Tensor<T> head_similarity_weights(const Tensor<T>& projection, std::size_t heads) {
  require_matrix(projection.shape(), "head_similarity_weights");
  const std::size_t cout = projection.cols(), rows = projection.rows();
  if (heads == 0 || cout % heads) throw ContractError("output width not divisible by heads");
  const std::size_t ch = cout / heads;
  Tensor<T> w({cout});
  Tensor<T> slice({rows, ch});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < ch; ++j) slice(r, j) = projection(r, h * ch + j);
    const auto wh = similarity_weights(similarity_matrix(slice));
    std::copy(wh.values().begin(), wh.values().end(), w.data() + h * ch);
  }
  return w;
}

/// m* = w (elementwise) m.
template <typename T>
Tensor<T> weighted_indicator(const Tensor<T>& weights, const Tensor<T>& indicator) {
  if (weights.size() != indicator.size()) {
    throw ContractError("weighted_indicator lengths " + std::to_string(weights.size()) +
                        " and " + std::to_string(indicator.size()));
  }
  Tensor<T> out = indicator;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= weights[i];
  return out;
}

/// Channel order of one head by ascending value, ties by lower index.
template <typename T>
std::vector<std::size_t> head_ranking(const Tensor<T>& values, std::size_t head,
                                      std::size_t width) {
  std::vector<std::size_t> idx(width);
  std::iota(idx.begin(), idx.end(), head * width);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return idx;
}

/// Replaces each head's rank-r value by the mean of the rank-r values of all
/// heads, so every head ends with the same multiset of scores.
template <typename T>
Tensor<T> adjust_rank_average(const Tensor<T>& m_star, std::size_t heads) {
  if (heads == 0 || m_star.size() % heads) {
    throw ContractError("rank adjustment: " + std::to_string(m_star.size()) +
                        " channels do not split into " + std::to_string(heads) + " heads");
  }
  if (heads == 1) return m_star;
  const std::size_t width = m_star.size() / heads;
  std::vector<std::vector<std::size_t>> order(heads);
  for (std::size_t h = 0; h < heads; ++h) order[h] = head_ranking(m_star, h, width);
  Tensor<T> out(m_star.shape());
  for (std::size_t r = 0; r < width; ++r) {
    T acc = T(0);
    for (std::size_t h = 0; h < heads; ++h) acc += m_star[order[h][r]];
    const T avg = acc / T(heads);
    for (std::size_t h = 0; h < heads; ++h) out[order[h][r]] = avg;
  }
  return out;
}

/// Keep mask: 1 where the score is strictly below tau, 0 otherwise.
template <typename T>
Tensor<T> binarize(const Tensor<T>& m_star, T tau) {
  if (!(tau > T(0) && tau < T(1))) throw ContractError("threshold must lie in (0, 1)");
  Tensor<T> out(m_star.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m_star[i] < tau ? T(1) : T(0);
  return out;
}

/// Zeroes the output columns (and bias entries, when given) of pruned channels.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& weights, const Tensor<T>& mask) {
  const std::size_t cols = weights.rank() == 1 ? weights.size() : weights.cols();
  if (mask.size() != cols) {
    throw DimensionError("mask of length " + std::to_string(mask.size()) + " for weights " +
                         shape_str(weights.shape()));
  }
  Tensor<T> out = weights;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i % cols] == T(0)) out[i] = T(0);
  return out;
}

namespace ad {

/// Taped keep mask. The forward value is the binary mask; the backward pass
/// treats binarization of (tau - m*) as identity, so
///   dL/dm = -w (elementwise) dL/dmask.
/// The similarity weights enter as a detached constant.
template <typename T>
Var<T> indicator_mask(const Var<T>& indicator, const Tensor<T>& weights,
                      const Tensor<T>& mask_value, T tau) {
  auto m_star = mul(indicator, indicator.tape->constant(weights));
  auto margin = affine(m_star, T(-1), tau);
  return straight_through(margin, mask_value);
}

}  // namespace ad

enum class LayerRole { query_key, value, ffn_hidden };

/// One prunable output dimension and its indicator state. A query/key layer
/// drives both projections from one indicator; similarity comes from the
/// query projection.
struct PrunableLayer {
  std::string id;
  LayerRole role = LayerRole::ffn_hidden;
  std::size_t block = 0;
  std::vector<std::string> projections;
  std::size_t heads = 1;
  Tensor<float> indicator;  // m, learnable
  Tensor<float> weights;    // w, detached
  Tensor<float> adjusted;   // rank-averaged m*
  Tensor<float> mask;       // 1 kept, 0 pruned

  std::size_t width() const { return indicator.size(); }
};

struct RefreshOptions {
  float tau = 0.5f;
  bool similarity_weight = true;
  bool multihead_adjust = true;
  bool min_channel_guard = true;
};

/// Recomputes w, the adjusted m*, and the mask from the current projection.
/// Returns the number of heads rescued by the minimum-one-channel guard.
inline std::size_t refresh(PrunableLayer& layer, const Tensor<float>& projection,
                           const RefreshOptions& opt = {}) {
  if (projection.cols() != layer.width()) {
    throw DimensionError("layer " + layer.id + ": projection " +
                         shape_str(projection.shape()) + " for " +
                         std::to_string(layer.width()) + " channels");
  }
  layer.weights = opt.similarity_weight ? head_similarity_weights(projection, layer.heads)
                                        : Tensor<float>({layer.width()}, 1.0f);
  auto m_star = weighted_indicator(layer.weights, layer.indicator);
  layer.adjusted = opt.multihead_adjust ? adjust_rank_average(m_star, layer.heads) : m_star;
  layer.mask = binarize(layer.adjusted, opt.tau);
  std::size_t rescued = 0;
  if (opt.min_channel_guard) {
    const std::size_t w = layer.width() / layer.heads;
    for (std::size_t h = 0; h < layer.heads; ++h) {
      bool any = false;
      for (std::size_t j = h * w; j < (h + 1) * w; ++j) any = any || layer.mask[j] != 0.0f;
      if (any) continue;
      layer.mask[head_ranking(layer.adjusted, h, w).front()] = 1.0f;
      ++rescued;
    }
    if (rescued)
      log::warn("layer " + layer.id + ": " + std::to_string(rescued) +
                " head(s) kept their lowest-score channel");
  }
  return rescued;
}

/// Prunable layers of every block in (qk, v, ffn) order, indicators at `init`.
inline std::vector<PrunableLayer> make_layers(const ModelSpec& spec, float init) {
  std::vector<PrunableLayer> out;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const std::string pre = block_prefix(b);
    const std::size_t h = spec.blocks[b].heads;
    auto layer = [&](std::string id, LayerRole role, std::vector<std::string> proj,
                     std::size_t heads, std::size_t width) {
      PrunableLayer l;
      l.id = std::move(id);
      l.role = role;
      l.block = b;
      l.projections = std::move(proj);
      l.heads = heads;
      l.indicator = Tensor<float>({width}, init);
      l.weights = Tensor<float>({width}, 1.0f);
      l.adjusted = l.indicator;
      l.mask = Tensor<float>({width}, 1.0f);
      return l;
    };
    out.push_back(layer(pre + ".qk", LayerRole::query_key,
                        {pre + ".attn.q", pre + ".attn.k"}, h, spec.qk_dim(b)));
    out.push_back(layer(pre + ".v", LayerRole::value, {pre + ".attn.v"}, h, spec.v_dim(b)));
    out.push_back(layer(pre + ".ffn", LayerRole::ffn_hidden, {pre + ".ffn.w1"}, 1,
                        spec.blocks[b].ffn_hidden));
  }
  return out;
}

inline std::size_t refresh_all(std::vector<PrunableLayer>& layers,
                               const ModelParams<float>& params,
                               const RefreshOptions& opt = {}) {
  std::size_t rescued = 0;
  for (auto& l : layers) rescued += refresh(l, params.at(l.projections.front()), opt);
  return rescued;
}

inline MaskSet masks_from_layers(const ModelSpec& spec,
                                 const std::vector<PrunableLayer>& layers) {
  MaskSet m = MaskSet::ones(spec);
  for (const auto& l : layers) {
    auto& bm = m.blocks.at(l.block);
    switch (l.role) {
      case LayerRole::query_key: bm.qk = l.mask; break;
      case LayerRole::value: bm.v = l.mask; break;
      case LayerRole::ffn_hidden: bm.ffn = l.mask; break;
    }
  }
  check_masks(spec, m);
  return m;
}

}  // namespace apma

#endif  // APMA_PRUNING_HPP
