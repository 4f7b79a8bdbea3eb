// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_INDICATOR_INIT_HPP
#define APMA_INDICATOR_INIT_HPP

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "apma/linalg.hpp"
#include "apma/model.hpp"

namespace apma {

/// Q_i K_i^T V for one channel i, evaluated as Q_i (K_i^T V) so the N x N
/// token map is never formed.
template <typename T>
Tensor<T> channel_contribution(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t i) {
  require_matrix(q.shape(), "channel_contribution");
  if (q.shape() != k.shape() || v.rows() != q.rows())
    throw DimensionError("channel_contribution shapes " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  if (i >= q.cols()) throw ContractError("channel index out of range");
  const std::size_t n = q.rows(), c = v.cols();
  std::vector<T> kv(c, T(0));  // K_i^T V
  for (std::size_t r = 0; r < n; ++r) {
    const T kr = k(r, i);
    for (std::size_t j = 0; j < c; ++j) kv[j] += kr * v(r, j);
  }
  Tensor<T> out({n, c});
  for (std::size_t r = 0; r < n; ++r) {
    const T qr = q(r, i);
    for (std::size_t j = 0; j < c; ++j) out(r, j) = qr * kv[j];
  }
  return out;
}

/// L1 distance between two nonincreasing spectra of equal length.
template <typename T>
double spectrum_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) throw DimensionError("spectrum lengths differ");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(double(a[i]) - double(b[i]));
  return d;
}

/// Per-channel distance T_i = || sigma(Q K^T V) - sigma(Q_i K_i^T V) ||_1 for
/// one image. Computed in 64-bit.
template <typename T>
Tensor<double> channel_saliency(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  const auto qd = q.template cast<double>();
  const auto kd = k.template cast<double>();
  const auto vd = v.template cast<double>();
  const auto full = matmul(qd, matmul_tn(kd, vd));
  const auto sigma = singular_values(full);
  Tensor<double> out({q.cols()});
  for (std::size_t i = 0; i < q.cols(); ++i) {
    out[i] = spectrum_distance(sigma, singular_values(channel_contribution(qd, kd, vd, i)));
  }
  return out;
}

/// Accumulated saliency of one layer over a pass.
struct ChannelSaliency {
  std::string layer;
  Tensor<double> total;
  std::size_t images = 0;

  void accumulate(const Tensor<double>& per_image) {
    if (total.empty()) total = Tensor<double>(per_image.shape());
    if (per_image.shape() != total.shape()) throw DimensionError("saliency length changed");
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += per_image[i];
    ++images;
  }
};

/// Min-max normalization to [0, 1]; a constant input maps to 0.25 throughout.
template <typename T>
Tensor<float> normalize_to_indicator(const Tensor<T>& saliency) {
  if (saliency.empty()) throw ContractError("normalize_to_indicator of an empty vector");
  const auto [lo, hi] = std::minmax_element(saliency.values().begin(), saliency.values().end());
  const double mn = *lo, mx = *hi;
  Tensor<float> out({saliency.size()});
  if (mx == mn) {
    out.fill(0.25f);
    return out;
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>((double(saliency[i]) - mn) / (mx - mn));
  out[std::size_t(lo - saliency.values().begin())] = 0.0f;
  out[std::size_t(hi - saliency.values().begin())] = 1.0f;
  return out;
}

/// Runs the unpruned model over `batches` and accumulates per-channel
/// saliency of the query/key channels of every listed linear-attention block.
inline std::map<std::size_t, ChannelSaliency> saliency_pass(
    const ModelSpec& spec, const ModelParams<float>& params,
    const std::vector<Tensor<float>>& batches, const std::vector<std::size_t>& blocks) {
  for (auto b : blocks)
    if (b >= spec.blocks.size() || spec.blocks[b].kind != AttentionKind::linear)
      throw ContractError("saliency pass on block " + std::to_string(b) +
                          ", which is not a linear-attention block");
  std::map<std::size_t, ChannelSaliency> acc;
  for (auto b : blocks) acc[b].layer = block_prefix(b) + ".qk";
  const MaskSet ones = MaskSet::ones(spec);
  const std::size_t n = spec.tokens();
  std::size_t image_base = 0;
  for (const auto& images : batches) {
    ForwardProbe<float> probe;
    probe.on_qkv = [&](std::size_t b, const Tensor<float>& q, const Tensor<float>& k,
                       const Tensor<float>& v) {
      auto it = acc.find(b);
      if (it == acc.end()) return;
      const std::size_t count = q.rows() / n;
      for (std::size_t img = 0; img < count; ++img) {
        auto rows = [&](const Tensor<float>& t) {
          Tensor<float> s({n, t.cols()});
          std::copy_n(t.data() + img * n * t.cols(), n * t.cols(), s.data());
          return s;
        };
        try {
          it->second.accumulate(channel_saliency(rows(q), rows(k), rows(v)));
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " (layer " + it->second.layer +
                                 ", image " + std::to_string(image_base + img) + ")",
                             e.residual());
        }
      }
    };
    ad::Tape<float> tape(false);
    forward_model(tape, spec, bind_params(tape, params, false), bind_masks<float>(tape, ones, false),
                  images, &probe);
    image_base += images.shape()[0];
  }
  return acc;
}

}  // namespace apma

#endif  // APMA_INDICATOR_INIT_HPP
