// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_BUDGET_HPP
#define APMA_BUDGET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "apma/autodiff.hpp"
#include "apma/model.hpp"

namespace apma {

enum class MacKind { projection, linear_attention, original_attention, reweight };

inline std::string to_string(MacKind k) {
  switch (k) {
    case MacKind::projection: return "projection";
    case MacKind::linear_attention: return "linear-attention";
    case MacKind::original_attention: return "original-attention";
    case MacKind::reweight: return "reweight";
  }
  return "?";
}

struct MacEntry {
  std::string layer;  // matches the instrumentation label of the same computation
  MacKind kind = MacKind::projection;
  std::int64_t tokens = 0;
  // Projections use (c_in, c_out); attention uses (c_q, c_k, c_v).
  std::int64_t c_in = 0, c_out = 0;
  std::int64_t c_q = 0, c_k = 0, c_v = 0;
  std::int64_t macs = 0;
  bool counted = true;  // false: informational, excluded from the total
};

struct BudgetReport {
  std::vector<MacEntry> entries;
  std::int64_t total = 0;   // M_prune, per image
  std::int64_t target = 0;  // M_target, 0 when unset
  double loss = 0.0;
  std::int64_t informational = 0;  // reweight MACs, not part of the total
};

/// Per-image MAC count of the masked (or compacted) model. Projections cost
/// N * C_in * C_out; linear attention N*C_k*C_v + N*C_q*C_v (phi(K)^T V, then
/// phi(Q) times it); original attention N^2*C_q + N^2*C_v. The classifier
/// runs once on the pooled token.
inline BudgetReport compute_macs(const ModelSpec& spec, const MaskSet& masks) {
  check_masks(spec, masks);
  const std::int64_t n = static_cast<std::int64_t>(spec.tokens());
  const std::int64_t c = static_cast<std::int64_t>(spec.embed_dim);
  BudgetReport rep;
  auto proj = [&](std::string id, std::int64_t tokens, std::int64_t cin, std::int64_t cout) {
    MacEntry e;
    e.layer = std::move(id);
    e.kind = MacKind::projection;
    e.tokens = tokens;
    e.c_in = cin;
    e.c_out = cout;
    e.macs = tokens * cin * cout;
    rep.entries.push_back(e);
  };
  proj("embed", n, static_cast<std::int64_t>(spec.patch_dim()), c);
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const std::string pre = block_prefix(b);
    const auto& m = masks.blocks[b];
    const auto kq = static_cast<std::int64_t>(kept_count(m.qk));
    const auto kv = static_cast<std::int64_t>(kept_count(m.v));
    const auto kf = static_cast<std::int64_t>(kept_count(m.ffn));
    proj(pre + ".q", n, c, kq);
    proj(pre + ".k", n, c, kq);
    proj(pre + ".v", n, c, kv);
    if (spec.reweight) {
      MacEntry e;
      e.layer = pre + ".reweight";
      e.kind = MacKind::reweight;
      e.tokens = 1;
      e.c_in = kq;
      e.c_out = kq;
      e.macs = kq * kq;
      e.counted = false;
      rep.entries.push_back(e);
    }
    MacEntry att;
    att.layer = pre + ".attention";
    att.tokens = n;
    att.c_q = kq;
    att.c_k = kq;
    att.c_v = kv;
    if (spec.blocks[b].kind == AttentionKind::linear) {
      att.kind = MacKind::linear_attention;
      att.macs = n * att.c_k * att.c_v + n * att.c_q * att.c_v;
    } else {
      att.kind = MacKind::original_attention;
      att.macs = n * n * att.c_q + n * n * att.c_v;
    }
    rep.entries.push_back(att);
    proj(pre + ".o", n, kv, c);
    proj(pre + ".ffn1", n, c, kf);
    proj(pre + ".ffn2", n, kf, c);
  }
  proj("head", 1, c, static_cast<std::int64_t>(spec.num_classes));
  for (const auto& e : rep.entries) (e.counted ? rep.total : rep.informational) += e.macs;
  return rep;
}

/// lambda * |M_prune - M_target| / M_target.
inline double mac_loss(double m_prune, double m_target, double lambda) {
  if (!(m_target > 0.0)) throw ContractError("MAC target must be positive");
  return lambda * std::abs(m_prune - m_target) / m_target;
}

namespace ad {

/// M_prune as a differentiable function of the masks: kept counts are the
/// sums of (straight-through) mask values.
template <typename T>
Var<T> relaxed_macs(Tape<T>& tape, const ModelSpec& spec, const MaskVars<T>& masks) {
  if (masks.size() != spec.blocks.size()) throw DimensionError("mask/block count mismatch");
  const T n = T(spec.tokens());
  const T c = T(spec.embed_dim);
  T fixed = n * T(spec.patch_dim()) * c + c * T(spec.num_classes);
  auto total = tape.constant(Tensor<T>::scalar(T(0)));
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    auto kq = sum(masks[b].qk);
    auto kv = sum(masks[b].v);
    auto kf = sum(masks[b].ffn);
    // q, k, v, o, ffn1, ffn2 projections
    auto projections =
        add(add(affine(kq, T(2) * n * c), affine(kv, T(2) * n * c)), affine(kf, T(2) * n * c));
    Var<T> attention = spec.blocks[b].kind == AttentionKind::linear
                           ? affine(mul(kq, kv), T(2) * n)
                           : affine(add(kq, kv), n * n);
    total = add(total, add(projections, attention));
  }
  return affine(total, T(1), fixed);
}

/// Differentiable budget loss: lambda * |M - M_target| / M_target.
template <typename T>
Var<T> mac_loss(const Var<T>& m_prune, double m_target, double lambda) {
  if (!(m_target > 0.0)) throw ContractError("MAC target must be positive");
  auto diff = affine(m_prune, T(1), T(-m_target));
  return scale(abs(diff), T(lambda / m_target));
}

}  // namespace ad
}  // namespace apma

#endif  // APMA_BUDGET_HPP
