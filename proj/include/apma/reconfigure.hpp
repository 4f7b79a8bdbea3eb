// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_RECONFIGURE_HPP
#define APMA_RECONFIGURE_HPP

#include <random>
#include <string>
#include <vector>

#include "apma/budget.hpp"
#include "apma/model.hpp"

namespace apma {

/// Kept channel indices of one prunable output, grouped by head. Indices are
/// global (into the uncompacted width) and ascending within each head.
struct HeadPlan {
  std::vector<std::vector<std::size_t>> heads;

  std::size_t head_width() const { return heads.empty() ? 0 : heads.front().size(); }
  std::vector<std::size_t> flat() const {
    std::vector<std::size_t> out;
    for (const auto& h : heads) out.insert(out.end(), h.begin(), h.end());
    return out;
  }
  bool operator==(const HeadPlan&) const = default;
};

struct BlockPlan {
  HeadPlan qk;   // query and key columns, reweight rows/columns
  HeadPlan v;    // value columns, output-projection rows
  HeadPlan ffn;  // first FFN matrix columns, second FFN matrix rows
  bool operator==(const BlockPlan&) const = default;
};

struct CompactPlan {
  std::vector<BlockPlan> blocks;
  bool operator==(const CompactPlan&) const = default;
};

inline HeadPlan plan_layer(const Tensor<float>& mask, std::size_t heads,
                           const std::string& layer) {
  HeadPlan p;
  p.heads.resize(heads);
  const std::size_t w = mask.size() / heads;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != 0.0f) p.heads[i / w].push_back(i);
  for (std::size_t h = 1; h < heads; ++h) {
    if (p.heads[h].size() != p.heads[0].size()) {
      std::string counts;
      for (std::size_t k = 0; k < heads; ++k)
        counts += (k ? "," : "") + std::to_string(p.heads[k].size());
      throw MisalignmentError(
          "channel misalignment in " + layer + ": kept per head = [" + counts + "]", layer);
    }
  }
  if (p.head_width() == 0)
    throw ContractError("layer " + layer + " keeps no channels; cannot compact");
  return p;
}

/// Compaction plan from refresh-produced masks. Heads must keep equal counts.
inline CompactPlan plan(const MaskSet& masks, const ModelSpec& spec) {
  check_masks(spec, masks);
  CompactPlan out;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const std::string pre = block_prefix(b);
    const auto& m = masks.blocks[b];
    const std::size_t h = spec.blocks[b].heads;
    out.blocks.push_back({plan_layer(m.qk, h, pre + ".qk"), plan_layer(m.v, h, pre + ".v"),
                          plan_layer(m.ffn, 1, pre + ".ffn")});
  }
  return out;
}

namespace detail {

inline Tensor<float> gather_cols(const Tensor<float>& t, const std::vector<std::size_t>& idx) {
  if (t.rank() == 1) {
    Tensor<float> out({idx.size()});
    for (std::size_t j = 0; j < idx.size(); ++j) out[j] = t[idx[j]];
    return out;
  }
  Tensor<float> out({t.rows(), idx.size()});
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t j = 0; j < idx.size(); ++j) out(r, j) = t(r, idx[j]);
  return out;
}

inline Tensor<float> gather_rows(const Tensor<float>& t, const std::vector<std::size_t>& idx) {
  Tensor<float> out({idx.size(), t.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.data() + idx[i] * t.cols(), t.cols(), out.data() + i * t.cols());
  return out;
}

}  // namespace detail

struct CompactModel {
  ModelSpec spec;
  ModelParams<float> params;
};

/// Physically removes unplanned channels. Head counts are unchanged; each
/// head shrinks to the planned width.
inline CompactModel compact(const ModelParams<float>& params, const ModelSpec& spec,
                            const CompactPlan& cplan) {
  if (cplan.blocks.size() != spec.blocks.size())
    throw DimensionError("plan covers " + std::to_string(cplan.blocks.size()) +
                         " blocks, model has " + std::to_string(spec.blocks.size()));
  CompactModel out{spec, params};
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const std::string pre = block_prefix(b);
    const auto qk = cplan.blocks[b].qk.flat();
    const auto v = cplan.blocks[b].v.flat();
    const auto ffn = cplan.blocks[b].ffn.flat();
    auto& p = out.params.tensors;
    p[pre + ".attn.q"] = detail::gather_cols(params.at(pre + ".attn.q"), qk);
    p[pre + ".attn.k"] = detail::gather_cols(params.at(pre + ".attn.k"), qk);
    p[pre + ".attn.v"] = detail::gather_cols(params.at(pre + ".attn.v"), v);
    p[pre + ".attn.o"] = detail::gather_rows(params.at(pre + ".attn.o"), v);
    if (spec.reweight) {
      p[pre + ".reweight.w"] =
          detail::gather_cols(detail::gather_rows(params.at(pre + ".reweight.w"), qk), qk);
      p[pre + ".reweight.b"] = detail::gather_cols(params.at(pre + ".reweight.b"), qk);
    }
    p[pre + ".ffn.w1"] = detail::gather_cols(params.at(pre + ".ffn.w1"), ffn);
    p[pre + ".ffn.b1"] = detail::gather_cols(params.at(pre + ".ffn.b1"), ffn);
    p[pre + ".ffn.w2"] = detail::gather_rows(params.at(pre + ".ffn.w2"), ffn);
    auto& bs = out.spec.blocks[b];
    bs.qk_dim = qk.size();
    bs.v_dim = v.size();
    bs.ffn_hidden = ffn.size();
  }
  out.spec.validate();
  check_layout(out.spec, out.params);
  return out;
}

/// Uniform [0, 1) images for equivalence trials.
inline Tensor<float> random_images(const ModelSpec& spec, std::size_t count,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Tensor<float> out({count, spec.image_size, spec.image_size, spec.channels});
  for (auto& v : out.values()) v = d(rng);
  return out;
}

struct EquivalenceReport {
  std::size_t trials = 0;
  double max_abs_deviation = 0.0;
  double argmax_agreement = 0.0;  // fraction in [0, 1]
  std::int64_t macs_masked = 0;
  std::int64_t macs_compact = 0;
  std::vector<double> block_deviation;  // max-abs residual-stream deviation per block
};

/// Runs both models on `trials` random inputs. Throws VerificationError when
/// logits deviate by more than `tolerance` (naming the first block whose
/// residual stream diverges) or when the MAC counts differ.
inline EquivalenceReport verify_equivalence(const ModelSpec& spec,
                                            const ModelParams<float>& params,
                                            const MaskSet& masks,
                                            const ModelSpec& compact_spec,
                                            const ModelParams<float>& compact_params,
                                            std::size_t trials, std::uint64_t seed = 7,
                                            double tolerance = 1e-4,
                                            std::size_t batch = 64) {
  EquivalenceReport rep;
  rep.trials = trials;
  rep.block_deviation.assign(spec.blocks.size(), 0.0);
  const MaskSet ones = MaskSet::ones(compact_spec);
  std::size_t agree = 0;
  for (std::size_t done = 0; done < trials; done += batch) {
    const std::size_t nb = std::min(batch, trials - done);
    const auto images = random_images(spec, nb, seed + done);
    ForwardProbe<float> pa, pb;
    ad::Tape<float> ta(false), tb(false);
    const auto la = forward_model(ta, spec, bind_params(ta, params, false),
                                  bind_masks<float>(ta, masks, false), images, &pa)
                        .value();
    const auto lb = forward_model(tb, compact_spec, bind_params(tb, compact_params, false),
                                  bind_masks<float>(tb, ones, false), images, &pb)
                        .value();
    for (std::size_t b = 0; b < spec.blocks.size(); ++b)
      rep.block_deviation[b] = std::max<double>(
          rep.block_deviation[b], max_abs_diff(pa.block_outputs[b], pb.block_outputs[b]));
    rep.max_abs_deviation = std::max<double>(rep.max_abs_deviation, max_abs_diff(la, lb));
    const auto aa = argmax_rows(la), ab = argmax_rows(lb);
    for (std::size_t i = 0; i < nb; ++i) agree += aa[i] == ab[i];
  }
  rep.argmax_agreement = trials ? double(agree) / double(trials) : 1.0;
  rep.macs_masked = compute_macs(spec, masks).total;
  rep.macs_compact = compute_macs(compact_spec, ones).total;
  if (rep.max_abs_deviation > tolerance) {
    std::string block = "head";
    for (std::size_t b = 0; b < rep.block_deviation.size(); ++b)
      if (rep.block_deviation[b] > tolerance) {
        block = block_prefix(b);
        break;
      }
    throw VerificationError("compact model deviates by " +
                                std::to_string(rep.max_abs_deviation) +
                                "; first diverging block: " + block,
                            block);
  }
  if (rep.macs_masked != rep.macs_compact) {
    throw VerificationError("compact model MACs " + std::to_string(rep.macs_compact) +
                                " differ from masked budget " +
                                std::to_string(rep.macs_masked),
                            "budget");
  }
  return rep;
}

}  // namespace apma

#endif  // APMA_RECONFIGURE_HPP
