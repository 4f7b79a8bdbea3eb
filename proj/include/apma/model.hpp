// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_MODEL_HPP
#define APMA_MODEL_HPP

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "apma/autodiff.hpp"
#include "apma/reweight.hpp"

namespace apma {

enum class AttentionKind { original, linear };

inline std::string to_string(AttentionKind k) {
  return k == AttentionKind::original ? "original" : "linear";
}

inline AttentionKind attention_kind_from(const std::string& s) {
  if (s == "original") return AttentionKind::original;
  if (s == "linear") return AttentionKind::linear;
  throw ConfigError("unknown attention kind '" + s + "'");
}

struct BlockSpec {
  AttentionKind kind = AttentionKind::linear;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 128;
  // Query/key and value widths; 0 means the embedding width. Only compacted
  // models carry narrower widths.
  std::size_t qk_dim = 0;
  std::size_t v_dim = 0;

  bool operator==(const BlockSpec&) const = default;
};

struct ModelSpec {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t embed_dim = 64;
  std::vector<BlockSpec> blocks;
  std::size_t num_classes = 10;
  bool positional = false;
  bool reweight = true;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t qk_dim(std::size_t b) const {
    return blocks[b].qk_dim ? blocks[b].qk_dim : embed_dim;
  }
  std::size_t v_dim(std::size_t b) const {
    return blocks[b].v_dim ? blocks[b].v_dim : embed_dim;
  }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size) {
      throw ConfigError("image size " + std::to_string(image_size) +
                        " is not a multiple of patch size " + std::to_string(patch_size));
    }
    if (embed_dim == 0 || channels == 0 || num_classes == 0) {
      throw ConfigError("embed_dim, channels and num_classes must be positive");
    }
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& blk = blocks[b];
      const std::string where = "block " + std::to_string(b);
      if (blk.heads == 0) throw ConfigError(where + ": heads must be positive");
      if (embed_dim % blk.heads)
        throw ConfigError(where + ": embed_dim not divisible by heads");
      if (qk_dim(b) % blk.heads || v_dim(b) % blk.heads)
        throw ConfigError(where + ": projection width not divisible by heads");
      if (blk.ffn_hidden == 0) throw ConfigError(where + ": ffn_hidden must be positive");
    }
  }

  bool operator==(const ModelSpec&) const = default;
};

inline std::string block_prefix(std::size_t b) { return "blocks." + std::to_string(b); }

/// Names and shapes of every parameter the spec requires.
inline std::vector<std::pair<std::string, Shape>> param_layout(const ModelSpec& spec) {
  const std::size_t c = spec.embed_dim;
  std::vector<std::pair<std::string, Shape>> out;
  out.push_back({"embed.w", {spec.patch_dim(), c}});
  out.push_back({"embed.b", {c}});
  if (spec.positional) out.push_back({"pos", {spec.tokens(), c}});
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const std::string p = block_prefix(b);
    const std::size_t cq = spec.qk_dim(b), cv = spec.v_dim(b);
    const std::size_t hid = spec.blocks[b].ffn_hidden;
    out.push_back({p + ".norm1.gain", {c}});
    out.push_back({p + ".norm1.bias", {c}});
    out.push_back({p + ".attn.q", {c, cq}});
    out.push_back({p + ".attn.k", {c, cq}});
    out.push_back({p + ".attn.v", {c, cv}});
    out.push_back({p + ".attn.o", {cv, c}});
    out.push_back({p + ".attn.o_bias", {c}});
    if (spec.reweight) {
      out.push_back({p + ".reweight.w", {cq, cq}});
      out.push_back({p + ".reweight.b", {cq}});
    }
    out.push_back({p + ".norm2.gain", {c}});
    out.push_back({p + ".norm2.bias", {c}});
    out.push_back({p + ".ffn.w1", {c, hid}});
    out.push_back({p + ".ffn.b1", {hid}});
    out.push_back({p + ".ffn.w2", {hid, c}});
    out.push_back({p + ".ffn.b2", {c}});
  }
  out.push_back({"norm.gain", {c}});
  out.push_back({"norm.bias", {c}});
  out.push_back({"head.w", {c, spec.num_classes}});
  out.push_back({"head.b", {spec.num_classes}});
  return out;
}

template <typename T>
struct ModelParams {
  std::map<std::string, Tensor<T>> tensors;

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("missing parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("missing parameter '" + name + "'");
    return it->second;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
    return out;
  }

  bool operator==(const ModelParams&) const = default;
};

/// Checks that params hold exactly the tensors of the spec's layout.
template <typename T>
void check_layout(const ModelSpec& spec, const ModelParams<T>& params) {
  const auto layout = param_layout(spec);
  if (layout.size() != params.tensors.size()) {
    throw DimensionError("parameter set has " + std::to_string(params.tensors.size()) +
                         " tensors, layout expects " + std::to_string(layout.size()));
  }
  for (const auto& [name, shape] : layout) {
    const auto& t = params.at(name);
    if (t.shape() != shape) {
      throw DimensionError("parameter '" + name + "' has shape " + shape_str(t.shape()) +
                           ", expected " + shape_str(shape));
    }
  }
}

inline ModelParams<float> init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  ModelParams<float> p;
  for (const auto& [name, shape] : param_layout(spec)) {
    Tensor<float> t(shape);
    auto ends_with = [&](const char* s) {
      const std::string suf(s);
      return name.size() >= suf.size() &&
             name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends_with(".gain")) {
      t.fill(1.0f);
    } else if (ends_with("reweight.w")) {
      // zero: the initial scale is the constant tanh(bias)
    } else if (ends_with("reweight.b")) {
      t.fill(static_cast<float>(kReweightInitBias));
    } else if (name == "pos") {
      std::normal_distribution<float> d(0.0f, 0.02f);
      for (auto& v : t.values()) v = d(rng);
    } else if (shape.size() == 2) {
      std::normal_distribution<float> d(0.0f, 1.0f / std::sqrt(float(shape[0])));
      for (auto& v : t.values()) v = d(rng);
    }
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Channel masks

/// Binary keep masks (1 kept, 0 pruned) for one block's prunable outputs.
struct BlockMasks {
  Tensor<float> qk;   // shared by the query and key projections
  Tensor<float> v;
  Tensor<float> ffn;  // FFN hidden channels

  bool operator==(const BlockMasks&) const = default;
};

struct MaskSet {
  std::vector<BlockMasks> blocks;

  static MaskSet ones(const ModelSpec& spec) {
    MaskSet m;
    for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
      m.blocks.push_back({Tensor<float>({spec.qk_dim(b)}, 1.0f),
                          Tensor<float>({spec.v_dim(b)}, 1.0f),
                          Tensor<float>({spec.blocks[b].ffn_hidden}, 1.0f)});
    }
    return m;
  }

  bool operator==(const MaskSet&) const = default;
};

inline void check_masks(const ModelSpec& spec, const MaskSet& masks) {
  if (masks.blocks.size() != spec.blocks.size())
    throw DimensionError("mask set covers " + std::to_string(masks.blocks.size()) +
                         " blocks, model has " + std::to_string(spec.blocks.size()));
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const auto& m = masks.blocks[b];
    if (m.qk.size() != spec.qk_dim(b) || m.v.size() != spec.v_dim(b) ||
        m.ffn.size() != spec.blocks[b].ffn_hidden)
      throw DimensionError("mask lengths do not match block " + std::to_string(b));
  }
}

/// Number of kept channels in each of `heads` equal slices.
template <typename T>
std::vector<std::size_t> kept_per_head(const Tensor<T>& mask, std::size_t heads) {
  const std::size_t width = mask.size() / heads;
  std::vector<std::size_t> out(heads, 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != T(0)) ++out[i / width];
  return out;
}

template <typename T>
std::size_t kept_count(const Tensor<T>& mask) {
  std::size_t n = 0;
  for (T v : mask.values()) n += v != T(0);
  return n;
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
using ParamVars = std::map<std::string, ad::Var<T>>;

template <typename T>
struct BlockMaskVars {
  ad::Var<T> qk, v, ffn;
};

template <typename T>
using MaskVars = std::vector<BlockMaskVars<T>>;

template <typename T>
ParamVars<T> bind_params(ad::Tape<T>& tape, const ModelParams<T>& params,
                         bool requires_grad) {
  ParamVars<T> out;
  for (const auto& [name, t] : params.tensors) out.emplace(name, tape.leaf(t, requires_grad));
  return out;
}

template <typename T>
MaskVars<T> bind_masks(ad::Tape<T>& tape, const MaskSet& masks, bool requires_grad) {
  MaskVars<T> out;
  for (const auto& m : masks.blocks) {
    out.push_back({tape.leaf(m.qk.template cast<T>(), requires_grad),
                   tape.leaf(m.v.template cast<T>(), requires_grad),
                   tape.leaf(m.ffn.template cast<T>(), requires_grad)});
  }
  return out;
}

template <typename T>
const ad::Var<T>& param(const ParamVars<T>& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

/// Handles needed by one attention sub-block.
template <typename T>
struct AttentionVars {
  ad::Var<T> wq, wk, wv, wo, bo;
  std::optional<ad::Var<T>> rw, rb;  // reweight module, when enabled
};

template <typename T>
AttentionVars<T> attention_vars(const ParamVars<T>& p, std::size_t b, bool reweight) {
  const std::string pre = block_prefix(b) + ".attn.";
  AttentionVars<T> a{param(p, pre + "q"), param(p, pre + "k"), param(p, pre + "v"),
                     param(p, pre + "o"), param(p, pre + "o_bias"), std::nullopt,
                     std::nullopt};
  if (reweight) {
    a.rw = param(p, block_prefix(b) + ".reweight.w");
    a.rb = param(p, block_prefix(b) + ".reweight.b");
  }
  return a;
}

namespace detail {

template <typename T>
struct Projected {
  ad::Var<T> q, k, v;
};

// Masked projections, with the reweight scale folded into the query.
template <typename T>
Projected<T> project_qkv(const ad::Var<T>& x, const AttentionVars<T>& a,
                         const ad::Var<T>& mask_qk, const ad::Var<T>& mask_v,
                         std::size_t tokens, const std::string& label) {
  std::optional<mac_counter::Label> lbl;
  lbl.emplace(label + ".q");
  auto q = ad::mul_row(ad::matmul(x, a.wq), mask_qk);
  lbl.emplace(label + ".k");
  auto k = ad::mul_row(ad::matmul(x, a.wk), mask_qk);
  lbl.emplace(label + ".v");
  auto v = ad::mul_row(ad::matmul(x, a.wv), mask_v);
  if (a.rw) {
    lbl.emplace(label + ".reweight");
    q = ad::apply_reweight(q, *a.rw, *a.rb, tokens);
  }
  return {q, k, v};
}

template <typename T>
ad::Var<T> output_projection(const ad::Var<T>& heads_out, const AttentionVars<T>& a,
                             const std::string& label) {
  mac_counter::Label lbl(label + ".o");
  return ad::add_row(ad::matmul(heads_out, a.wo), a.bo);
}

}  // namespace detail

/// Softmax attention over each stacked token set, per head, in the order
/// (Q K^T) V. The logit scale uses each head's kept query/key width.
template <typename T>
ad::Var<T> forward_original_attention(const ad::Var<T>& x, const AttentionVars<T>& a,
                                      const ad::Var<T>& mask_qk, const ad::Var<T>& mask_v,
                                      std::size_t heads, std::size_t tokens,
                                      const std::string& label = "attn") {
  auto [q, k, v] = detail::project_qkv(x, a, mask_qk, mask_v, tokens, label);
  const std::size_t dq = q.value().cols() / heads, dv = v.value().cols() / heads;
  const auto kept = kept_per_head(mask_qk.value(), heads);
  std::vector<ad::Var<T>> outs;
  mac_counter::Label lbl(label + ".attention");
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = ad::slice_cols(q, h * dq, dq);
    auto kh = ad::slice_cols(k, h * dq, dq);
    auto vh = ad::slice_cols(v, h * dv, dv);
    auto logits = ad::block_matmul(qh, kh, tokens, tokens, ad::BlockOp::nt);
    const T s = T(1) / std::sqrt(T(std::max<std::size_t>(kept[h], 1)));
    auto attn = ad::softmax_rows(ad::scale(logits, s));
    outs.push_back(ad::block_matmul(attn, vh, tokens, tokens, ad::BlockOp::nn));
  }
  auto cat = heads == 1 ? outs[0] : ad::concat_cols(outs);
  return detail::output_projection(cat, a, label);
}

/// Block-diagonal head selector tiled over `blocks` stacked token sets:
/// entry (j, c) is 1 when key channel j and value channel c share a head.
template <typename T>
Tensor<T> head_block_mask(std::size_t ck, std::size_t cv, std::size_t heads,
                          std::size_t blocks) {
  Tensor<T> out({blocks * ck, cv});
  const std::size_t dk = ck / heads, dv = cv / heads;
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t j = 0; j < ck; ++j)
      for (std::size_t c = 0; c < cv; ++c)
        out(b * ck + j, c) = (j / dk == c / dv) ? T(1) : T(0);
  return out;
}

/// Kernelized attention in the order phi(Q) (phi(K)^T V), normalized per
/// row by phi(Q) (phi(K)^T 1) + eps. All heads are evaluated as one
/// concatenated product restricted to the head-diagonal blocks.
template <typename T>
ad::Var<T> forward_linear_attention(const ad::Var<T>& x, const AttentionVars<T>& a,
                                    const ad::Var<T>& mask_qk, const ad::Var<T>& mask_v,
                                    std::size_t heads, std::size_t tokens,
                                    const std::string& label = "attn") {
  auto [q, k, v] = detail::project_qkv(x, a, mask_qk, mask_v, tokens, label);
  const std::size_t ck = q.value().cols(), cv = v.value().cols();
  const std::size_t nb = x.value().rows() / tokens;
  mac_counter::Label lbl(label + ".attention");
  auto phi_q = ad::feature_map(q, mask_qk.value());
  auto phi_k = ad::feature_map(k, mask_qk.value());
  auto kv = ad::block_matmul(phi_k, v, tokens, tokens, ad::BlockOp::tn);
  if (heads > 1) {
    kv = ad::mul(kv, x.tape->constant(head_block_mask<T>(ck, cv, heads, nb)));
  }
  auto num = ad::block_matmul(phi_q, kv, tokens, ck, ad::BlockOp::nn);
  auto den = ad::linear_attention_denominator(phi_q, phi_k, tokens, heads, cv);
  return detail::output_projection(ad::div(num, den), a, label);
}

/// Splits images (B x H x W x ch) into flattened patches, (B*N) x (p*p*ch).
template <typename T>
Tensor<T> patchify(const ModelSpec& spec, const Tensor<T>& images) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != spec.image_size || s[2] != spec.image_size ||
      s[3] != spec.channels) {
    throw DimensionError("images " + shape_str(s) + " do not match model input [Bx" +
                         std::to_string(spec.image_size) + "x" +
                         std::to_string(spec.image_size) + "x" +
                         std::to_string(spec.channels) + "]");
  }
  const std::size_t bsz = s[0], g = spec.grid(), p = spec.patch_size, ch = spec.channels;
  const std::size_t img = spec.image_size;
  Tensor<T> out({bsz * g * g, spec.patch_dim()});
  std::size_t r = 0;
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx, ++r) {
        std::size_t c = 0;
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t k = 0; k < ch; ++k)
              out(r, c++) = images[((b * img + gy * p + py) * img + gx * p + px) * ch + k];
      }
  return out;
}

/// Optional observation hooks for one forward pass.
template <typename T>
struct ForwardProbe {
  /// Residual stream after each block.
  std::vector<Tensor<T>> block_outputs;
  /// Called per block with the attention kernel's operands: the reweighted
  /// query, key and value, feature-mapped for linear blocks.
  std::function<void(std::size_t block, const Tensor<T>& q, const Tensor<T>& k,
                     const Tensor<T>& v)>
      on_qkv;
};

/// patch embed -> pre-norm residual blocks -> final norm -> token mean ->
/// classifier. Returns B x num_classes logits.
template <typename T>
ad::Var<T> forward_model(ad::Tape<T>& tape, const ModelSpec& spec, const ParamVars<T>& p,
                         const MaskVars<T>& masks, const Tensor<T>& images,
                         ForwardProbe<T>* probe = nullptr) {
  if (masks.size() != spec.blocks.size()) throw DimensionError("mask/block count mismatch");
  const std::size_t n = spec.tokens();
  auto patches = tape.constant(patchify(spec, images));
  ad::Var<T> x;
  {
    mac_counter::Label lbl("embed");
    x = ad::add_row(ad::matmul(patches, param(p, "embed.w")), param(p, "embed.b"));
  }
  if (spec.positional) x = ad::add_tiled(x, param(p, "pos"));
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const auto& blk = spec.blocks[b];
    const std::string pre = block_prefix(b);
    auto h = ad::layer_norm(x, param(p, pre + ".norm1.gain"), param(p, pre + ".norm1.bias"));
    const auto a = attention_vars(p, b, spec.reweight);
    if (probe && probe->on_qkv) {
      auto qkv = detail::project_qkv(h, a, masks[b].qk, masks[b].v, n, pre + ".probe");
      if (blk.kind == AttentionKind::linear) {
        probe->on_qkv(b, ad::feature_map(qkv.q, masks[b].qk.value()).value(),
                      ad::feature_map(qkv.k, masks[b].qk.value()).value(), qkv.v.value());
      } else {
        probe->on_qkv(b, qkv.q.value(), qkv.k.value(), qkv.v.value());
      }
    }
    auto att = blk.kind == AttentionKind::original
                   ? forward_original_attention(h, a, masks[b].qk, masks[b].v, blk.heads, n, pre)
                   : forward_linear_attention(h, a, masks[b].qk, masks[b].v, blk.heads, n, pre);
    x = ad::add(x, att);
    auto h2 = ad::layer_norm(x, param(p, pre + ".norm2.gain"), param(p, pre + ".norm2.bias"));
    ad::Var<T> f;
    {
      mac_counter::Label lbl(pre + ".ffn1");
      f = ad::add_row(ad::matmul(h2, param(p, pre + ".ffn.w1")), param(p, pre + ".ffn.b1"));
    }
    f = ad::mul_row(ad::relu(f), masks[b].ffn);
    {
      mac_counter::Label lbl(pre + ".ffn2");
      f = ad::add_row(ad::matmul(f, param(p, pre + ".ffn.w2")), param(p, pre + ".ffn.b2"));
    }
    x = ad::add(x, f);
    if (probe) probe->block_outputs.push_back(x.value());
  }
  x = ad::layer_norm(x, param(p, "norm.gain"), param(p, "norm.bias"));
  auto pooled = ad::segment_mean_rows(x, n);
  mac_counter::Label lbl("head");
  return ad::add_row(ad::matmul(pooled, param(p, "head.w")), param(p, "head.b"));
}

/// Gradient-free logits.
template <typename T>
Tensor<T> predict(const ModelSpec& spec, const ModelParams<T>& params, const MaskSet& masks,
                  const Tensor<T>& images) {
  ad::Tape<T> tape(false);
  auto pv = bind_params(tape, params, false);
  auto mv = bind_masks<T>(tape, masks, false);
  return forward_model(tape, spec, pv, mv, images).value();
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace apma

#endif  // APMA_MODEL_HPP
