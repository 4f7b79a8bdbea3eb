// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_CONFIG_HPP
#define APMA_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "apma/model.hpp"

namespace apma {

struct AblationFlags {
  bool reweight = true;
  bool similarity_weight = true;
  bool multihead_adjust = true;
  bool indicator_init = true;
  bool operator==(const AblationFlags&) const = default;
};

/// Either a synthetic split pair (train from `seed`, eval from `seed + 1`)
/// or a pair of dataset files.
struct DataSource {
  std::string kind = "synthetic";  // "synthetic" | "file"
  std::uint64_t seed = 1;
  std::uint32_t train_count = 4000;
  std::uint32_t eval_count = 1000;
  std::string train_path;
  std::string eval_path;
  bool operator==(const DataSource&) const = default;
};

struct RunConfig {
  ModelSpec model;
  DataSource data;
  double target_fraction = 0.5;
  double tau = 0.5;
  double lambda = 1.0;
  std::uint32_t epochs_pretrain = 0;  // dense training before search
  std::uint32_t epochs_search = 30;
  std::uint32_t epochs_refine = 30;
  double lr_start = 5e-4;
  double lr_end = 5e-6;
  double indicator_lr = 1e-2;
  double weight_decay_search = 1e-6;
  double weight_decay_refine = 0.05;
  bool decay_indicators = false;
  double indicator_init_value = 0.24;  // constant start for layers without data-driven init
  std::uint32_t init_images = 512;      // images for the saliency pass
  std::uint32_t batch_size = 128;
  std::uint32_t shard_size = 32;  // gradient accumulation granularity
  std::uint64_t seed = 0;
  AblationFlags flags;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Desk-scale hybrid preset: two linear then two original blocks.
inline ModelSpec hybrid_model() {
  ModelSpec m;
  m.blocks = {{AttentionKind::linear}, {AttentionKind::linear},
              {AttentionKind::original}, {AttentionKind::original}};
  return m;
}

/// Desk-scale preset built solely from linear-attention blocks.
inline ModelSpec all_linear_model() {
  ModelSpec m;
  m.blocks.assign(4, BlockSpec{AttentionKind::linear});
  return m;
}

inline RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "hybrid") c.model = hybrid_model();
  else if (name == "all-linear") c.model = all_linear_model();
  else throw ConfigError("unknown preset '" + name + "' (expected hybrid or all-linear)");
  return c;
}

inline void RunConfig::validate() const {
  model.validate();
  if (model.blocks.empty()) throw ConfigError("model has no blocks");
  for (const auto& b : model.blocks)
    if (b.qk_dim || b.v_dim) throw ConfigError("run configs describe unpruned models only");
  if (!(target_fraction > 0.0 && target_fraction <= 1.0))
    throw ConfigError("target_fraction must lie in (0, 1]");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
  if (!(lr_start > 0.0 && lr_end > 0.0 && indicator_lr > 0.0))
    throw ConfigError("learning rates must be positive");
  if (!(weight_decay_search >= 0.0 && weight_decay_refine >= 0.0))
    throw ConfigError("weight decay must be nonnegative");
  if (!(indicator_init_value >= 0.0)) throw ConfigError("indicator_init_value must be nonnegative");
  if (batch_size == 0 || shard_size == 0) throw ConfigError("batch and shard sizes must be positive");
  if (data.kind == "synthetic") {
    if (data.train_count == 0) throw ConfigError("synthetic train_count must be positive");
    if (model.image_size != 32 || model.channels != 1)
      throw ConfigError("synthetic data is 32x32 grayscale");
  } else if (data.kind == "file") {
    if (data.train_path.empty() || data.eval_path.empty())
      throw ConfigError("file data source needs train_path and eval_path");
  } else {
    throw ConfigError("data.kind must be 'synthetic' or 'file'");
  }
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

using nlohmann::json;

// Rejects keys outside `allowed`.
inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelSpec& m) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : m.blocks) {
    nlohmann::json jb = {{"kind", to_string(b.kind)}, {"heads", b.heads},
                         {"ffn_hidden", b.ffn_hidden}};
    if (b.qk_dim) jb["qk_dim"] = b.qk_dim;
    if (b.v_dim) jb["v_dim"] = b.v_dim;
    blocks.push_back(jb);
  }
  return {{"image_size", m.image_size}, {"patch_size", m.patch_size},
          {"channels", m.channels},     {"embed_dim", m.embed_dim},
          {"num_classes", m.num_classes}, {"positional", m.positional},
          {"reweight", m.reweight},     {"blocks", blocks}};
}

inline ModelSpec model_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"image_size", "patch_size", "channels", "embed_dim", "num_classes",
                      "positional", "reweight", "blocks"},
                     "model");
  ModelSpec m;
  detail::read(j, "image_size", m.image_size, "model");
  detail::read(j, "patch_size", m.patch_size, "model");
  detail::read(j, "channels", m.channels, "model");
  detail::read(j, "embed_dim", m.embed_dim, "model");
  detail::read(j, "num_classes", m.num_classes, "model");
  detail::read(j, "positional", m.positional, "model");
  detail::read(j, "reweight", m.reweight, "model");
  if (j.contains("blocks")) {
    if (!j["blocks"].is_array()) throw ConfigError("model.blocks must be an array");
    for (const auto& jb : j["blocks"]) {
      detail::check_keys(jb, {"kind", "heads", "ffn_hidden", "qk_dim", "v_dim"}, "model.blocks[]");
      BlockSpec b;
      std::string kind = to_string(b.kind);
      detail::read(jb, "kind", kind, "model.blocks[]");
      b.kind = attention_kind_from(kind);
      detail::read(jb, "heads", b.heads, "model.blocks[]");
      detail::read(jb, "ffn_hidden", b.ffn_hidden, "model.blocks[]");
      detail::read(jb, "qk_dim", b.qk_dim, "model.blocks[]");
      detail::read(jb, "v_dim", b.v_dim, "model.blocks[]");
      m.blocks.push_back(b);
    }
  }
  return m;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {
      {"model", to_json(c.model)},
      {"data",
       {{"kind", c.data.kind},
        {"seed", c.data.seed},
        {"train_count", c.data.train_count},
        {"eval_count", c.data.eval_count},
        {"train_path", c.data.train_path},
        {"eval_path", c.data.eval_path}}},
      {"target_fraction", c.target_fraction},
      {"tau", c.tau},
      {"lambda", c.lambda},
      {"epochs_pretrain", c.epochs_pretrain},
      {"epochs_search", c.epochs_search},
      {"epochs_refine", c.epochs_refine},
      {"lr_start", c.lr_start},
      {"lr_end", c.lr_end},
      {"indicator_lr", c.indicator_lr},
      {"weight_decay_search", c.weight_decay_search},
      {"weight_decay_refine", c.weight_decay_refine},
      {"decay_indicators", c.decay_indicators},
      {"indicator_init_value", c.indicator_init_value},
      {"init_images", c.init_images},
      {"batch_size", c.batch_size},
      {"shard_size", c.shard_size},
      {"seed", c.seed},
      {"flags",
       {{"reweight", c.flags.reweight},
        {"similarity_weight", c.flags.similarity_weight},
        {"multihead_adjust", c.flags.multihead_adjust},
        {"indicator_init", c.flags.indicator_init}}},
  };
}

/// Parses a config; absent fields keep their defaults, unknown keys are
/// rejected. Reweight is on only when both the model and the flag allow it.
inline RunConfig config_from_json(const nlohmann::json& j) {
  const std::string top = "config";
  detail::check_keys(j,
                     {"model", "data", "target_fraction", "tau", "lambda", "epochs_pretrain",
                      "epochs_search", "epochs_refine", "lr_start", "lr_end", "indicator_lr",
                      "weight_decay_search", "weight_decay_refine", "decay_indicators",
                      "indicator_init_value", "init_images", "batch_size", "shard_size", "seed",
                      "flags", "preset"},
                     top);
  RunConfig c;
  if (j.contains("preset")) c = preset(j["preset"].get<std::string>());
  if (j.contains("model")) c.model = model_from_json(j["model"]);
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::check_keys(d, {"kind", "seed", "train_count", "eval_count", "train_path", "eval_path"},
                       "data");
    detail::read(d, "kind", c.data.kind, "data");
    detail::read(d, "seed", c.data.seed, "data");
    detail::read(d, "train_count", c.data.train_count, "data");
    detail::read(d, "eval_count", c.data.eval_count, "data");
    detail::read(d, "train_path", c.data.train_path, "data");
    detail::read(d, "eval_path", c.data.eval_path, "data");
  }
  detail::read(j, "target_fraction", c.target_fraction, top);
  detail::read(j, "tau", c.tau, top);
  detail::read(j, "lambda", c.lambda, top);
  detail::read(j, "epochs_pretrain", c.epochs_pretrain, top);
  detail::read(j, "epochs_search", c.epochs_search, top);
  detail::read(j, "epochs_refine", c.epochs_refine, top);
  detail::read(j, "lr_start", c.lr_start, top);
  detail::read(j, "lr_end", c.lr_end, top);
  detail::read(j, "indicator_lr", c.indicator_lr, top);
  detail::read(j, "weight_decay_search", c.weight_decay_search, top);
  detail::read(j, "weight_decay_refine", c.weight_decay_refine, top);
  detail::read(j, "decay_indicators", c.decay_indicators, top);
  detail::read(j, "indicator_init_value", c.indicator_init_value, top);
  detail::read(j, "init_images", c.init_images, top);
  detail::read(j, "batch_size", c.batch_size, top);
  detail::read(j, "shard_size", c.shard_size, top);
  detail::read(j, "seed", c.seed, top);
  if (j.contains("flags")) {
    const auto& f = j["flags"];
    detail::check_keys(f, {"reweight", "similarity_weight", "multihead_adjust", "indicator_init"},
                       "flags");
    detail::read(f, "reweight", c.flags.reweight, "flags");
    detail::read(f, "similarity_weight", c.flags.similarity_weight, "flags");
    detail::read(f, "multihead_adjust", c.flags.multihead_adjust, "flags");
    detail::read(f, "indicator_init", c.flags.indicator_init, "flags");
  }
  c.flags.reweight = c.flags.reweight && c.model.reweight;
  c.model.reweight = c.flags.reweight;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace apma

#endif  // APMA_CONFIG_HPP
