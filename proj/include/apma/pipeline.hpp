// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_PIPELINE_HPP
#define APMA_PIPELINE_HPP

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "apma/budget.hpp"
#include "apma/config.hpp"
#include "apma/dataset.hpp"
#include "apma/indicator_init.hpp"
#include "apma/io.hpp"
#include "apma/log.hpp"
#include "apma/optim.hpp"
#include "apma/pruning.hpp"
#include "apma/reconfigure.hpp"

namespace apma {

struct Splits {
  Dataset train;
  Dataset eval;
};

inline void check_dataset(const ModelSpec& spec, const Dataset& d, const std::string& what) {
  if (d.height != spec.image_size || d.width != spec.image_size || d.channels != spec.channels)
    throw ConfigError(what + " images are " + std::to_string(d.height) + "x" +
                      std::to_string(d.width) + "x" + std::to_string(d.channels) +
                      ", model expects " + std::to_string(spec.image_size) + "x" +
                      std::to_string(spec.image_size) + "x" + std::to_string(spec.channels));
  if (d.num_classes > spec.num_classes)
    throw ConfigError(what + " has " + std::to_string(d.num_classes) +
                      " classes, model has " + std::to_string(spec.num_classes));
}

inline Splits load_splits(const RunConfig& c) {
  Splits s;
  if (c.data.kind == "synthetic") {
    const auto classes = static_cast<std::uint32_t>(c.model.num_classes);
    s.train = gen_dataset(c.data.seed, c.data.train_count, classes);
    s.eval = gen_dataset(c.data.seed + 1, c.data.eval_count, classes);
  } else {
    s.train = load_dataset(c.data.train_path);
    s.eval = load_dataset(c.data.eval_path);
  }
  check_dataset(c.model, s.train, "training set");
  check_dataset(c.model, s.eval, "evaluation set");
  if (s.train.count() == 0) throw ConfigError("training set is empty");
  return s;
}

/// Images at the given indices, scaled to [0, 1].
inline Tensor<float> gather_images(const Dataset& d, const std::size_t* idx, std::size_t n) {
  Tensor<float> out({n, d.height, d.width, d.channels});
  const std::size_t sz = d.image_bytes();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* src = d.pixels.data() + idx[i] * sz;
    for (std::size_t j = 0; j < sz; ++j) out[i * sz + j] = src[j] / 255.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run state

/// Everything a checkpoint carries: parameters, per-layer indicator state,
/// optimizer moments, the config snapshot and the phase tag.
struct RunState {
  RunConfig config;
  ModelSpec spec;  // differs from config.model once compacted
  ModelParams<float> params;
  std::vector<PrunableLayer> layers;
  std::map<std::string, AdamState> adam;
  Phase phase = Phase::searched;
  std::int64_t full_macs = 0;
  std::int64_t target_macs = 0;

  MaskSet masks() const { return masks_from_layers(spec, layers); }
  bool pruning_active() const { return config.target_fraction < 1.0; }
};

inline RefreshOptions refresh_options(const RunConfig& c) {
  RefreshOptions o;
  o.tau = static_cast<float>(c.tau);
  o.similarity_weight = c.flags.similarity_weight;
  o.multihead_adjust = c.flags.multihead_adjust;
  return o;
}

/// MACs of the smallest model the minimum-one-channel guard allows.
inline std::int64_t guard_floor_macs(const ModelSpec& spec) {
  MaskSet m = MaskSet::ones(spec);
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const std::size_t h = spec.blocks[b].heads;
    auto floor = [&](Tensor<float>& t, std::size_t heads) {
      const std::size_t w = t.size() / heads;
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i % w == 0) ? 1.0f : 0.0f;
    };
    floor(m.blocks[b].qk, h);
    floor(m.blocks[b].v, h);
    floor(m.blocks[b].ffn, 1);
  }
  return compute_macs(spec, m).total;
}

inline RunState initial_state(const RunConfig& c) {
  c.validate();
  RunState st;
  st.config = c;
  st.spec = c.model;
  st.params = init_params(c.model, c.seed);
  st.layers = make_layers(c.model, static_cast<float>(c.indicator_init_value));
  st.full_macs = compute_macs(c.model, MaskSet::ones(c.model)).total;
  st.target_macs = static_cast<std::int64_t>(std::llround(c.target_fraction * double(st.full_macs)));
  const auto floor = guard_floor_macs(c.model);
  if (st.target_macs < floor)
    throw ConfigError("budget infeasible: target " + std::to_string(st.target_macs) +
                      " MACs is below the one-channel-per-head floor of " +
                      std::to_string(floor));
  return st;
}

// ---------------------------------------------------------------------------
// Reports

struct EpochReport {
  std::string phase;
  std::uint32_t epoch = 0;
  double lr = 0.0;
  double ce = 0.0;        // mean over the epoch's batches
  double mac_loss = 0.0;  // mean over the epoch's batches
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  std::size_t rescued = 0;
  BudgetReport budget;
};

using EpochCallback = std::function<void(const EpochReport&)>;

struct InitLayerReport {
  std::string layer;
  Tensor<float> indicator;
  std::size_t kept = 0;
  std::vector<std::size_t> kept_per_head;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Top-1 accuracy of the masked model; chunks are spread over `threads`
/// workers, each reading the same immutable parameters.
template <typename T = float>
double accuracy(const ModelSpec& spec, const ModelParams<float>& params, const MaskSet& masks,
                const Dataset& data, std::size_t threads = 1, std::size_t chunk = 256) {
  if (data.count() == 0) return 0.0;
  const std::size_t n = data.count();
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<std::size_t> correct(chunks, 0);
  const ModelParams<T> typed = params.template cast<T>();
  auto work = [&](std::size_t first_chunk, std::size_t stride) {
    for (std::size_t c = first_chunk; c < chunks; c += stride) {
      const std::size_t lo = c * chunk, cnt = std::min(chunk, n - lo);
      const auto images = data.images(lo, cnt).template cast<T>();
      const auto pred = argmax_rows(predict(spec, typed, masks, images));
      for (std::size_t i = 0; i < cnt; ++i) correct[c] += pred[i] == int(data.labels[lo + i]);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& t : pool) t.join();
  }
  return double(std::accumulate(correct.begin(), correct.end(), std::size_t(0))) / double(n);
}

// ---------------------------------------------------------------------------
// Training

enum class TrainMode { dense, search, refine };

namespace detail {

struct StepStats {
  double ce = 0.0;
  double mac_loss = 0.0;
  std::size_t correct = 0;
  std::size_t rescued = 0;
};

inline StepStats train_step(RunState& st, const Dataset& data, const std::size_t* idx,
                            std::size_t count, TrainMode mode, double lr, double lr_factor,
                            double weight_decay) {
  const auto& cfg = st.config;
  StepStats stats;
  if (mode == TrainMode::search) stats.rescued = refresh_all(st.layers, st.params, refresh_options(cfg));
  const MaskSet masks = mode == TrainMode::dense ? MaskSet::ones(st.spec) : st.masks();

  std::map<std::string, Tensor<float>> grads;
  for (const auto& [name, t] : st.params.tensors) grads.emplace(name, Tensor<float>(t.shape()));
  std::vector<Tensor<float>> ind_grads;
  for (const auto& l : st.layers) ind_grads.emplace_back(l.indicator.shape());

  const float tau = static_cast<float>(cfg.tau);
  for (std::size_t lo = 0; lo < count; lo += cfg.shard_size) {
    const std::size_t ns = std::min<std::size_t>(cfg.shard_size, count - lo);
    const auto images = gather_images(data, idx + lo, ns);
    std::vector<int> labels(ns);
    for (std::size_t i = 0; i < ns; ++i) labels[i] = data.labels[idx[lo + i]];

    ad::Tape<float> tape;
    const auto pv = bind_params(tape, st.params, true);
    MaskVars<float> mv;
    std::vector<ad::Var<float>> ind;
    if (mode == TrainMode::search) {
      mv.resize(st.spec.blocks.size());
      for (const auto& l : st.layers) {
        auto iv = tape.leaf(l.indicator, true);
        ind.push_back(iv);
        auto m = ad::indicator_mask(iv, l.weights, l.mask, tau);
        auto& bm = mv[l.block];
        switch (l.role) {
          case LayerRole::query_key: bm.qk = m; break;
          case LayerRole::value: bm.v = m; break;
          case LayerRole::ffn_hidden: bm.ffn = m; break;
        }
      }
    } else {
      mv = bind_masks<float>(tape, masks, false);
    }
    const auto logits = forward_model(tape, st.spec, pv, mv, images);
    const auto pred = argmax_rows(logits.value());
    for (std::size_t i = 0; i < ns; ++i) stats.correct += pred[i] == labels[i];
    const auto ce = ad::cross_entropy(logits, labels);
    stats.ce += double(ce.value()[0]) * double(ns) / double(count);
    auto loss = ad::scale(ce, float(double(ns) / double(count)));
    if (mode == TrainMode::search && lo == 0) {
      const auto lm = ad::mac_loss(ad::relaxed_macs(tape, st.spec, mv),
                                   double(st.target_macs), cfg.lambda);
      stats.mac_loss = lm.value()[0];
      loss = ad::add(loss, lm);
    }
    tape.backward(loss);
    for (auto& [name, g] : grads) {
      const auto part = tape.grad(pv.at(name));
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += part[i];
    }
    for (std::size_t k = 0; k < ind.size(); ++k) {
      const auto part = tape.grad(ind[k]);
      for (std::size_t i = 0; i < part.size(); ++i) ind_grads[k][i] += part[i];
    }
  }

  for (auto& [name, p] : st.params.tensors) {
    adamw_step(p, grads.at(name), st.adam["param." + name], lr, weight_decay);
  }
  if (mode == TrainMode::search) {
    const double wd = cfg.decay_indicators ? weight_decay : 0.0;
    for (std::size_t k = 0; k < st.layers.size(); ++k) {
      adamw_step(st.layers[k].indicator, ind_grads[k], st.adam["indicator." + st.layers[k].id],
                 cfg.indicator_lr * lr_factor, wd);
    }
  }
  return stats;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ull;
  for (std::uint64_t v : {a, b}) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h *= 0xbf58476d1ce4e5b9ull;
  }
  return h;
}

}  // namespace detail

/// Runs `epochs` epochs of one phase with a cosine schedule spanning the phase.
inline void train_phase(RunState& st, const Splits& data, TrainMode mode, std::uint32_t epochs,
                        double weight_decay, const std::string& name,
                        const EpochCallback& on_epoch, std::size_t threads = 1) {
  const auto& cfg = st.config;
  const std::size_t n = data.train.count();
  const std::size_t bs = std::min<std::size_t>(cfg.batch_size, n);
  const std::size_t batches = n / bs;
  const std::int64_t total = std::int64_t(epochs) * std::int64_t(batches);
  std::int64_t step = 0;
  std::vector<std::size_t> order(n);
  // Guard rescues are tallied in the epoch report instead of logged per step.
  log::ScopedSink quiet(nullptr);
  for (std::uint32_t e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::mt19937_64 rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(mode), e));
    std::shuffle(order.begin(), order.end(), rng);
    EpochReport rep;
    rep.phase = name;
    rep.epoch = e + 1;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      const double lr = cosine_lr(cfg.lr_start, cfg.lr_end, step, total);
      rep.lr = lr;
      const auto s = detail::train_step(st, data.train, order.data() + b * bs, bs, mode, lr,
                                        lr / cfg.lr_start, weight_decay);
      rep.ce += s.ce / double(batches);
      rep.mac_loss += s.mac_loss / double(batches);
      rep.rescued += s.rescued;
      correct += s.correct;
    }
    if (mode == TrainMode::search) rep.rescued += refresh_all(st.layers, st.params, refresh_options(cfg));
    rep.train_accuracy = double(correct) / double(batches * bs);
    const MaskSet masks = mode == TrainMode::dense ? MaskSet::ones(st.spec) : st.masks();
    rep.eval_accuracy = accuracy(st.spec, st.params, masks, data.eval, threads);
    rep.budget = compute_macs(st.spec, masks);
    rep.budget.target = st.target_macs;
    rep.budget.loss = mac_loss(double(rep.budget.total), double(st.target_macs), cfg.lambda);
    if (on_epoch) on_epoch(rep);
  }
}

/// Installs data-driven indicators on every linear-attention query/key layer.
inline std::vector<InitLayerReport> initialize_indicators(RunState& st, const Dataset& train) {
  std::vector<std::size_t> blocks;
  for (std::size_t b = 0; b < st.spec.blocks.size(); ++b)
    if (st.spec.blocks[b].kind == AttentionKind::linear) blocks.push_back(b);
  std::vector<InitLayerReport> out;
  if (blocks.empty()) return out;
  const std::size_t n = std::min<std::size_t>(st.config.init_images, train.count());
  std::vector<Tensor<float>> batches;
  for (std::size_t lo = 0; lo < n; lo += 64) batches.push_back(train.images(lo, std::min<std::size_t>(64, n - lo)));
  const auto sal = saliency_pass(st.spec, st.params, batches, blocks);
  const auto opt = refresh_options(st.config);
  for (auto& l : st.layers) {
    if (l.role != LayerRole::query_key) continue;
    auto it = sal.find(l.block);
    if (it == sal.end()) continue;
    l.indicator = normalize_to_indicator(it->second.total);
    refresh(l, st.params.at(l.projections.front()), opt);
    out.push_back({l.id, l.indicator, kept_count(l.mask), kept_per_head(l.mask, l.heads)});
  }
  return out;
}

/// Dense pretraining (optional), indicator initialization, then the budgeted
/// search. A target fraction of 1 leaves every mask at one.
inline RunState search(const RunConfig& cfg, const Splits& data, const EpochCallback& on_epoch = {},
                       std::vector<InitLayerReport>* init_report = nullptr,
                       std::size_t threads = 1) {
  RunState st = initial_state(cfg);
  check_dataset(cfg.model, data.train, "training set");
  train_phase(st, data, TrainMode::dense, cfg.epochs_pretrain, cfg.weight_decay_search,
              "pretrain", on_epoch, threads);
  if (st.pruning_active()) {
    if (cfg.flags.indicator_init) {
      auto rep = initialize_indicators(st, data.train);
      if (init_report) *init_report = std::move(rep);
    }
    refresh_all(st.layers, st.params, refresh_options(cfg));
    train_phase(st, data, TrainMode::search, cfg.epochs_search, cfg.weight_decay_search,
                "search", on_epoch, threads);
  } else {
    train_phase(st, data, TrainMode::dense, cfg.epochs_search, cfg.weight_decay_search,
                "search", on_epoch, threads);
  }
  st.phase = Phase::searched;
  return st;
}

/// Weight recovery with frozen masks.
inline void refine(RunState& st, const Splits& data, const EpochCallback& on_epoch = {},
                   std::size_t threads = 1) {
  if (st.phase != Phase::searched)
    throw ContractError("refine expects a searched checkpoint, got " + to_string(st.phase));
  train_phase(st, data, TrainMode::refine, st.config.epochs_refine,
              st.config.weight_decay_refine, "refine", on_epoch, threads);
  st.phase = Phase::refined;
}

/// Physically removes pruned channels and checks equivalence against the
/// masked model.
inline RunState reconfigure(const RunState& st, EquivalenceReport* report = nullptr,
                            std::size_t trials = 64) {
  if (st.phase != Phase::refined)
    throw ContractError("reconfigure expects a refined checkpoint, got " + to_string(st.phase));
  const MaskSet masks = st.masks();
  const auto cm = compact(st.params, st.spec, plan(masks, st.spec));
  auto rep = verify_equivalence(st.spec, st.params, masks, cm.spec, cm.params, trials);
  if (report) *report = rep;
  RunState out;
  out.config = st.config;
  out.spec = cm.spec;
  out.params = cm.params;
  out.layers = make_layers(cm.spec, 0.0f);
  out.phase = Phase::compacted;
  out.full_macs = st.full_macs;
  out.target_macs = st.target_macs;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint conversion

inline Checkpoint to_checkpoint(const RunState& st) {
  Checkpoint ck;
  ck.phase = st.phase;
  ck.put_text("meta.config", to_json(st.config).dump());
  ck.put_text("meta.spec", to_json(st.spec).dump());
  nlohmann::json state = {{"full_macs", st.full_macs}, {"target_macs", st.target_macs}};
  nlohmann::json steps = nlohmann::json::object();
  for (const auto& [name, a] : st.adam) steps[name] = a.step;
  state["adam_steps"] = steps;
  ck.put_text("meta.state", state.dump());
  for (const auto& [name, t] : st.params.tensors) ck.tensors["param." + name] = t;
  for (const auto& l : st.layers) {
    ck.tensors["indicator." + l.id] = l.indicator;
    ck.tensors["weight." + l.id] = l.weights;
    ck.tensors["adjusted." + l.id] = l.adjusted;
    Tensor<std::uint8_t> m(l.mask.shape());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = l.mask[i] != 0.0f;
    ck.tensors["mask." + l.id] = std::move(m);
  }
  for (const auto& [name, a] : st.adam) {
    if (a.first.empty()) continue;
    ck.tensors["adam." + name + ".m"] = a.first;
    ck.tensors["adam." + name + ".v"] = a.second;
  }
  return ck;
}

inline RunState from_checkpoint(const Checkpoint& ck) {
  RunState st;
  st.phase = ck.phase;
  try {
    st.config = config_from_json(nlohmann::json::parse(ck.text("meta.config")));
    st.spec = model_from_json(nlohmann::json::parse(ck.text("meta.spec")));
    const auto state = nlohmann::json::parse(ck.text("meta.state"));
    st.full_macs = state.at("full_macs").get<std::int64_t>();
    st.target_macs = state.at("target_macs").get<std::int64_t>();
    for (const auto& [name, step] : state.at("adam_steps").items()) {
      AdamState a;
      a.step = step.get<std::int64_t>();
      a.first = ck.f32("adam." + name + ".m");
      a.second = ck.f32("adam." + name + ".v");
      st.adam.emplace(name, std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  st.spec.validate();
  for (const auto& [name, shape] : param_layout(st.spec)) st.params.tensors[name] = ck.f32("param." + name);
  check_layout(st.spec, st.params);
  st.layers = make_layers(st.spec, 0.0f);
  for (auto& l : st.layers) {
    l.indicator = ck.f32("indicator." + l.id);
    l.weights = ck.f32("weight." + l.id);
    l.adjusted = ck.f32("adjusted." + l.id);
    const auto& m = ck.u8("mask." + l.id);
    if (m.size() != l.width() || l.indicator.size() != l.width())
      throw FormatError("checkpoint state for " + l.id + " has the wrong width");
    l.mask = Tensor<float>(m.shape());
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i] > 1) throw FormatError("mask." + l.id + " is not binary");
      l.mask[i] = m[i];
    }
  }
  return st;
}

inline void save_state(const std::string& path, const RunState& st) {
  save_checkpoint(path, to_checkpoint(st));
}

inline RunState load_state(const std::string& path) { return from_checkpoint(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Inspection

struct HeadSpectrum {
  std::string projection;  // e.g. blocks.0.attn.q
  std::size_t head = 0;
  double top3_norm = 0.0;
};

struct LayerStructure {
  std::string layer;
  std::size_t width = 0;
  std::size_t kept = 0;
  std::vector<std::size_t> kept_per_head;
};

struct WeightHistogram {
  std::string layer;
  std::vector<std::size_t> bins;  // ten equal bins over [1, 2]
};

struct InspectReport {
  Phase phase = Phase::searched;
  std::vector<HeadSpectrum> spectra;
  std::vector<LayerStructure> structure;
  std::vector<WeightHistogram> histograms;
};

/// Euclidean norm of the leading three singular values (fewer if the matrix
/// has fewer).
template <typename T>
double top3_singular_norm(const Tensor<T>& m) {
  const auto s = singular_values(m.template cast<double>());
  double acc = 0.0;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, s.size()); ++i) acc += s[i] * s[i];
  return std::sqrt(acc);
}

inline InspectReport inspect(const RunState& st) {
  InspectReport rep;
  rep.phase = st.phase;
  const MaskSet masks = st.masks();
  for (std::size_t b = 0; b < st.spec.blocks.size(); ++b) {
    const std::size_t h = st.spec.blocks[b].heads;
    const std::string pre = block_prefix(b);
    for (const char* which : {"q", "k", "v"}) {
      const std::string name = pre + ".attn." + which;
      const auto& w = st.params.at(name);
      const auto& mask = which[0] == 'v' ? masks.blocks[b].v : masks.blocks[b].qk;
      const std::size_t hw = w.cols() / h;
      for (std::size_t head = 0; head < h; ++head) {
        Tensor<double> slice({w.rows(), hw});
        for (std::size_t r = 0; r < w.rows(); ++r)
          for (std::size_t c = 0; c < hw; ++c)
            slice(r, c) = double(w(r, head * hw + c)) * double(mask[head * hw + c]);
        rep.spectra.push_back({name, head, top3_singular_norm(slice)});
      }
    }
  }
  for (const auto& l : st.layers) {
    rep.structure.push_back({l.id, l.width(), kept_count(l.mask), kept_per_head(l.mask, l.heads)});
    WeightHistogram hist{l.id, std::vector<std::size_t>(10, 0)};
    for (float w : l.weights.values()) {
      const auto bin = static_cast<std::size_t>(std::clamp((double(w) - 1.0) * 10.0, 0.0, 9.0));
      ++hist.bins[bin];
    }
    rep.histograms.push_back(std::move(hist));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Text and JSON rendering

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

inline std::string budget_text(const BudgetReport& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-22s %-18s %6s %6s %6s %14s\n", "layer", "kind", "N",
                "in/q", "out/v", "MACs");
  os << line;
  for (const auto& e : r.entries) {
    const bool proj = e.kind == MacKind::projection || e.kind == MacKind::reweight;
    std::snprintf(line, sizeof line, "%-22s %-18s %6lld %6lld %6lld %14lld%s\n", e.layer.c_str(),
                  to_string(e.kind).c_str(), (long long)e.tokens,
                  (long long)(proj ? e.c_in : e.c_q), (long long)(proj ? e.c_out : e.c_v),
                  (long long)e.macs, e.counted ? "" : "  (not in total)");
    os << line;
  }
  os << "total " << r.total << " MACs/image";
  if (r.target > 0)
    os << ", target " << r.target << " (" << detail::fmt("%+.2f", 100.0 * (double(r.total) / double(r.target) - 1.0))
       << "%), loss " << detail::fmt("%.5f", r.loss);
  os << "\n";
  return os.str();
}

inline nlohmann::json to_json(const BudgetReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"layer", e.layer},   {"kind", to_string(e.kind)}, {"tokens", e.tokens},
                       {"c_in", e.c_in},     {"c_out", e.c_out},          {"c_q", e.c_q},
                       {"c_k", e.c_k},       {"c_v", e.c_v},              {"macs", e.macs},
                       {"counted", e.counted}});
  return {{"entries", entries}, {"total", r.total}, {"target", r.target}, {"loss", r.loss},
          {"informational", r.informational}};
}

inline std::string epoch_text(const EpochReport& r) {
  std::ostringstream os;
  os << r.phase << " epoch " << r.epoch << ": ce " << detail::fmt("%.4f", r.ce);
  if (r.phase == "search") os << " mac-loss " << detail::fmt("%.4f", r.mac_loss);
  os << " train-acc " << detail::fmt("%.4f", r.train_accuracy) << " eval-acc "
     << detail::fmt("%.4f", r.eval_accuracy) << " MACs " << r.budget.total;
  if (r.budget.target > 0)
    os << " (" << detail::fmt("%.4f", double(r.budget.total) / double(r.budget.target)) << " of target)";
  if (r.rescued) os << " guard-rescues " << r.rescued;
  return os.str();
}

inline nlohmann::json to_json(const EpochReport& r) {
  return {{"phase", r.phase},   {"epoch", r.epoch},
          {"lr", r.lr},         {"ce", r.ce},
          {"mac_loss", r.mac_loss}, {"train_accuracy", r.train_accuracy},
          {"eval_accuracy", r.eval_accuracy}, {"rescued", r.rescued},
          {"budget", to_json(r.budget)}};
}

inline std::string init_report_text(const std::vector<InitLayerReport>& rep, double tau) {
  std::ostringstream os;
  for (const auto& l : rep) {
    os << l.layer << ": kept " << l.kept << "/" << l.indicator.size() << " at tau "
       << detail::fmt("%.2f", tau) << " (per head " << detail::join(l.kept_per_head) << ")\n  m =";
    for (float v : l.indicator.values()) os << " " << detail::fmt("%.3f", v);
    os << "\n";
  }
  return os.str();
}

inline nlohmann::json to_json(const std::vector<InitLayerReport>& rep) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& l : rep)
    out.push_back({{"layer", l.layer},
                   {"indicator", std::vector<float>(l.indicator.values().begin(), l.indicator.values().end())},
                   {"kept", l.kept},
                   {"kept_per_head", l.kept_per_head}});
  return out;
}

inline std::string inspect_text(const InspectReport& r) {
  std::ostringstream os;
  os << "phase: " << to_string(r.phase) << "\n\ntop-3 singular value norm per head\n";
  for (const auto& s : r.spectra)
    os << "  " << s.projection << " head " << s.head << ": " << detail::fmt("%.6f", s.top3_norm)
       << "\n";
  os << "\nkept channels\n";
  for (const auto& l : r.structure)
    os << "  " << l.layer << ": " << l.kept << "/" << l.width << " (per head "
       << detail::join(l.kept_per_head) << ")\n";
  os << "\nsimilarity weight histogram, 10 bins over [1, 2]\n";
  for (const auto& h : r.histograms) os << "  " << h.layer << ": " << detail::join(h.bins) << "\n";
  return os.str();
}

inline nlohmann::json to_json(const InspectReport& r) {
  nlohmann::json spectra = nlohmann::json::array(), structure = nlohmann::json::array(),
                 hist = nlohmann::json::array();
  for (const auto& s : r.spectra)
    spectra.push_back({{"projection", s.projection}, {"head", s.head}, {"top3_norm", s.top3_norm}});
  for (const auto& l : r.structure)
    structure.push_back({{"layer", l.layer}, {"width", l.width}, {"kept", l.kept},
                         {"kept_per_head", l.kept_per_head}});
  for (const auto& h : r.histograms) hist.push_back({{"layer", h.layer}, {"bins", h.bins}});
  return {{"phase", to_string(r.phase)}, {"spectra", spectra}, {"structure", structure},
          {"similarity_histograms", hist}};
}

inline nlohmann::json to_json(const EquivalenceReport& r) {
  return {{"trials", r.trials},
          {"max_abs_deviation", r.max_abs_deviation},
          {"argmax_agreement", r.argmax_agreement},
          {"macs_masked", r.macs_masked},
          {"macs_compact", r.macs_compact},
          {"block_deviation", r.block_deviation}};
}

inline std::string equivalence_text(const EquivalenceReport& r) {
  std::ostringstream os;
  os << "trials " << r.trials << ", max |logit diff| " << detail::fmt("%.3e", r.max_abs_deviation)
     << ", argmax agreement " << detail::fmt("%.4f", r.argmax_agreement) << ", MACs masked "
     << r.macs_masked << " / compact " << r.macs_compact << "\n";
  return os.str();
}

}  // namespace apma

#endif  // APMA_PIPELINE_HPP
