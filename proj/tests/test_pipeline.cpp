// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "apma/pipeline.hpp"

namespace apma {
namespace {

RunConfig tiny(double target = 0.6) {
  RunConfig c;
  c.model.embed_dim = 16;
  c.model.patch_size = 8;  // 16 tokens
  c.model.num_classes = 4;
  c.model.blocks = {{AttentionKind::linear, 2, 16}, {AttentionKind::original, 2, 16}};
  c.data.train_count = 192;
  c.data.eval_count = 64;
  c.target_fraction = target;
  c.epochs_pretrain = 1;
  c.epochs_search = 2;
  c.epochs_refine = 1;
  c.lr_start = 2e-3;
  c.lr_end = 1e-4;
  c.batch_size = 64;
  c.shard_size = 32;
  c.init_images = 64;
  c.seed = 3;
  return c;
}

const Splits& tiny_data() {
  static const Splits s = load_splits(tiny());
  return s;
}

TEST(Config, DefaultsAreValidAndRoundTrip) {
  for (const char* name : {"hybrid", "all-linear"}) {
    const auto c = preset(name);
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(config_from_json(to_json(c)), c);
  }
  const auto c = preset("hybrid");
  EXPECT_EQ(c.model.embed_dim, 64u);
  EXPECT_EQ(c.model.tokens(), 64u);
  EXPECT_EQ(c.tau, 0.5);
  EXPECT_EQ(c.lr_start, 5e-4);
  EXPECT_EQ(c.lr_end, 5e-6);
  EXPECT_EQ(c.epochs_search, 30u);
  EXPECT_EQ(c.weight_decay_refine, 0.05);
  EXPECT_TRUE(c.flags.reweight && c.flags.similarity_weight && c.flags.multihead_adjust &&
              c.flags.indicator_init);
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  auto j = to_json(tiny());
  j["learning_rate"] = 1.0;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(tiny());
  j["flags"]["prune_heads"] = true;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(tiny());
  j["model"]["blocks"][0]["window"] = 7;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(tiny());
  j["data"]["shuffle"] = false;
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, InvalidValuesRejected) {
  auto bad = [](auto edit) {
    auto j = to_json(tiny());
    edit(j);
    EXPECT_THROW(config_from_json(j), ConfigError) << j.dump();
  };
  bad([](auto& j) { j["target_fraction"] = 0.0; });
  bad([](auto& j) { j["target_fraction"] = 1.5; });
  bad([](auto& j) { j["tau"] = 1.0; });
  bad([](auto& j) { j["lr_start"] = -1.0; });
  bad([](auto& j) { j["batch_size"] = 0; });
  bad([](auto& j) { j["model"]["blocks"][0]["heads"] = 3; });
  bad([](auto& j) { j["model"]["blocks"][0]["kind"] = "sparse"; });
  bad([](auto& j) { j["tau"] = "half"; });
}

TEST(Config, PresetKeyAndReweightFlag) {
  auto c = config_from_json({{"preset", "all-linear"}, {"epochs_search", 3}});
  EXPECT_EQ(c.model, all_linear_model());
  EXPECT_EQ(c.epochs_search, 3u);
  auto off = config_from_json({{"preset", "hybrid"}, {"flags", {{"reweight", false}}}});
  EXPECT_FALSE(off.model.reweight);
  for (const auto& [name, shape] : param_layout(off.model))
    EXPECT_EQ(name.find("reweight"), std::string::npos);
}

TEST(Search, InfeasibleBudgetIsPreflightError) {
  EXPECT_THROW(initial_state(tiny(0.02)), ConfigError);
}

TEST(Search, UnitTargetKeepsEverything) {
  auto c = tiny(1.0);
  const auto st = search(c, tiny_data());
  EXPECT_EQ(st.masks(), MaskSet::ones(st.spec));
  EXPECT_EQ(st.phase, Phase::searched);
}

TEST(Search, DeterministicCheckpointBytes) {
  const auto a = search(tiny(), tiny_data());
  const auto b = search(tiny(), tiny_data());
  EXPECT_EQ(encode_checkpoint(to_checkpoint(a)), encode_checkpoint(to_checkpoint(b)));
}

TEST(Search, ReportsEveryEpochAndAlignedMasks) {
  std::vector<EpochReport> reps;
  std::vector<InitLayerReport> init;
  const auto st = search(tiny(), tiny_data(), [&](const EpochReport& r) { reps.push_back(r); }, &init);
  ASSERT_EQ(reps.size(), 3u);
  EXPECT_EQ(reps[0].phase, "pretrain");
  EXPECT_EQ(reps[2].phase, "search");
  EXPECT_EQ(reps[2].budget.target, st.target_macs);
  ASSERT_EQ(init.size(), 1u);  // one linear-attention block
  EXPECT_EQ(init[0].layer, "blocks.0.qk");
  EXPECT_NO_THROW(plan(st.masks(), st.spec));
}

TEST(Phases, TransitionsAreValidated) {
  auto st = search(tiny(), tiny_data());
  EXPECT_THROW(reconfigure(st), ContractError);
  refine(st, tiny_data());
  EXPECT_EQ(st.phase, Phase::refined);
  EXPECT_THROW(refine(st, tiny_data()), ContractError);
  const auto compacted = reconfigure(st);
  EXPECT_EQ(compacted.phase, Phase::compacted);
  auto again = compacted;
  EXPECT_THROW(refine(again, tiny_data()), ContractError);
  EXPECT_THROW(reconfigure(compacted), ContractError);
}

TEST(Refine, ZeroEpochsOnlyChangesPhase) {
  auto c = tiny();
  c.epochs_refine = 0;
  auto st = search(c, tiny_data());
  auto before = to_checkpoint(st);
  refine(st, tiny_data());
  auto after = to_checkpoint(st);
  EXPECT_EQ(after.phase, Phase::refined);
  after.phase = before.phase;
  EXPECT_EQ(after, before);
}

TEST(Refine, MasksFrozenBitForBit) {
  auto st = search(tiny(), tiny_data());
  const auto masks = st.masks();
  const auto params = st.params;
  refine(st, tiny_data());
  EXPECT_EQ(st.masks(), masks);
  EXPECT_NE(st.params, params);
}

TEST(Eval, DeterministicAndEqualAfterCompaction) {
  auto st = search(tiny(), tiny_data());
  refine(st, tiny_data());
  const auto& ev = tiny_data().eval;
  const double a = accuracy(st.spec, st.params, st.masks(), ev);
  EXPECT_EQ(a, accuracy(st.spec, st.params, st.masks(), ev, 3, 16));
  const auto cm = reconfigure(st);
  EXPECT_EQ(accuracy(cm.spec, cm.params, cm.masks(), ev), a);
  EXPECT_EQ(compute_macs(cm.spec, cm.masks()).total, compute_macs(st.spec, st.masks()).total);
}

TEST(Eval, RandomInitIsAtChance) {
  auto c = tiny();
  c.model.num_classes = 10;
  const auto st = initial_state(c);
  const auto d = gen_dataset(77, 1000, 10);
  const double acc = accuracy(st.spec, st.params, MaskSet::ones(st.spec), d);
  const double sigma = std::sqrt(0.1 * 0.9 / 1000.0);
  // A random model tends to collapse onto one class, whose frequency is ~1/k.
  EXPECT_NEAR(acc, 0.1, 3 * sigma + 0.02);
}

TEST(Checkpoint, StateRoundTripIsBitExact) {
  auto st = search(tiny(), tiny_data());
  const auto ck = to_checkpoint(st);
  const auto back = from_checkpoint(decode_checkpoint(encode_checkpoint(ck)));
  EXPECT_EQ(to_checkpoint(back), ck);
  EXPECT_EQ(back.params, st.params);
  EXPECT_EQ(back.masks(), st.masks());
  EXPECT_EQ(back.config, st.config);
  EXPECT_EQ(back.adam.size(), st.adam.size());
}

TEST(Checkpoint, ResumedRefineMatchesUninterrupted) {
  auto st = search(tiny(), tiny_data());
  auto resumed = from_checkpoint(decode_checkpoint(encode_checkpoint(to_checkpoint(st))));
  refine(st, tiny_data());
  refine(resumed, tiny_data());
  EXPECT_EQ(resumed.params, st.params);
}

TEST(Inspect, TopThreeNormDefinition) {
  const auto st = initial_state(tiny(1.0));
  const auto rep = inspect(st);
  ASSERT_FALSE(rep.spectra.empty());
  const auto& first = rep.spectra.front();
  EXPECT_EQ(first.projection, "blocks.0.attn.q");
  const auto& w = st.params.at("blocks.0.attn.q");
  Tensor<double> head({w.rows(), 8});
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < 8; ++c) head(r, c) = w(r, c);
  const auto s = singular_values(head);
  EXPECT_NEAR(first.top3_norm, std::sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2]), 1e-6);
  EXPECT_EQ(top3_singular_norm(Tensor<float>({5, 4})), 0.0);
  ASSERT_EQ(rep.histograms.size(), st.layers.size());
  for (const auto& h : rep.histograms) {
    std::size_t total = 0;
    for (auto b : h.bins) total += b;
    EXPECT_GT(total, 0u);
  }
}

TEST(Data, FileSourceMustMatchModel) {
  auto c = tiny();
  Dataset small = gen_dataset(1, 4, 4);
  small.height = small.width = 16;
  small.pixels.resize(4 * 16 * 16);
  EXPECT_THROW(check_dataset(c.model, small, "x"), ConfigError);
  EXPECT_THROW(check_dataset(c.model, gen_dataset(1, 4, 8), "x"), ConfigError);
}

TEST(Calibration, FourClassVariantIsLearnable) {
  RunConfig c;
  c.model.embed_dim = 32;
  c.model.num_classes = 4;
  c.model.blocks = {{AttentionKind::linear, 4, 64}, {AttentionKind::original, 4, 64}};
  c.data.train_count = 2000;
  c.data.eval_count = 500;
  c.target_fraction = 1.0;
  c.epochs_search = 8;
  c.lr_start = 2e-3;
  c.lr_end = 1e-5;
  c.batch_size = 64;
  c.shard_size = 64;
  c.seed = 1;
  double last = 0.0;
  search(c, load_splits(c), [&](const EpochReport& r) { last = r.eval_accuracy; });
  EXPECT_GE(last, 0.90);
}

}  // namespace
}  // namespace apma
