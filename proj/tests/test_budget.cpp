// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "apma/budget.hpp"
#include "apma/config.hpp"
#include "apma/reconfigure.hpp"
#include "support.hpp"

namespace apma {
namespace {

ModelSpec toy() {
  auto s = hybrid_model();
  s.embed_dim = 16;
  s.blocks[0].ffn_hidden = s.blocks[1].ffn_hidden = 24;
  s.blocks[2].ffn_hidden = s.blocks[3].ffn_hidden = 20;
  return s;
}

const MacEntry& entry(const BudgetReport& r, const std::string& id) {
  for (const auto& e : r.entries)
    if (e.layer == id) return e;
  throw std::runtime_error("no entry " + id);
}

TEST(ComputeMacs, LinearAttentionTermArithmetic) {
  ModelSpec s;
  s.image_size = 16;
  s.patch_size = 4;  // N = 16
  s.embed_dim = 8;
  s.blocks = {{AttentionKind::linear, 2, 8}};
  EXPECT_EQ(entry(compute_macs(s, MaskSet::ones(s)), "blocks.0.attention").macs,
            16 * 8 * 8 + 16 * 8 * 8);
}

TEST(ComputeMacs, ZeroAttentionMasksZeroAttentionTerms) {
  const auto s = toy();
  auto m = MaskSet::ones(s);
  for (auto& b : m.blocks) b.qk.fill(0.0f), b.v.fill(0.0f);
  const auto r = compute_macs(s, m);
  for (std::size_t b = 0; b < s.blocks.size(); ++b)
    EXPECT_EQ(entry(r, block_prefix(b) + ".attention").macs, 0);
}

TEST(ComputeMacs, TotalIsSumOfCountedEntries) {
  const auto s = toy();
  const auto r = compute_macs(s, testing::aligned_masks(s, 3));
  std::int64_t sum = 0, info = 0;
  for (const auto& e : r.entries) {
    EXPECT_GE(e.macs, 0);
    (e.counted ? sum : info) += e.macs;
  }
  EXPECT_EQ(r.total, sum);
  EXPECT_EQ(r.informational, info);
  EXPECT_GT(info, 0);
}

// The counter sees the real multiplies only once masked channels are gone,
// so the instrumented route runs the compacted model.
TEST(ComputeMacs, MatchesInstrumentedCounterPerLayer) {
  const auto s = toy();
  const auto params = init_params(s, 4);
  const auto images = random_images(s, 1, 5);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto masks = seed == 0 ? MaskSet::ones(s) : testing::aligned_masks(s, seed);
    const auto formula = compute_macs(s, masks);
    const auto cm = compact(params, s, plan(masks, s));
    mac_counter::enable();
    predict(cm.spec, cm.params, MaskSet::ones(cm.spec), images);
    const auto counted = mac_counter::read_by_label();
    mac_counter::disable();
    std::int64_t covered = 0;
    for (const auto& e : formula.entries) {
      const auto it = counted.find(e.layer);
      const std::int64_t got = it == counted.end() ? 0 : it->second;
      EXPECT_EQ(got, e.macs) << e.layer << " seed " << seed;
      if (e.counted) covered += got;
    }
    EXPECT_EQ(covered, formula.total);
    EXPECT_EQ(compute_macs(cm.spec, MaskSet::ones(cm.spec)).total, formula.total);
  }
}

TEST(ComputeMacs, PruningMoreNeverIncreasesTotal) {
  const auto s = toy();
  auto m = MaskSet::ones(s);
  std::int64_t prev = compute_macs(s, m).total;
  std::mt19937_64 rng(6);
  for (int step = 0; step < 60; ++step) {
    auto& b = m.blocks[rng() % s.blocks.size()];
    Tensor<float>& t = step % 3 == 0 ? b.qk : (step % 3 == 1 ? b.v : b.ffn);
    t[rng() % t.size()] = 0.0f;
    const auto cur = compute_macs(s, m).total;
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}

TEST(ComputeMacs, ScalingInTokensAndKeepFraction) {
  ModelSpec lin;
  lin.image_size = 16;
  lin.patch_size = 2;
  lin.embed_dim = 16;
  lin.blocks = {{AttentionKind::linear, 4, 16}};
  auto orig = lin;
  orig.blocks[0].kind = AttentionKind::original;
  auto big_lin = lin, big_orig = orig;
  big_lin.image_size = big_orig.image_size = 32;  // 4x tokens
  auto att = [](const ModelSpec& s) {
    return entry(compute_macs(s, MaskSet::ones(s)), "blocks.0.attention").macs;
  };
  EXPECT_EQ(att(big_lin), 4 * att(lin));
  EXPECT_EQ(att(big_orig), 16 * att(orig));
  // Uniform keep fraction rho: the linear attention term scales with rho^2.
  auto half = MaskSet::ones(lin);
  for (std::size_t i = 0; i < 16; ++i)
    if (i % 4 >= 2) half.blocks[0].qk[i] = half.blocks[0].v[i] = 0.0f;
  EXPECT_EQ(4 * entry(compute_macs(lin, half), "blocks.0.attention").macs, att(lin));
}

TEST(MacLoss, Examples) {
  EXPECT_EQ(mac_loss(100.0, 100.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(mac_loss(150.0, 100.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(mac_loss(50.0, 100.0, 2.0), 1.0);
  EXPECT_THROW(mac_loss(1.0, 0.0, 1.0), ContractError);
}

TEST(RelaxedMacs, AgreesWithFormulaOnBinaryMasks) {
  const auto s = toy();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto masks = testing::aligned_masks(s, seed);
    ad::Tape<double> tape(false);
    const auto mv = bind_masks<double>(tape, masks, false);
    EXPECT_DOUBLE_EQ(ad::relaxed_macs(tape, s, mv).value()[0], double(compute_macs(s, masks).total));
  }
}

TEST(RelaxedMacs, LossGradientSignFollowsBudgetSide) {
  const auto s = toy();
  const auto masks = MaskSet::ones(s);
  const double full = double(compute_macs(s, masks).total);
  for (double target : {0.5 * full, 1.5 * full}) {
    auto loss_at = [&](double delta) {
      ad::Tape<double> tape(false);
      auto mv = bind_masks<double>(tape, masks, false);
      auto ffn = masks.blocks[0].ffn.cast<double>();
      ffn[0] += delta;
      mv[0].ffn = tape.constant(ffn);
      return ad::mac_loss(ad::relaxed_macs(tape, s, mv), target, 1.0).value()[0];
    };
    const double fd = (loss_at(1e-3) - loss_at(-1e-3)) / 2e-3;
    ad::Tape<double> tape;
    auto mv = bind_masks<double>(tape, masks, true);
    tape.backward(ad::mac_loss(ad::relaxed_macs(tape, s, mv), target, 1.0));
    const double g = tape.grad(mv[0].ffn)[0];
    EXPECT_NEAR(g, fd, 1e-6 * std::abs(fd));
    if (target < full) EXPECT_GT(g, 0.0);
    else EXPECT_LT(g, 0.0);
  }
}

}  // namespace
}  // namespace apma
