// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "apma/log.hpp"
#include "apma/pruning.hpp"

namespace apma {
namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  Tensor<double> t({r, c});
  for (auto& v : t.values()) v = d(rng);
  return t;
}

TEST(Similarity, IdenticalColumnsAreFullySimilar) {
  auto p = Tensor<double>::from_rows({{1, 1}, {2, 2}, {-1, -1}});
  EXPECT_EQ(similarity_matrix(p), Tensor<double>::from_rows({{1, 1}, {1, 1}}));
}

TEST(Similarity, OrthogonalColumnsGiveIdentity) {
  auto p = Tensor<double>::from_rows({{1, 0, 0}, {0, 2, 0}, {0, 0, 3}, {0, 0, 0}});
  EXPECT_EQ(similarity_matrix(p), Tensor<double>::identity(3));
}

TEST(Similarity, MatchesPairwiseDotOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_matrix(8, 4, rng);
    auto s = similarity_matrix(p.cast<float>());
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double dot = 0, ni = 0, nj = 0;
        for (std::size_t r = 0; r < 8; ++r) {
          dot += p(r, i) * p(r, j);
          ni += p(r, i) * p(r, i);
          nj += p(r, j) * p(r, j);
        }
        EXPECT_NEAR(s(i, j), i == j ? 1.0 : dot / std::sqrt(ni * nj), 1e-6);
      }
  }
}

TEST(Similarity, ZeroColumnResemblesNothing) {
  log::ScopedSink quiet(nullptr);
  auto p = Tensor<double>::from_rows({{1, 0, 1}, {1, 0, 1}});
  auto s = similarity_matrix(p);
  EXPECT_EQ(s(1, 1), 1.0);
  EXPECT_EQ(s(0, 1), 0.0);
  EXPECT_EQ(s(2, 1), 0.0);
  EXPECT_NEAR(s(0, 2), 1.0, 1e-15);
}

TEST(SimilarityWeights, Examples) {
  EXPECT_EQ(similarity_weights(Tensor<double>::identity(3)), Tensor<double>({3}, 1.0));
  EXPECT_EQ(similarity_weights(Tensor<double>({2, 2}, 1.0)), Tensor<double>({2}, 2.0));
  auto s = Tensor<double>::from_rows({{1, 0.3, -0.7}, {0.3, 1, 0}, {-0.7, 0, 1}});
  EXPECT_DOUBLE_EQ(similarity_weights(s)[0], 1.7);
  EXPECT_EQ(similarity_weights(Tensor<double>({1, 1}, 1.0))[0], 1.0);
}

TEST(SimilarityWeights, AlwaysWithinOneAndTwo) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto w = head_similarity_weights(random_matrix(6, 8, rng), 2);
    for (double v : w.values()) {
      EXPECT_GE(v, 1.0);
      EXPECT_LE(v, 2.0);
    }
  }
}

TEST(WeightedIndicator, Examples) {
  auto m = Tensor<double>::from_vector({0.2, 0.3});
  EXPECT_EQ(weighted_indicator(Tensor<double>({2}, 1.0), m), m);
  EXPECT_EQ(weighted_indicator(Tensor<double>::from_vector({1.5, 2}), Tensor<double>({2})),
            Tensor<double>({2}));
  auto got = weighted_indicator(Tensor<double>::from_vector({1.5, 2}), m);
  EXPECT_NEAR(got[0], 0.3, 1e-15);
  EXPECT_NEAR(got[1], 0.6, 1e-15);
  EXPECT_THROW(weighted_indicator(Tensor<double>({3}), m), ContractError);
}

TEST(RankAverage, SingleHeadUnchanged) {
  auto m = Tensor<double>::from_vector({0.4, 0.1, 0.9});
  EXPECT_EQ(adjust_rank_average(m, 1), m);
}

TEST(RankAverage, TwoHeadExample) {
  auto got = adjust_rank_average(Tensor<double>::from_vector({0.1, 0.9, 0.8, 0.2}), 2);
  const std::vector<double> want = {0.15, 0.85, 0.85, 0.15};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(got[i], want[i], 1e-15);
}

TEST(RankAverage, IdenticalHeadsAreAFixedPoint) {
  auto m = Tensor<double>::from_vector({0.3, 0.1, 0.7, 0.3, 0.1, 0.7});
  EXPECT_EQ(adjust_rank_average(m, 2), m);
}

TEST(RankAverage, TiesBrokenByLowerIndex) {
  // Head 0 ties at 0.5: channel 0 takes rank 0, channel 1 rank 1.
  auto got = adjust_rank_average(Tensor<double>::from_vector({0.5, 0.5, 0.1, 0.3}), 2);
  EXPECT_NEAR(got[0], 0.3, 1e-15);
  EXPECT_NEAR(got[1], 0.4, 1e-15);
  EXPECT_NEAR(got[2], 0.3, 1e-15);
  EXPECT_NEAR(got[3], 0.4, 1e-15);
}

TEST(RankAverage, PreservesMeanAndEqualizesMultisets) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(0.0, 2.0);
  for (std::size_t h : {2u, 4u, 8u}) {
    Tensor<double> m({h * 5});
    for (auto& v : m.values()) v = d(rng);
    auto a = adjust_rank_average(m, h);
    double s0 = 0, s1 = 0;
    for (std::size_t i = 0; i < m.size(); ++i) s0 += m[i], s1 += a[i];
    EXPECT_NEAR(s0, s1, 1e-12);
    std::vector<double> ref(a.data(), a.data() + 5);
    std::sort(ref.begin(), ref.end());
    for (std::size_t hd = 1; hd < h; ++hd) {
      std::vector<double> other(a.data() + hd * 5, a.data() + hd * 5 + 5);
      std::sort(other.begin(), other.end());
      EXPECT_EQ(other, ref);
    }
  }
}

TEST(Binarize, KeepsStrictlyBelowThreshold) {
  EXPECT_EQ(binarize(Tensor<double>::from_vector({0.1, 0.49, 0.5, 0.9}), 0.5),
            Tensor<double>::from_vector({1, 1, 0, 0}));
  EXPECT_EQ(binarize(Tensor<double>({3}), 0.5), Tensor<double>({3}, 1.0));
  EXPECT_EQ(binarize(Tensor<double>({3}, 1.0), 0.5), Tensor<double>({3}));
  EXPECT_THROW(binarize(Tensor<double>({3}), 1.0), ContractError);
}

TEST(Binarize, KeptSetShrinksAsThresholdDrops) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(0.0, 1.5);
  Tensor<double> m({64});
  for (auto& v : m.values()) v = d(rng);
  auto prev = binarize(m, 0.99);
  for (double tau = 0.95; tau > 0.0; tau -= 0.05) {
    auto cur = binarize(m, tau);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_LE(cur[i], prev[i]);
    prev = cur;
  }
}

TEST(ApplyMask, ZeroesPrunedColumns) {
  auto w = Tensor<double>::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(apply_mask(w, Tensor<double>({3}, 1.0)), w);
  EXPECT_EQ(apply_mask(w, Tensor<double>::from_vector({1, 0, 1})),
            Tensor<double>::from_rows({{1, 0, 3}, {4, 0, 6}}));
  EXPECT_THROW(apply_mask(w, Tensor<double>({2})), DimensionError);
}

ModelSpec one_block(AttentionKind kind) {
  ModelSpec s;
  s.image_size = 8;
  s.patch_size = 4;
  s.embed_dim = 8;
  s.num_classes = 3;
  s.blocks = {{kind, 2, 12}};
  return s;
}

Tensor<float> random_images(const ModelSpec& spec, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Tensor<float> t({n, spec.image_size, spec.image_size, 1});
  for (auto& v : t.values()) v = d(rng);
  return t;
}

TEST(ApplyMask, MaskedForwardEqualsZeroedCopyBitExact) {
  const auto spec = one_block(AttentionKind::original);
  auto params = init_params(spec, 5);
  auto masks = MaskSet::ones(spec);
  masks.blocks[0].v = Tensor<float>::from_vector({1, 0, 1, 1, 0, 1, 1, 1});
  masks.blocks[0].ffn = Tensor<float>::from_vector({1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 1, 0});
  const auto imgs = random_images(spec, 4, 6);
  auto zeroed = params;
  zeroed.at("blocks.0.attn.v") = apply_mask(params.at("blocks.0.attn.v"), masks.blocks[0].v);
  zeroed.at("blocks.0.ffn.w1") = apply_mask(params.at("blocks.0.ffn.w1"), masks.blocks[0].ffn);
  zeroed.at("blocks.0.ffn.b1") = apply_mask(params.at("blocks.0.ffn.b1"), masks.blocks[0].ffn);
  EXPECT_EQ(predict(spec, params, masks, imgs), predict(spec, zeroed, MaskSet::ones(spec), imgs));
}

TEST(ApplyMask, AllZeroFfnMaskSilencesFfn) {
  const auto spec = one_block(AttentionKind::linear);
  auto params = init_params(spec, 7);
  auto masks = MaskSet::ones(spec);
  masks.blocks[0].ffn.fill(0.0f);
  auto other = params;
  for (auto& v : other.at("blocks.0.ffn.w1").values()) v *= 3.0f;
  const auto imgs = random_images(spec, 2, 8);
  EXPECT_EQ(predict(spec, params, masks, imgs), predict(spec, other, masks, imgs));
}

PrunableLayer random_layer(std::size_t heads, std::size_t width, std::mt19937_64& rng) {
  PrunableLayer l;
  l.id = "test";
  l.heads = heads;
  std::uniform_real_distribution<float> d(0.0f, 0.6f);
  l.indicator = Tensor<float>({heads * width});
  for (auto& v : l.indicator.values()) v = d(rng);
  return l;
}

TEST(Refresh, HeadAlignmentOverRandomDraws) {
  log::ScopedSink quiet(nullptr);
  std::mt19937_64 rng(9);
  const std::size_t heads[] = {1, 2, 4, 8};
  for (int draw = 0; draw < 1000; ++draw) {
    const std::size_t h = heads[draw % 4], width = 1 + rng() % 6;
    auto layer = random_layer(h, width, rng);
    refresh(layer, random_matrix(10, h * width, rng).cast<float>());
    const auto counts = kept_per_head(layer.mask, h);
    for (auto c : counts) ASSERT_EQ(c, counts[0]) << "draw " << draw;
    for (float w : layer.weights.values()) {
      ASSERT_GE(w, 1.0f);
      ASSERT_LE(w, 2.0f);
    }
  }
}

TEST(Refresh, DeterministicForFrozenState) {
  std::mt19937_64 rng(10);
  auto layer = random_layer(4, 4, rng);
  const auto p = random_matrix(8, 16, rng).cast<float>();
  refresh(layer, p);
  const auto first = layer.mask;
  refresh(layer, p);
  EXPECT_EQ(layer.mask, first);
}

TEST(Refresh, GuardKeepsLowestScorePerHead) {
  std::mt19937_64 rng(11);
  PrunableLayer layer;
  layer.id = "guarded";
  layer.heads = 2;
  layer.indicator = Tensor<float>::from_vector({0.9f, 0.7f, 0.8f, 0.95f});
  std::vector<std::string> lines;
  log::ScopedSink capture([&](const std::string& s) { lines.push_back(s); });
  RefreshOptions opt;
  opt.similarity_weight = false;
  EXPECT_EQ(refresh(layer, random_matrix(4, 4, rng).cast<float>(), opt), 2u);
  // Rank-averaged: rank 0 = (0.7 + 0.8) / 2 at channels 1 and 2.
  EXPECT_EQ(layer.mask, Tensor<float>::from_vector({0, 1, 1, 0}));
  EXPECT_EQ(lines.size(), 1u);
}

TEST(Refresh, WithoutAdjustmentHeadsCanDiverge) {
  std::mt19937_64 rng(12);
  PrunableLayer layer;
  layer.heads = 2;
  layer.indicator = Tensor<float>::from_vector({0.1f, 0.2f, 0.9f, 0.1f});
  RefreshOptions opt;
  opt.similarity_weight = false;
  opt.multihead_adjust = false;
  refresh(layer, random_matrix(4, 4, rng).cast<float>(), opt);
  EXPECT_EQ(kept_per_head(layer.mask, 2), (std::vector<std::size_t>{2, 1}));
}

TEST(Refresh, QueryKeyShareOneMaskFromQueryProjection) {
  const auto spec = one_block(AttentionKind::linear);
  auto layers = make_layers(spec, 0.3f);
  ASSERT_EQ(layers[0].role, LayerRole::query_key);
  EXPECT_EQ(layers[0].projections,
            (std::vector<std::string>{"blocks.0.attn.q", "blocks.0.attn.k"}));
  auto params = init_params(spec, 13);
  refresh_all(layers, params);
  EXPECT_EQ(layers[0].weights, head_similarity_weights(params.at("blocks.0.attn.q"), 2));
}

// ---------------------------------------------------------------------------
// Gradient contract: with the mask frozen, dL/dm equals w times the gradient
// passed through the binarization. The pass-through is taken with respect to
// the keep margin tau - m*, so it is the negated relaxed-mask derivative.

double loss_with_masks(const ModelSpec& spec, const ModelParams<double>& p,
                       const std::vector<Tensor<double>>& m, const Tensor<double>& imgs,
                       const std::vector<int>& labels) {
  ad::Tape<double> tape(false);
  auto pv = bind_params(tape, p, false);
  MaskVars<double> mv{{tape.leaf(m[0], false), tape.leaf(m[1], false), tape.leaf(m[2], false)}};
  return ad::cross_entropy(forward_model(tape, spec, pv, mv, imgs), labels).value()[0];
}

class GradientContract : public ::testing::TestWithParam<AttentionKind> {};

TEST_P(GradientContract, IndicatorGradientIsWeightedPassThrough) {
  log::ScopedSink quiet(nullptr);
  const auto spec = one_block(GetParam());
  const auto params32 = init_params(spec, 14);
  const auto params = params32.cast<double>();
  auto layers = make_layers(spec, 0.0f);
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<float> d(0.0f, 0.45f);
  for (auto& l : layers)
    for (auto& v : l.indicator.values()) v = d(rng);
  refresh_all(layers, params32);
  const auto imgs = random_images(spec, 6, 16).cast<double>();
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2};
  const double tau = 0.5;

  ad::Tape<double> tape;
  auto pv = bind_params(tape, params, false);
  std::vector<ad::Var<double>> ind, mk;
  for (const auto& l : layers) {
    ind.push_back(tape.leaf(l.indicator.cast<double>()));
    mk.push_back(ad::indicator_mask(ind.back(), l.weights.cast<double>(),
                                    l.mask.cast<double>(), tau));
  }
  MaskVars<double> mv{{mk[0], mk[1], mk[2]}};
  tape.backward(ad::cross_entropy(forward_model(tape, spec, pv, mv, imgs), labels));

  std::vector<Tensor<double>> relaxed;
  for (const auto& l : layers) relaxed.push_back(l.mask.cast<double>());
  const double h = 1e-3;
  std::size_t checked = 0;
  for (std::size_t li = 0; li < 3; ++li) {
    const auto grad_m = tape.grad(ind[li]);
    for (std::size_t i = 0; i < relaxed[li].size(); ++i) {
      // Pruned query/key channels switch the feature map and kept-width scale
      // off at exactly zero, so the relaxed loss is not smooth there.
      if (li == 0 && relaxed[li][i] == 0.0) continue;
      auto up = relaxed, down = relaxed;
      up[li][i] += h;
      down[li][i] -= h;
      const double g = (loss_with_masks(spec, params, up, imgs, labels) -
                        loss_with_masks(spec, params, down, imgs, labels)) /
                       (2 * h);
      const double want = -double(layers[li].weights[i]) * g;
      const double scale = std::max({std::abs(want), std::abs(grad_m[i]), 1e-4});
      EXPECT_LE(std::abs(grad_m[i] - want), 1e-3 * scale)
          << layers[li].id << " channel " << i << ": tape " << grad_m[i] << " oracle " << want;
      ++checked;
    }
  }
  EXPECT_GT(checked, 20u);
}

INSTANTIATE_TEST_SUITE_P(BothKinds, GradientContract,
                         ::testing::Values(AttentionKind::linear, AttentionKind::original));

}  // namespace
}  // namespace apma
