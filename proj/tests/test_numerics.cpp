// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <random>

#include "apma/linalg.hpp"
#include "apma/ops.hpp"
#include "apma/optim.hpp"

namespace apma {
namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  Tensor<double> t({r, c});
  for (auto& v : t.values()) v = d(rng);
  return t;
}

TEST(Tensor, ShapeAndSizeAgree) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto a = Tensor<float>::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor<float>::identity(2), a), a);
}

TEST(Matmul, HandWorkedProduct) {
  auto a = Tensor<float>::from_rows({{1, 2}, {3, 4}});
  auto b = Tensor<float>::from_rows({{0}, {1}});
  EXPECT_EQ(matmul(a, b), Tensor<float>::from_rows({{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  auto a = random_matrix(8, 4, 1), b = random_matrix(4, 6, 2);
  auto got = matmul(a.cast<float>(), b.cast<float>());
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double ref = 0;
      for (std::size_t k = 0; k < 4; ++k) ref += a(i, k) * b(k, j);
      EXPECT_NEAR(got(i, j), ref, 1e-6 * std::max(1.0, std::abs(ref)));
    }
}

TEST(Matmul, TransposedVariantsAgreeWithExplicitTranspose) {
  auto a = random_matrix(5, 3, 3), b = random_matrix(7, 3, 4), c = random_matrix(5, 2, 5);
  EXPECT_LT(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor<float>({2, 3}), Tensor<float>({4, 5}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("[4x5]"), std::string::npos) << e.what();
  }
}

TEST(Softmax, UniformRow) {
  auto s = softmax_rows(Tensor<float>::from_rows({{0, 0, 0}}));
  for (float v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  auto s = softmax_rows(Tensor<float>::from_rows({{1000, 0}}));
  EXPECT_NEAR(s[0], 1.0, 1e-6);
  EXPECT_NEAR(s[1], 0.0, 1e-6);
}

TEST(Softmax, MatchesDirectEvaluation) {
  auto s = softmax_rows(Tensor<float>::from_rows({{1, 2, 3}}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(s[j], std::exp(j + 1.0) / z, 1e-6);
}

TEST(Softmax, RowsSumToOneForWideRange) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> d(-1e4f, 1e4f);
  Tensor<float> a({50, 17});
  for (auto& v : a.values()) v = d(rng);
  auto s = softmax_rows(a);
  for (std::size_t r = 0; r < 50; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 17; ++c) {
      EXPECT_GE(s(r, c), 0.0f);
      sum += s(r, c);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(SingularValues, Diagonal) {
  auto s = singular_values(Tensor<double>::from_rows({{3, 0}, {0, 1}}));
  EXPECT_NEAR(s[0], 3.0, 1e-12);
  EXPECT_NEAR(s[1], 1.0, 1e-12);
}

TEST(SingularValues, ZeroMatrix) {
  auto s = singular_values(Tensor<double>({4, 3}));
  ASSERT_EQ(s.size(), 3u);
  for (double v : s.values()) EXPECT_EQ(v, 0.0);
}

TEST(SingularValues, FrobeniusIdentityAndEigenOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto a = random_matrix(6, 4, 100 + seed);
    auto s = singular_values(a);
    ASSERT_EQ(s.size(), 4u);
    double fro = 0, ss = 0;
    for (double v : a.values()) fro += v * v;
    for (double v : s.values()) ss += v * v;
    EXPECT_NEAR(ss, fro, 1e-5 * fro);
    for (std::size_t i = 1; i < s.size(); ++i) EXPECT_GE(s[i - 1], s[i]);

    // Independent oracle: Eigen's self-adjoint solver (tridiagonal QR) on A^T A.
    Eigen::MatrixXd m(6, 4);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 4; ++j) m(i, j) = a(i, j);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m);
    std::vector<double> ref(4);
    for (int i = 0; i < 4; ++i) ref[i] = std::sqrt(std::max(0.0, es.eigenvalues()[i]));
    std::sort(ref.rbegin(), ref.rend());
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(s[i], ref[i], 1e-5 * std::max(1.0, ref[0]));
  }
}

TEST(SingularValues, WideMatrixUsesSmallerGram) {
  auto a = random_matrix(3, 9, 7);
  auto s = singular_values(a), st = singular_values(transpose(a));
  ASSERT_EQ(s.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[i], st[i], 1e-10);
}

TEST(SingularValues, PermutationInvariant) {
  auto a = random_matrix(7, 5, 11);
  std::vector<std::size_t> rp = {3, 0, 6, 1, 5, 2, 4}, cp = {4, 2, 0, 3, 1};
  Tensor<double> b({7, 5});
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 5; ++j) b(i, j) = a(rp[i], cp[j]);
  auto sa = singular_values(a), sb = singular_values(b);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(sa[i], sb[i], 1e-6);
}

TEST(SingularValues, NonConvergenceReportsResidual) {
  auto a = random_matrix(8, 8, 13);
  JacobiOptions opt;
  opt.max_sweeps = 1;
  opt.tolerance = 1e-300;
  try {
    singular_values(a, opt);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_GT(e.residual(), 0.0);
  }
}

TEST(MacCounter, ReadWithoutEnableIsContractError) {
  mac_counter::disable();
  EXPECT_THROW(mac_counter::read(), ContractError);
}

TEST(MacCounter, CountsMKPAndIsAdditive) {
  mac_counter::enable();
  matmul(Tensor<float>({2, 3}), Tensor<float>({3, 4}));
  EXPECT_EQ(mac_counter::read(), 24);
  matmul_nt(Tensor<float>({5, 2}), Tensor<float>({3, 2}));
  EXPECT_EQ(mac_counter::read(), 24 + 30);
  mac_counter::disable();
}

TEST(MacCounter, AssociativityAtCountLevel) {
  const std::size_t n = 16, cq = 8, cv = 4;
  Tensor<float> q({n, cq}), k({n, cq}), v({n, cv});
  mac_counter::enable();
  matmul(matmul_nt(q, k), v);
  EXPECT_EQ(mac_counter::read(), std::int64_t(n * cq * n + n * n * cv));
  mac_counter::enable();
  matmul(q, matmul_tn(k, v));
  EXPECT_EQ(mac_counter::read(), std::int64_t(cq * n * cv + n * cq * cv));
  mac_counter::disable();
}

TEST(AdamW, ZeroGradientZeroDecayIsNoOp) {
  auto w = Tensor<float>::from_vector({1.0f, -2.0f});
  AdamState s;
  adamw_step(w, Tensor<float>({2}), s, 0.1, 0.0);
  EXPECT_EQ(w, Tensor<float>::from_vector({1.0f, -2.0f}));
}

TEST(AdamW, DecoupledDecayShrinksWeightsDirectly) {
  auto w = Tensor<float>::from_vector({1.0f, -2.0f});
  AdamState s;
  adamw_step(w, Tensor<float>({2}), s, 0.1, 0.5);
  EXPECT_FLOAT_EQ(w[0], 1.0f * (1 - 0.05f));
  EXPECT_FLOAT_EQ(w[1], -2.0f * (1 - 0.05f));
}

TEST(AdamW, MatchesScalarSimulationOnQuadratic) {
  // Oracle: direct scalar AdamW recursion in double.
  double wr = 1.0, m = 0, v = 0;
  auto w = Tensor<float>::from_vector({1.0f});
  AdamState s;
  for (int t = 1; t <= 100; ++t) {
    const double g = 2 * wr;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    wr -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    adamw_step(w, Tensor<float>::from_vector({2 * w[0]}), s, 0.1, 0.0);
  }
  EXPECT_LT(std::abs(w[0]), 0.05);
  EXPECT_NEAR(w[0], wr, 1e-4);
}

TEST(CosineLr, EndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(5e-4, 5e-6, 0, 100), 5e-4);
  // The last step (total - 1) already runs at the end rate.
  EXPECT_NEAR(cosine_lr(5e-4, 5e-6, 99, 100), 5e-6, 1e-18);
  EXPECT_NEAR(cosine_lr(5e-4, 5e-6, 100, 100), 5e-6, 1e-18);
  EXPECT_NEAR(cosine_lr(5e-4, 5e-6, 50, 101), (5e-4 + 5e-6) / 2, 1e-15);
  for (int s = 1; s <= 100; ++s) EXPECT_LE(cosine_lr(5e-4, 5e-6, s, 100), cosine_lr(5e-4, 5e-6, s - 1, 100));
}

}  // namespace
}  // namespace apma
