// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "cladapter/adapter.hpp"
#include "oracle/golden_fixture.hpp"
#include "test_support.hpp"

using namespace cladapter;
using namespace cladapter::testing;

TEST(InitAdapter, DeterministicForSeed) {
  const auto a = init_adapter(6, 3, 4, 42);
  const auto b = init_adapter(6, 3, 4, 42);
  std::vector<double> fa, fb;
  a.for_each_tensor([&](std::string_view, const auto& v) { fa.insert(fa.end(), v.data(), v.data() + v.size()); });
  b.for_each_tensor([&](std::string_view, const auto& v) { fb.insert(fb.end(), v.data(), v.data() + v.size()); });
  EXPECT_EQ(fa, fb);
  EXPECT_NE(init_adapter(6, 3, 4, 43).centers, a.centers);
}

TEST(InitAdapter, Shapes) {
  const auto p = init_adapter(4, 2, 4, 1);
  EXPECT_EQ(p.w1.rows(), 4);
  EXPECT_EQ(p.w1.cols(), 16);
  EXPECT_EQ(p.w2.rows(), 16);
  EXPECT_EQ(p.w2.cols(), 4);
  EXPECT_EQ(p.centers.rows(), 4);
  EXPECT_EQ(p.centers.cols(), 2);
  EXPECT_NO_THROW(p.validate());
}

TEST(InitAdapter, ZeroNoiseGivesIdentityTransforms) {
  const auto p = init_adapter(5, 3, 2, 9, 0.0);
  for (const auto& m : p.transforms) EXPECT_EQ(m, Matrixd::Identity(5, 5));
  EXPECT_TRUE(p.norm_in.gain.isOnes(0.0));
  EXPECT_TRUE(p.norm_mid.bias.isZero(0.0));
}

TEST(AttentionScores, SingleClusterIsOne) {
  std::mt19937_64 rng(1);
  const auto p = init_adapter(6, 1, 4, 2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = attention_scores(random_matrix(rng, 4, 6), p);
    ASSERT_EQ(s.beta.size(), 1);
    EXPECT_EQ(s.beta(0), 1.0);
  }
}

TEST(AttentionScores, AlignedAndOrthogonalCenters) {
  auto p = init_adapter(4, 2, 4, 3);
  Matrixd h(2, 4);
  h << 1, -1, 1, -1, 3, -3, 3, -3;  // pooled LayerNorm output points along (1,-1,1,-1)
  p.centers.col(0) << 1, -1, 1, -1;
  p.centers.col(1) << 1, 1, -1, -1;
  const auto s = attention_scores(h, p);
  const double e = std::exp(1.0);
  EXPECT_NEAR(s.beta(0), e / (e + 1.0), 1e-12);
  EXPECT_NEAR(s.beta(1), 1.0 / (e + 1.0), 1e-12);
  EXPECT_NEAR(s.beta(0), 0.73106, 1e-5);
}

TEST(AttentionScores, CenterScaleInvariance) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> alpha(1e-2, 1e2);
  auto p = init_adapter(8, 5, 4, 5);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrixd h = random_matrix(rng, 6, 8);
    const Vectord before = attention_scores(h, p).beta;
    auto scaled = p;
    for (Index k = 0; k < 5; ++k) scaled.centers.col(k) *= alpha(rng);
    EXPECT_LT((attention_scores(h, scaled).beta - before).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(AttentionScores, SimplexForRandomInputs) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const Index d = 2 + trial % 10, k = 1 + trial % 7;
    auto p = init_adapter(d, k, 2, trial);
    perturb(p, trial, 0.5);
    const Vectord beta = attention_scores(random_matrix(rng, 1 + trial % 6, d, 5.0), p).beta;
    EXPECT_GT(beta.minCoeff(), 0.0);
    EXPECT_LE(std::abs(beta.sum() - 1.0), 1e-12);
  }
}

TEST(AttentionScores, WidthMismatchThrows) {
  const auto p = init_adapter(4, 2, 4, 1);
  EXPECT_THROW(attention_scores(Matrixd(Matrixd::Zero(3, 5)), p), ShapeError);
  EXPECT_THROW(adapter_forward(Matrixd(Matrixd::Zero(3, 5)), p), ShapeError);
}

TEST(WeightedTransform, Examples) {
  auto p = init_adapter(3, 2, 1, 7);
  Vectord onehot(2);
  onehot << 0, 1;
  EXPECT_EQ(weighted_transform(onehot, p), p.transforms[1]);

  p.transforms[0] = Matrixd::Identity(3, 3);
  p.transforms[1] = 2.0 * Matrixd::Identity(3, 3);
  Vectord half(2);
  half << 0.5, 0.5;
  EXPECT_EQ(weighted_transform(half, p), 1.5 * Matrixd::Identity(3, 3));

  std::mt19937_64 rng(8);
  const Matrixd m = random_matrix(rng, 3, 3);
  p.transforms = {m, m};
  Vectord beta(2);
  beta << 0.3, 0.7;
  EXPECT_LT((weighted_transform(beta, p) - m).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(weighted_transform(Vectord(Vectord::Ones(3)), p), ShapeError);
}

TEST(AdapterForward, PreservesShape) {
  std::mt19937_64 rng(9);
  for (Index n : {1, 2, 7}) {
    const auto p = init_adapter(5, 3, 4, n);
    const Matrixd out = adapter_forward(random_matrix(rng, n, 5), p);
    EXPECT_EQ(out.rows(), n);
    EXPECT_EQ(out.cols(), 5);
  }
}

TEST(AdapterForward, RowPermutationEquivariance) {
  std::mt19937_64 rng(10);
  auto p = init_adapter(6, 4, 4, 11);
  perturb(p, 12, 0.2);
  const Matrixd h = random_matrix(rng, 7, 6);
  const Matrixd out = adapter_forward(h, p);
  std::vector<Index> perm(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrixd hp(7, 6), expected(7, 6);
    for (Index i = 0; i < 7; ++i) {
      hp.row(i) = h.row(perm[i]);
      expected.row(i) = out.row(perm[i]);
    }
    EXPECT_LT((adapter_forward(hp, p) - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(AdapterForward, GoldenMatchesOracleAndFixture) {
  const Matrixd h = golden_input();
  const auto p = golden_params();
  AdapterTape<double> tape;
  const Matrixd out = adapter_forward(h, p, &tape);
  const auto trace = oracle::forward(to_oracle(h), to_oracle(p));
  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 4; ++j) {
      EXPECT_NEAR(out(i, j), trace.output[i][j], 1e-12);
      EXPECT_NEAR(out(i, j), oracle::golden::kOutput[i][j], 1e-12);
    }
  }
  for (Index k = 0; k < 2; ++k) EXPECT_NEAR(tape.beta(k), oracle::golden::kBeta[k], 1e-12);
}

TEST(AdapterForward, MatchesOracleAtGenericParams) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = init_adapter(5, 3, 2, 100 + trial);
    perturb(p, 200 + trial, 0.3);
    const Matrixd h = random_matrix(rng, 4, 5, 2.0);
    const auto trace = oracle::forward(to_oracle(h), to_oracle(p));
    const Matrixd out = adapter_forward(h, p);
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 5; ++j) EXPECT_NEAR(out(i, j), trace.output[i][j], 1e-12);
  }
}

TEST(AdapterForward, IdentityBankReproducesNormalizedTokens) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = init_adapter(6, 4, 4, trial, 0.0);
    // Idempotence of LayerNorm holds up to O(eps); a negligible eps isolates the identity path.
    p.norm_in.eps = p.norm_mid.eps = 1e-14;
    AdapterTape<double> tape;
    adapter_forward(random_matrix(rng, 5, 6, 3.0), p, &tape);
    EXPECT_LT((tape.refined - tape.tokens_ln).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(AdapterForward, IdentityBankWithDefaultEpsIsCloseToNormalizedTokens) {
  std::mt19937_64 rng(16);
  auto p = init_adapter(6, 4, 4, 1, 0.0);
  AdapterTape<double> tape;
  adapter_forward(random_matrix(rng, 5, 6, 3.0), p, &tape);
  EXPECT_LT((tape.refined - tape.tokens_ln).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(AdapterForward, NonFiniteInputThrows) {
  const auto p = init_adapter(4, 2, 4, 1);
  Matrixd h = Matrixd::Ones(2, 4);
  h(0, 1) = NAN;
  EXPECT_THROW(adapter_forward(h, p), NumericError);
}

TEST(ParamCount, Examples) {
  EXPECT_EQ(adapter_param_count(1, 1, 1), 10);
  EXPECT_EQ(adapter_param_count(4, 2, 4), 204);
  EXPECT_EQ(adapter_param_count(768, 20, 4), 16'537'344);
}

TEST(ParamCount, MatchesEnumeration) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<Index> d(1, 24), k(1, 12), r(1, 6);
  for (int trial = 0; trial < 20; ++trial) {
    const Index dim = d(rng), clusters = k(rng), ratio = r(rng);
    EXPECT_EQ(count_entries(init_adapter(dim, clusters, ratio, trial)), adapter_param_count(dim, clusters, ratio));
  }
}

namespace {

// Flat views of the adapter so the checker can perturb it coordinate by coordinate.
Vectord pack(const AdapterParamsd& p) {
  std::vector<double> flat;
  p.for_each_tensor([&](std::string_view, const auto& v) { flat.insert(flat.end(), v.data(), v.data() + v.size()); });
  return Eigen::Map<Vectord>(flat.data(), static_cast<Index>(flat.size()));
}

void unpack(AdapterParamsd& p, const Vectord& flat) {
  Index off = 0;
  p.for_each_tensor([&](std::string_view, auto v) {
    v = flat.segment(off, v.size());
    off += v.size();
  });
}

}  // namespace

TEST(AdapterBackward, SumOfSquaresGradientPerGroup) {
  std::mt19937_64 rng(18);
  auto p = init_adapter(8, 3, 4, 19);
  perturb(p, 20, 0.1);
  const Matrixd h = random_matrix(rng, 5, 8);

  AdapterTape<double> tape;
  const Matrixd out = adapter_forward(h, p, &tape);
  auto grads = p.zeros_like();
  const Matrixd dh = adapter_backward(Matrixd(2.0 * out), p, tape, grads);

  auto loss = [&](const Vectord& flat) {
    auto q = p;
    unpack(q, flat);
    return adapter_forward(h, q).squaredNorm();
  };
  const Vectord params = pack(p), analytic = pack(grads);

  std::map<std::string, std::pair<Index, Index>> ranges;
  Index off = 0;
  p.for_each_tensor([&](std::string_view g, const auto& v) {
    auto [it, fresh] = ranges.try_emplace(std::string(g), off, off);
    it->second.second = off + v.size();
    off += v.size();
  });
  ASSERT_EQ(ranges.size(), 5u);
  for (const auto& [group, range] : ranges) {
    const auto r = grad_check(loss, params, analytic, 1e-5, range.first, range.second);
    EXPECT_LT(r.max_rel_error, 1e-4) << group << " worst index " << r.worst_index;
  }

  // Input gradient as well.
  auto loss_h = [&](const Vectord& flat) {
    return adapter_forward(Matrixd(Eigen::Map<const Matrixd>(flat.data(), 5, 8)), p).squaredNorm();
  };
  EXPECT_LT(grad_check(loss_h, Vectord(Eigen::Map<const Vectord>(h.data(), h.size())),
                       Vectord(Eigen::Map<const Vectord>(dh.data(), dh.size())), 1e-5)
                .max_rel_error,
            1e-4);
}

TEST(AdapterBackward, AccumulatesIntoGradients) {
  std::mt19937_64 rng(21);
  const auto p = init_adapter(4, 2, 2, 22);
  const Matrixd h = random_matrix(rng, 3, 4);
  AdapterTape<double> tape;
  const Matrixd out = adapter_forward(h, p, &tape);
  auto once = p.zeros_like();
  adapter_backward(out, p, tape, once);
  auto twice = p.zeros_like();
  adapter_backward(out, p, tape, twice);
  adapter_backward(out, p, tape, twice);
  EXPECT_LT((twice.w1 - 2.0 * once.w1).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((twice.centers - 2.0 * once.centers).cwiseAbs().maxCoeff(), 1e-14);
}
