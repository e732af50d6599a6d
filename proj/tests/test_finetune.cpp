// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cladapter/finetune.hpp"
#include "test_support.hpp"

using namespace cladapter;
using cladapter::testing::random_matrix;
using cladapter::testing::random_vector;

namespace {

TaskSpec small_task(std::uint64_t seed = 3) {
  TaskSpec t;
  t.classes = 3;
  t.tokens = 4;
  t.input_dim = 6;
  t.train_per_class = 8;
  t.val_per_class = 4;
  t.seed = seed;
  return t;
}

Model small_model(bool with_adapter = true, TensorKind kind = TensorKind::VitTokens, Index frames = 1) {
  Model m{make_backbone(6, 6, kind, 1, frames), std::nullopt, init_head(6, 3, 3)};
  if (with_adapter) m.adapter = init_adapter(6, 2, 2, 2);
  return m;
}

TrainPlan short_plan(FineTuneMode mode, int s1, int s2 = 0) {
  TrainPlan p;
  p.mode = mode;
  p.stage1_epochs = s1;
  p.stage2_epochs = s2;
  p.optimizer.lr = 1e-2;
  p.batch_size = 5;
  p.seed = 11;
  return p;
}

bool same_params(Model a, Model b) { return flatten(a, true) == flatten(b, true); }

}  // namespace

TEST(Head, ZeroWeightsGiveBias) {
  HeadParams h{Matrixd::Zero(3, 2), Vectord::Zero(2)};
  h.bias << 0.5, -1.0;
  std::mt19937_64 rng(1);
  EXPECT_EQ(head_forward(random_matrix(rng, 4, 3), h), h.bias);
}

TEST(Head, MeanPoolThenProject) {
  HeadParams h{Matrixd::Identity(2, 2), Vectord::Zero(2)};
  Matrixd tokens(2, 2);
  tokens << 1, 2, 3, 4;
  const Vectord z = head_forward(tokens, h);
  EXPECT_DOUBLE_EQ(z(0), 2.0);
  EXPECT_DOUBLE_EQ(z(1), 3.0);
  EXPECT_THROW(head_forward(Matrixd(Matrixd::Zero(2, 3)), h), ShapeError);
}

TEST(Head, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  HeadParams h{random_matrix(rng, 4, 3), random_vector(rng, 3)};
  const Matrixd tokens = random_matrix(rng, 5, 4);
  HeadParams g{Matrixd::Zero(4, 3), Vectord::Zero(3)};
  const Vectord dlogits = cross_entropy_grad(head_forward(tokens, h), 1);
  const Matrixd dtokens = head_backward(tokens, dlogits, h, g);
  auto f = [&](const Vectord& x) { return cross_entropy(head_forward(Eigen::Map<const Matrixd>(x.data(), 5, 4), h), 1); };
  EXPECT_LT(grad_check(f, Vectord(Eigen::Map<const Vectord>(tokens.data(), 20)), Vectord(Eigen::Map<const Vectord>(dtokens.data(), 20)), 1e-5)
                .max_rel_error,
            1e-6);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(Vectord::Zero(5), 2), std::log(5.0), 1e-15);
  Vectord confident = Vectord::Zero(3);
  confident(1) = 100.0;
  EXPECT_LT(cross_entropy(confident, 1), 1e-12);
  Vectord two(2);
  two << 1.0, 0.0;
  EXPECT_NEAR(cross_entropy(two, 1), std::log(1.0 + std::exp(1.0)), 1e-15);
  EXPECT_NEAR(cross_entropy(two, 1), 1.3132617, 1e-7);
}

TEST(CrossEntropy, BadLabelThrows) {
  EXPECT_THROW(cross_entropy(Vectord::Zero(3), 3), ArgumentError);
  EXPECT_THROW(cross_entropy_grad(Vectord::Zero(3), -1), ArgumentError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  std::mt19937_64 rng(4);
  const Vectord z = random_vector(rng, 4);
  auto f = [&](const Vectord& x) { return cross_entropy(x, 2); };
  EXPECT_LT(grad_check(f, z, cross_entropy_grad(z, 2), 1e-5).max_rel_error, 1e-7);
  EXPECT_NEAR(cross_entropy_grad(z, 2).sum(), 0.0, 1e-15);
}

TEST(Argmax, TiesGoLow) {
  Vectord z(3);
  z << 1.0, 3.0, 3.0;
  EXPECT_EQ(argmax(z), 1);
}

TEST(AdamW, FirstStepMovesAgainstGradientSign) {
  Vectord p(3), g(3);
  p << 1.0, -2.0, 0.5;
  g << 0.3, -4.0, 1e-3;
  const Vectord start = p;
  AdamWSettings opt;
  opt.weight_decay = 0.0;
  OptimizerState s;
  adamw_step(p, g, s, opt);
  for (Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(p(i) - start(i), -opt.lr * g(i) / (std::abs(g(i)) + opt.eps), 1e-15);
    EXPECT_NEAR(std::abs(p(i) - start(i)), opt.lr, 1e-8);
  }
}

TEST(AdamW, ZeroGradientOnlyDecays) {
  Vectord p(2);
  p << 3.0, -1.5;
  AdamWSettings opt;
  opt.lr = 0.1;
  opt.weight_decay = 0.01;
  OptimizerState s;
  adamw_step(p, Vectord::Zero(2), s, opt);
  EXPECT_DOUBLE_EQ(p(0), 3.0 * (1.0 - 0.1 * 0.01));
  EXPECT_DOUBLE_EQ(p(1), -1.5 * (1.0 - 0.1 * 0.01));
}

TEST(AdamW, TwoStepsMatchHandRolledUpdate) {
  AdamWSettings opt;
  opt.lr = 0.05;
  opt.weight_decay = 0.1;
  const double g1 = 0.7, g2 = -0.2;
  double x = 1.25, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? g1 : g2;
    m = opt.beta1 * m + (1 - opt.beta1) * g;
    v = opt.beta2 * v + (1 - opt.beta2) * g * g;
    const double mh = m / (1 - std::pow(opt.beta1, t)), vh = v / (1 - std::pow(opt.beta2, t));
    x = x * (1 - opt.lr * opt.weight_decay) - opt.lr * mh / (std::sqrt(vh) + opt.eps);
  }
  Vectord p = Vectord::Constant(1, 1.25);
  OptimizerState s;
  adamw_step(p, Vectord::Constant(1, g1), s, opt);
  adamw_step(p, Vectord::Constant(1, g2), s, opt);
  EXPECT_NEAR(p(0), x, 1e-15);
  EXPECT_EQ(s.step, 2);
}

TEST(AdamW, RejectsMismatchedOrNonFiniteGradients) {
  Vectord p = Vectord::Zero(2);
  OptimizerState s;
  EXPECT_THROW(adamw_step(p, Vectord(Vectord::Zero(3)), s, {}), ShapeError);
  EXPECT_THROW(adamw_step(p, Vectord(Vectord::Constant(2, NAN)), s, {}), NumericError);
}

TEST(ParamViews, OrderAndRoundTrip) {
  Model m = small_model();
  const auto views = param_views(m, true);
  ASSERT_EQ(views.size(), 1u + 2u + 4u + 4u + 2u + 1u);
  EXPECT_EQ(views.front().group, "centers");
  EXPECT_EQ(views.back().group, "backbone");
  const Vectord flat = flatten(m, true);
  EXPECT_EQ(flat.size(), count_entries(*m.adapter) + 6 * 3 + 3 + 36);
  Model other = zeros_like(m);
  unflatten(other, true, flat);
  EXPECT_TRUE(same_params(other, m));
  EXPECT_THROW(unflatten(other, false, flat), ShapeError);
}

class FullModelGradient : public ::testing::TestWithParam<TensorKind> {};

TEST_P(FullModelGradient, MatchesFiniteDifferences) {
  const Index frames = GetParam() == TensorKind::VideoClip ? 2 : 1;
  Model model = small_model(true, GetParam(), frames);
  for (auto& v : param_views(model, true)) {
    std::mt19937_64 rng(v.values.size());
    v.values += random_vector(rng, v.values.size(), 0.1);
  }
  std::mt19937_64 rng(5);
  const Sample s{random_matrix(rng, 4, 6), 2};

  Model grads = zeros_like(model);
  sample_loss(model, s, &grads, true);
  auto f = [&](const Vectord& x) {
    Model m = model;
    unflatten(m, true, x);
    return sample_loss(m, s);
  };
  EXPECT_LT(grad_check(f, flatten(model, true), flatten(grads, true), 1e-5).max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(AllKinds, FullModelGradient,
                         ::testing::Values(TensorKind::VitTokens, TensorKind::CnnMap, TensorKind::VideoClip),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(SampleLoss, FrozenBackboneReceivesNoGradient) {
  Model model = small_model();
  std::mt19937_64 rng(6);
  Model grads = zeros_like(model);
  sample_loss(model, {random_matrix(rng, 4, 6), 0}, &grads, false);
  EXPECT_TRUE(grads.backbone.projection.isZero(0.0));
  EXPECT_FALSE(grads.head.weight.isZero(0.0));
}

TEST(RunFinetune, LinearProbeFreezesBackbone) {
  const Model start = small_model();
  const auto r = run_finetune(start, gen_task(small_task()), short_plan(FineTuneMode::LP, 3));
  EXPECT_EQ(r.model.backbone.projection, start.backbone.projection);
  EXPECT_NE(r.model.head.weight, start.head.weight);
  EXPECT_NE(r.model.adapter->w1, start.adapter->w1);
}

TEST(RunFinetune, FullFinetuneMovesBackbone) {
  const Model start = small_model();
  const auto r = run_finetune(start, gen_task(small_task()), short_plan(FineTuneMode::FT, 2));
  EXPECT_NE(r.model.backbone.projection, start.backbone.projection);
}

TEST(RunFinetune, SftWithoutSecondStageEqualsLinearProbe) {
  const auto data = gen_task(small_task());
  const auto lp = run_finetune(small_model(), data, short_plan(FineTuneMode::LP, 3));
  const auto sft = run_finetune(small_model(), data, short_plan(FineTuneMode::SFT, 3, 0));
  EXPECT_TRUE(same_params(lp.model, sft.model));
  ASSERT_EQ(sft.metrics.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(sft.metrics[i].train_loss, lp.metrics[i].train_loss);
}

TEST(RunFinetune, SftIsLinearProbeThenFreshFullFinetune) {
  const auto data = gen_task(small_task());
  const auto sft = run_finetune(small_model(), data, short_plan(FineTuneMode::SFT, 2, 3));
  const auto lp = run_finetune(small_model(), data, short_plan(FineTuneMode::LP, 2));
  // Stage two numbers its epochs 3..5, so a standalone FT run with seed + 2 sees the same shuffles.
  TrainPlan ft = short_plan(FineTuneMode::FT, 3);
  ft.seed += 2;
  const auto two_step = run_finetune(lp.model, data, ft);
  EXPECT_TRUE(same_params(sft.model, two_step.model));

  ASSERT_EQ(sft.metrics.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(sft.metrics[i].epoch, int(i) + 1);
    EXPECT_EQ(sft.metrics[i].stage, i < 2 ? 1 : 2);
  }
}

TEST(RunFinetune, StageTwoLearningRateOverride) {
  const auto data = gen_task(small_task());
  TrainPlan plan = short_plan(FineTuneMode::SFT, 1, 1);
  const auto base = run_finetune(small_model(), data, plan);
  plan.stage2_lr = 1e-9;
  const auto slow = run_finetune(small_model(), data, plan);
  const auto lp = run_finetune(small_model(), data, short_plan(FineTuneMode::LP, 1));
  EXPECT_LT((slow.model.backbone.projection - lp.model.backbone.projection).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_GT((base.model.backbone.projection - lp.model.backbone.projection).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(RunFinetune, Deterministic) {
  const auto data = gen_task(small_task());
  const auto a = run_finetune(small_model(), data, short_plan(FineTuneMode::SFT, 2, 2));
  const auto b = run_finetune(small_model(), data, short_plan(FineTuneMode::SFT, 2, 2));
  EXPECT_TRUE(same_params(a.model, b.model));
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(a.metrics[i].train_loss, b.metrics[i].train_loss);
    EXPECT_EQ(a.metrics[i].val_ood_acc, b.metrics[i].val_ood_acc);
  }
}

TEST(RunFinetune, FirstEpochLossNearChance) {
  for (FineTuneMode mode : {FineTuneMode::LP, FineTuneMode::FT}) {
    const auto r = run_finetune(small_model(), gen_task(small_task()), short_plan(mode, 1));
    EXPECT_LE(r.metrics[0].train_loss, std::log(3.0) + 0.5);
    EXPECT_GT(r.metrics[0].train_loss, 0.0);
  }
}

TEST(RunFinetune, HeadOnlyModelTrains) {
  const auto data = gen_task(small_task());
  const auto r = run_finetune(small_model(false), data, short_plan(FineTuneMode::LP, 15));
  EXPECT_LT(r.metrics.back().train_loss, r.metrics.front().train_loss);
}

TEST(RunFinetune, Errors) {
  auto data = gen_task(small_task());
  TrainPlan bad = short_plan(FineTuneMode::LP, 1);
  bad.batch_size = 0;
  EXPECT_THROW(run_finetune(small_model(), data, bad), ArgumentError);
  bad = short_plan(FineTuneMode::SFT, 0, 1);
  EXPECT_THROW(run_finetune(small_model(), data, bad), ArgumentError);
  bad = short_plan(FineTuneMode::LP, 1);
  bad.optimizer.lr = 0.0;
  EXPECT_THROW(run_finetune(small_model(), data, bad), ArgumentError);
  data.train.clear();
  EXPECT_THROW(run_finetune(small_model(), data, short_plan(FineTuneMode::LP, 1)), ArgumentError);
  EXPECT_THROW(parse_mode("probe"), ArgumentError);
  EXPECT_EQ(parse_mode("sft"), FineTuneMode::SFT);
}
