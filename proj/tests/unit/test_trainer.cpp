#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "support/helpers.hpp"
#include "support/oracle.hpp"

using namespace flmgrow;
using testutil::toy_config;

namespace {

TrainSchedule toy_schedule(std::int64_t steps, double lr = 2e-3) {
  TrainSchedule s;
  s.lr_vector_begin = s.lr_matrix_begin = lr;
  s.lr_vector_end = s.lr_matrix_end = lr / 10;
  s.warmup_steps = 0;
  s.seq_len = 32;
  s.batch_tokens = 64;
  s.total_tokens = steps * 64;
  return s;
}

std::vector<TokenId> pattern_corpus(std::size_t n) {
  const std::string unit = "abcabdabe ";
  std::string text;
  while (text.size() < n) text += unit;
  text.resize(n);
  return tokenize_bytes(text);
}

std::vector<TrainSequence> batch_of(const std::vector<std::vector<TokenId>>& seqs) {
  std::vector<TrainSequence> out;
  for (const auto& s : seqs) out.push_back(TrainSequence{s, std::nullopt});
  return out;
}

}  // namespace

TEST(Classify, MatrixAndVectorGroups) {
  EXPECT_EQ(classify_param("layers.3.attn_q"), ParamGroup::kMatrix);
  EXPECT_EQ(classify_param("layers.0.ffn_down"), ParamGroup::kMatrix);
  EXPECT_EQ(classify_param("layers.0.norm_attn_gain"), ParamGroup::kVector);
  EXPECT_EQ(classify_param("embedding"), ParamGroup::kVector);
  EXPECT_EQ(classify_param("lm_head"), ParamGroup::kVector);
  EXPECT_EQ(classify_param("final_ln_bias"), ParamGroup::kVector);
}

TEST(Schedule, Preset102BValues) {
  const auto s = stage_preset("102B").schedule;
  EXPECT_EQ(s.total_steps(), 54546);
  EXPECT_EQ(lr_at(2000, s, ParamGroup::kVector), 2.740e-5);
  EXPECT_EQ(lr_at(2000, s, ParamGroup::kMatrix), 2.191e-5);
  EXPECT_EQ(lr_at(54546, s, ParamGroup::kVector), 1.370e-6);
  EXPECT_EQ(lr_at(54546, s, ParamGroup::kMatrix), 1.096e-6);
}

TEST(Schedule, WarmupStartsAtZeroAndIsLinear) {
  const auto s = stage_preset("102B").schedule;
  EXPECT_EQ(lr_at(0, s, ParamGroup::kVector), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(1000, s, ParamGroup::kVector), 2.740e-5 / 2);
  EXPECT_LT(lr_at(1999, s, ParamGroup::kVector), 2.740e-5);
}

TEST(Schedule, LinearMidpointAndCosineEnds) {
  EXPECT_DOUBLE_EQ(schedule_lr(50, 100, 0, 1.0, 0.0, ScheduleType::kLinear), 0.5);
  EXPECT_DOUBLE_EQ(schedule_lr(50, 100, 0, 1.0, 0.0, ScheduleType::kCosine), 0.5);
  EXPECT_EQ(schedule_lr(0, 100, 0, 1.5e-4, 2.781e-5, ScheduleType::kCosine), 1.5e-4);
  EXPECT_EQ(schedule_lr(100, 100, 0, 1.5e-4, 2.781e-5, ScheduleType::kCosine), 2.781e-5);
  EXPECT_DOUBLE_EQ(schedule_lr(25, 100, 0, 1.0, 0.0, ScheduleType::kCosine), 0.5 * (1 + std::cos(M_PI / 4)));
}

TEST(Schedule, BeyondEndIsContractError) {
  EXPECT_THROW(schedule_lr(101, 100, 0, 1.0, 0.0, ScheduleType::kLinear), ContractError);
  EXPECT_THROW(schedule_lr(-1, 100, 0, 1.0, 0.0, ScheduleType::kLinear), ContractError);
}

TEST(TrainStep, InitialLossNearLogVocab) {
  auto ck = make_checkpoint<float>(toy_config(), 1);
  const auto m = train_step_at(ck, batch_of(testutil::probes(2, 32, 2)), 0.0, 0.0);
  EXPECT_NEAR(m.loss, std::log(258.0), 0.05 * std::log(258.0));
}

TEST(TrainStep, ZeroLearningRateLeavesParamsUnchanged) {
  auto ck = make_checkpoint<float>(toy_config(), 3);
  const auto before = ck.params;
  train_step_at(ck, batch_of(testutil::probes(2, 32, 4)), 0.0, 0.0);
  EXPECT_TRUE(bit_equal(before, ck.params));
  EXPECT_EQ(ck.step, 1);
  EXPECT_EQ(ck.optimizer.step, 1);
}

TEST(TrainStep, ZeroMatrixRateFreezesOnlyMatrices) {
  auto ck = make_checkpoint<float>(toy_config(), 5);
  const auto before = ck.params;
  train_step_at(ck, batch_of(testutil::probes(2, 32, 6)), 1e-3, 0.0);
  for_each_param_pair(before, ck.params, [](const std::string& path, const Tensor<float>& a, const Tensor<float>& b) {
    if (classify_param(path) == ParamGroup::kMatrix) {
      EXPECT_TRUE(a.bit_equal(b)) << path;
    } else {
      EXPECT_FALSE(a.bit_equal(b)) << path;
    }
  });
}

TEST(TrainStep, LossFallsOnRepeatingPattern) {
  auto ck = make_checkpoint<float>(toy_config(), 7);
  const auto corpus = pattern_corpus(4096);
  const auto s = toy_schedule(10);
  const auto log = train_run(ck, corpus, s, {});
  ASSERT_EQ(log.size(), 10u);
  EXPECT_LT(log.back().loss, log.front().loss);
  EXPECT_EQ(ck.consumed_tokens, 10 * 64);
  for (std::size_t i = 0; i < log.size(); ++i) EXPECT_EQ(log[i].tokens, static_cast<std::int64_t>(i + 1) * 64);
}

TEST(TrainStep, NonFiniteLossIsNumericalError) {
  auto ck = make_checkpoint<float>(toy_config(), 8);
  ck.params.lm_head[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train_step_at(ck, batch_of(testutil::probes(1, 16, 9)), 1e-3, 1e-3), NumericalError);
}

TEST(TrainRun, RepeatedRunsAreBitIdentical) {
  const auto corpus = pattern_corpus(8192);
  const auto s = toy_schedule(6);
  auto a = make_checkpoint<float>(toy_config(), 12);
  auto b = make_checkpoint<float>(toy_config(), 12);
  const auto la = train_run(a, corpus, s, {});
  const auto lb = train_run(b, corpus, s, {});
  EXPECT_TRUE(bit_equal(a, b));
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(metrics_json(la[i]).dump(), metrics_json(lb[i]).dump());
}

TEST(TrainRun, ResumeMatchesUninterrupted) {
  testutil::TempDir dir("resume");
  const auto corpus = pattern_corpus(8192);
  const auto s = toy_schedule(8);
  auto full = make_checkpoint<float>(toy_config(), 13);
  train_run(full, corpus, s, {});

  auto part = make_checkpoint<float>(toy_config(), 13);
  train_run(part, corpus, s, StopCondition{4, std::nullopt});
  EXPECT_EQ(part.step, 4);
  save_checkpoint(part, dir / "mid");
  auto resumed = load_checkpoint<float>(dir / "mid");
  train_run(resumed, corpus, s, {});
  EXPECT_TRUE(bit_equal(full, resumed));
}

TEST(TrainRun, StopsAtTokenBudget) {
  auto ck = make_checkpoint<float>(toy_config(), 14);
  const auto log = train_run(ck, pattern_corpus(4096), toy_schedule(10), StopCondition{std::nullopt, 192});
  EXPECT_EQ(log.size(), 3u);
}

TEST(TrainRun, PeriodicCheckpoints) {
  testutil::TempDir dir("periodic");
  auto ck = make_checkpoint<float>(toy_config(), 15);
  TrainRunOptions<float> opt;
  opt.checkpoint_every = 2;
  opt.checkpoint_dir = dir.path();
  train_run(ck, pattern_corpus(4096), toy_schedule(4), {}, opt);
  EXPECT_TRUE(std::filesystem::exists(dir / "step-2" / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "step-4" / "manifest.json"));
  EXPECT_FALSE(std::filesystem::exists(dir / "step-3"));
}

TEST(TrainRun, SeqLenAboveModelLimitIsConfigError) {
  auto ck = make_checkpoint<float>(toy_config(), 16);
  auto s = toy_schedule(4);
  s.seq_len = 128;
  s.batch_tokens = 128;
  EXPECT_THROW(train_run(ck, pattern_corpus(4096), s, {}), ConfigError);
}

TEST(Batcher, DependsOnlyOnSeedAndStep) {
  const auto corpus = pattern_corpus(4096);
  CorpusBatcher a(&corpus, 32, 2, 5), b(&corpus, 32, 2, 5);
  for (std::int64_t step : {0, 7, 3, 100}) {
    const auto x = a.batch(step), y = b.batch(step);
    ASSERT_EQ(x.size(), 2u);
    EXPECT_EQ(x[0].tokens, y[0].tokens);
    EXPECT_EQ(x[1].tokens, y[1].tokens);
  }
}

TEST(GrowthContinuity, FirstPostGrowthLossMatchesPreGrowthModel) {
  const auto corpus = pattern_corpus(8192);
  auto pre = make_checkpoint<float>(toy_config(), 17);
  train_run(pre, corpus, toy_schedule(5), {});
  GrowthPlan plan;
  plan.target = testutil::widened(toy_config(6), 96, 256);
  plan.transition_steps = 4;
  plan.seed = 18;
  auto post = grow(pre, plan, testutil::probes(4, 32, 19)).checkpoint;
  EXPECT_EQ(post.schedule_origin, pre.step);

  CorpusBatcher batcher(&corpus, 32, 2, post.seed);
  const auto batch = batcher.batch(post.step);
  auto probe = pre;
  const auto before = train_step_at(probe, batch, 0.0, 0.0);
  const auto after = train_step(post, batch, toy_schedule(5));
  EXPECT_NEAR(after.loss, before.loss, 1e-5 * before.loss);
  EXPECT_EQ(after.mask, 0.0);
}

TEST(GrowthContinuity, MaskAdvancesEachStep) {
  const auto corpus = pattern_corpus(8192);
  auto ck = make_checkpoint<float>(toy_config(), 20);
  GrowthPlan plan;
  plan.target = testutil::widened(toy_config(), 96, 256);
  plan.transition_steps = 4;
  ck = grow(ck, plan, {}).checkpoint;
  const auto log = train_run(ck, corpus, toy_schedule(6), {});
  const std::vector<double> want{0.0, 0.25, 0.5, 0.75, 1.0, 1.0};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(log[i].mask, want[i]);
  EXPECT_EQ(ck.mask->mask, 1.0);
}

TEST(GrowthContinuity, ScheduleRestartsAtGrowth) {
  const auto corpus = pattern_corpus(8192);
  auto ck = make_checkpoint<float>(toy_config(), 21);
  auto s = toy_schedule(4);
  s.warmup_steps = 2;
  train_run(ck, corpus, s, {});
  GrowthPlan plan;
  plan.target = testutil::widened(toy_config(), 96, 256);
  plan.transition_steps = 2;
  ck = grow(ck, plan, {}).checkpoint;
  const auto log = train_run(ck, corpus, s, {});
  ASSERT_EQ(log.size(), 4u);
  EXPECT_EQ(log[0].step, 4);
  EXPECT_EQ(log[0].lr_vector, 0.0);
  EXPECT_EQ(log[2].lr_vector, s.lr_vector_begin);
}

TEST(Sft, PresetDefaults) {
  const SftPreset p = sft_preset();
  EXPECT_EQ(p.epochs, 4);
  EXPECT_EQ(p.batch_samples, 128);
  EXPECT_EQ(p.lr_begin, 2.7e-5);
  EXPECT_EQ(p.lr_end, 1e-9);
  EXPECT_EQ(p.schedule_type, ScheduleType::kLinear);
}

TEST(Sft, EncodedMaskCoversResponseAndEos) {
  const auto e = encode_sample(InstructSample{"x", "hi", "ok", std::nullopt});
  EXPECT_EQ(e.tokens, (std::vector<TokenId>{kBos, 'h', 'i', 'o', 'k', kEos}));
  EXPECT_EQ(e.loss_mask, (std::vector<bool>{false, false, true, true, true}));
}

TEST(Sft, OverfitsSingleSample) {
  auto ck = make_checkpoint<float>(toy_config(), 22);
  const InstructSample s{"one", "Q: colour? A:", " blue", std::nullopt};
  SftPreset p;
  p.epochs = 200;
  p.batch_samples = 1;
  p.lr_begin = 3e-3;
  p.lr_end = 3e-4;
  SftOptions<float> opt;
  std::int64_t n = 0;
  opt.on_step = [&](const StepMetrics&) { ++n; };
  const auto r = sft_run(ck, {s}, p, opt);
  EXPECT_EQ(r.steps, 200);
  EXPECT_EQ(n, 200);
  const auto e = encode_sample(s);
  const double nll = lm_loss(ck.params, ck.config, e.tokens, &e.loss_mask);
  EXPECT_LT(nll, 0.1);
}

TEST(Sft, SkipsOverlengthAndWritesEpochCheckpoints) {
  testutil::TempDir dir("sft");
  auto ck = make_checkpoint<float>(toy_config(), 23);
  std::vector<InstructSample> samples{{"a", "p", "short", std::nullopt},
                                      {"b", std::string(80, 'x'), "long", std::nullopt},
                                      {"c", "q", "also short", std::nullopt}};
  SftPreset p;
  p.epochs = 2;
  p.batch_samples = 2;
  SftOptions<float> opt;
  opt.checkpoint_dir = dir.path();
  const auto r = sft_run(ck, samples, p, opt);
  EXPECT_EQ(r.eligible, 2);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0].first, "b");
  EXPECT_EQ(r.steps, 2);
  EXPECT_EQ(r.epoch_mean_loss.size(), 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch-1" / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch-2" / "manifest.json"));
}

TEST(Sft, LearningRateDecaysLinearlyToEnd) {
  auto ck = make_checkpoint<float>(toy_config(), 24);
  std::vector<InstructSample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back({std::to_string(i), "p", "r" + std::to_string(i), std::nullopt});
  SftPreset p;
  p.epochs = 2;
  p.batch_samples = 2;
  const auto r = sft_run(ck, samples, p);
  ASSERT_EQ(r.metrics.size(), 4u);
  EXPECT_EQ(r.metrics[0].lr_vector, 2.7e-5);
  EXPECT_DOUBLE_EQ(r.metrics[2].lr_matrix, 0.5 * 2.7e-5 + 0.5 * 1e-9);
}

TEST(Sft, PromptOnlyAndEmptyInputsAreErrors) {
  auto ck = make_checkpoint<float>(toy_config(), 25);
  EXPECT_THROW(sft_run(ck, {}), ContractError);
  EXPECT_THROW(encode_sample(InstructSample{"x", "prompt", "", std::nullopt}), InputError);
  std::vector<InstructSample> too_long{{"z", std::string(100, 'x'), "y", std::nullopt}};
  EXPECT_THROW(sft_run(ck, too_long), ContractError);
}
