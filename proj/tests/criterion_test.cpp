#include <cmath>

#include <gtest/gtest.h>

#include "safemerge/criterion.hpp"
#include "safemerge/data.hpp"
#include "safemerge/rng.hpp"
#include "safemerge/toy_lm.hpp"

using namespace safemerge;

namespace {

ToyLMConfig tiny_cfg() {
  ToyLMConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq = 8;
  return cfg;
}

Checkpoint uniform_logits_model(const ToyLMConfig& cfg) {
  Checkpoint ckpt = init_model(cfg, 0);
  auto& head = ckpt.tensors.at("head");
  std::fill(head.data.begin(), head.data.end(), 0.0f);
  return ckpt;
}

TEST(DatasetLoss, MatchesMeanOfPerPairCeLoss) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = init_model(cfg, 1);
  QADataset ds;
  ds.pairs.push_back({{1, 2}, {3, 0}, QAKind::kExpert, "t"});
  ds.pairs.push_back({{4, 5, 6}, {7, 0}, QAKind::kExpert, "t"});
  ds.pairs.push_back({{9}, {10, 11, 0}, QAKind::kExpert, "t"});
  double expected = 0.0;
  for (const auto& p : ds.pairs) expected += ce_loss(ckpt, cfg, p.question, p.answer);
  expected /= 3.0;
  EXPECT_NEAR(dataset_loss(ckpt, cfg, ds), expected, 1e-12);
}

TEST(DatasetLoss, UniformModelGivesLogV) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = uniform_logits_model(cfg);
  QADataset ds;
  ds.pairs.push_back({{1, 2}, {3, 0}, QAKind::kExpert, "t"});
  ds.pairs.push_back({{4, 5}, {7, 0}, QAKind::kExpert, "t"});
  EXPECT_NEAR(dataset_loss(ckpt, cfg, ds), std::log(16.0), 1e-4);
}

TEST(DatasetLoss, ThreadCountDoesNotChangeResult) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = init_model(cfg, 2);
  QADataset ds;
  for (int i = 0; i < 20; ++i) {
    ds.pairs.push_back({{1, (i % 10) + 3}, {5, 0}, QAKind::kExpert, "t"});
  }
  int saved = eval_threads();
  eval_threads() = 1;
  double serial = dataset_loss(ckpt, cfg, ds);
  eval_threads() = 7;
  double parallel = dataset_loss(ckpt, cfg, ds);
  eval_threads() = saved;
  EXPECT_EQ(serial, parallel);
}

TEST(DatasetLoss, EmptyDatasetRejected) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = init_model(cfg, 0);
  EXPECT_THROW(dataset_loss(ckpt, cfg, QADataset{}), ValidationError);
}

TEST(MergeLoss, CombinesComponentsLinearly) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = init_model(cfg, 3);
  QADataset ds_s, ds_e;
  ds_s.pairs.push_back({{4, 1}, {1, 0}, QAKind::kSafety, "s"});
  ds_e.pairs.push_back({{9, 3, 10}, {11, 0}, QAKind::kExpert, "e"});
  LossReport r = merge_loss(ckpt, cfg, ds_s, ds_e, 0.3);
  EXPECT_NEAR(r.l_safety, dataset_loss(ckpt, cfg, ds_s), 1e-12);
  EXPECT_NEAR(r.l_expert, dataset_loss(ckpt, cfg, ds_e), 1e-12);
  EXPECT_NEAR(r.l_merge, r.l_safety + 0.3 * r.l_expert, 1e-12);
  EXPECT_EQ(r.n_safety, 1u);
  EXPECT_EQ(r.n_expert, 1u);
}

TEST(MergeLoss, AlphaZeroIsExactlySafetyLoss) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = init_model(cfg, 4);
  QADataset ds_s, ds_e;
  ds_s.pairs.push_back({{4, 1}, {1, 0}, QAKind::kSafety, "s"});
  ds_e.pairs.push_back({{9, 3, 10}, {11, 0}, QAKind::kExpert, "e"});
  LossReport r = merge_loss(ckpt, cfg, ds_s, ds_e, 0.0);
  EXPECT_EQ(r.l_merge, r.l_safety);  // bitwise, no 0*x rounding
}

TEST(MergeLoss, NegativeAlphaRejected) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = init_model(cfg, 0);
  QADataset ds;
  ds.pairs.push_back({{1}, {2, 0}, QAKind::kExpert, "t"});
  EXPECT_THROW(merge_loss(ckpt, cfg, ds, ds, -0.1), ValidationError);
}

TEST(RefusalRate, JudgeCountsFirstTokenOnly) {
  RefusalJudge judge = first_token_refusal_judge();
  EXPECT_TRUE(judge({tokens::kRefusal, 5, 0}));
  EXPECT_FALSE(judge({5, tokens::kRefusal, 0}));
  EXPECT_FALSE(judge({}));
}

TEST(RefusalRate, UniformModelNeverRefuses) {
  // Ties resolve to token 0 (eos), never the refusal token.
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = uniform_logits_model(cfg);
  std::vector<TokenSeq> prompts = {{4, 8, 9}, {4, 10, 11}};
  EXPECT_EQ(refusal_rate(ckpt, cfg, prompts, first_token_refusal_judge()), 0.0);
}

TEST(RefusalRate, CustomJudgeIsHonored) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = uniform_logits_model(cfg);
  std::vector<TokenSeq> prompts = {{4, 8, 9}, {4, 10, 11}, {4, 12, 13}};
  RefusalJudge always = [](const TokenSeq&) { return true; };
  EXPECT_EQ(refusal_rate(ckpt, cfg, prompts, always), 1.0);
}

TEST(RefusalRate, EmptyPromptsRejected) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = init_model(cfg, 0);
  EXPECT_THROW(refusal_rate(ckpt, cfg, {}, first_token_refusal_judge()), ValidationError);
}

TEST(McAccuracy, TrainedModelScoresPerfect) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = init_model(cfg, 5);
  QADataset ds;
  ds.pairs.push_back({{3, 7}, {11, 0}, QAKind::kExpert, "t"});
  Checkpoint trained = train(ckpt, cfg, ds, {3e-3, 400, 1}, 0);
  std::vector<McItem> items;
  McItem item;
  item.question = {3, 7};
  item.candidates = {{10, 0}, {11, 0}, {12, 0}};
  item.correct_index = 1;
  items.push_back(item);
  EXPECT_EQ(mc_accuracy(trained, cfg, items), 1.0);
}

TEST(McAccuracy, ExactTiesPickLowestIndex) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = uniform_logits_model(cfg);
  // all candidates equally likely -> predicted index is always 0
  McItem tie0, tie1;
  tie0.question = {1, 2};
  tie0.candidates = {{5, 0}, {6, 0}};
  tie0.correct_index = 0;
  tie1 = tie0;
  tie1.correct_index = 1;
  EXPECT_EQ(mc_accuracy(ckpt, cfg, {tie0}), 1.0);
  EXPECT_EQ(mc_accuracy(ckpt, cfg, {tie1}), 0.0);
}

// Under a uniform-logits model with randomized candidate orderings of varying
// length the longer candidate has lower summed likelihood, so use equal-length
// candidates and randomized correct indices: expected accuracy is hit only
// when correct_index == 0, i.e. 1/n_candidates on average.
TEST(McAccuracy, UniformModelMatchesChanceOnRandomizedIndices) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = uniform_logits_model(cfg);
  Rng rng(2024);
  std::vector<McItem> items;
  int hits_expected = 0;
  for (int i = 0; i < 400; ++i) {
    McItem item;
    item.question = {static_cast<int>(rng.below(16)), static_cast<int>(rng.below(16))};
    item.candidates = {{8, 0}, {9, 0}, {10, 0}, {11, 0}};
    item.correct_index = rng.below(4);
    if (item.correct_index == 0) ++hits_expected;
    items.push_back(item);
  }
  double acc = mc_accuracy(ckpt, cfg, items);
  EXPECT_NEAR(acc, static_cast<double>(hits_expected) / 400.0, 1e-12);
  EXPECT_NEAR(acc, 0.25, 0.06);  // binomial fluctuation bound
}

TEST(McAccuracy, ValidationErrors) {
  ToyLMConfig cfg = tiny_cfg();
  Checkpoint ckpt = init_model(cfg, 0);
  EXPECT_THROW(mc_accuracy(ckpt, cfg, {}), ValidationError);
  McItem one;
  one.question = {1};
  one.candidates = {{2, 0}};
  EXPECT_THROW(mc_accuracy(ckpt, cfg, {one}), ValidationError);
  McItem bad;
  bad.question = {1};
  bad.candidates = {{2, 0}, {3, 0}};
  bad.correct_index = 2;
  EXPECT_THROW(mc_accuracy(ckpt, cfg, {bad}), ValidationError);
}

}  // namespace
