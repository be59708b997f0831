#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "safemerge/data.hpp"

using namespace safemerge;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("safemerge_data_test_" + name);
}

TEST(Jsonl, RoundTrip) {
  QADataset ds;
  ds.pairs.push_back({{3, 4, 5}, {8, 0}, QAKind::kExpert, "mod-arith"});
  ds.pairs.push_back({{4, 9, 9}, {1, 0}, QAKind::kSafety, "toy-forbidden"});
  fs::path p = temp_file("roundtrip.jsonl");
  save_qa_jsonl(ds, p);
  QADataset back = load_qa_jsonl(p);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.pairs[0].question, ds.pairs[0].question);
  EXPECT_EQ(back.pairs[0].answer, ds.pairs[0].answer);
  EXPECT_EQ(back.pairs[0].kind, QAKind::kExpert);
  EXPECT_EQ(back.pairs[1].kind, QAKind::kSafety);
  EXPECT_EQ(back.pairs[1].domain, "toy-forbidden");
  fs::remove(p);
}

TEST(Jsonl, MalformedLineReportsLineNumber) {
  fs::path p = temp_file("malformed.jsonl");
  {
    std::ofstream out(p);
    out << R"({"question":[1],"answer":[2],"kind":"expert","domain":"d"})" << "\n";
    out << "{not json\n";
  }
  try {
    load_qa_jsonl(p);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  fs::remove(p);
}

TEST(Jsonl, MissingFieldRejected) {
  fs::path p = temp_file("missing.jsonl");
  {
    std::ofstream out(p);
    out << R"({"question":[1],"kind":"expert","domain":"d"})" << "\n";
  }
  EXPECT_THROW(load_qa_jsonl(p), ValidationError);
  fs::remove(p);
}

TEST(Jsonl, TokenRangeEnforcedWhenRequested) {
  fs::path p = temp_file("range.jsonl");
  {
    std::ofstream out(p);
    out << R"({"question":[70],"answer":[2],"kind":"expert","domain":"d"})" << "\n";
  }
  EXPECT_THROW(load_qa_jsonl(p, 64), ValidationError);
  EXPECT_NO_THROW(load_qa_jsonl(p));  // unchecked when max_token < 0
  fs::remove(p);
}

TEST(Jsonl, MissingFileThrowsIoError) {
  EXPECT_THROW(load_qa_jsonl("/nonexistent/nope.jsonl"), IoError);
}

TEST(Encoding, ModArithQuestionLayout) {
  // payload(x) = 8 + x; question is "a <op> b"
  EXPECT_EQ(encode_mod_arith_question(3, 5), (TokenSeq{11, tokens::kOp, 13}));
  EXPECT_EQ(encode_residue_answer(0), (TokenSeq{8, tokens::kEos}));
}

TEST(ExpertData, CountDistinctCorrectAndInRange) {
  ModArithSpec spec;
  QADataset ds = gen_toy_expert_data(spec, 1000, 7);
  EXPECT_EQ(ds.size(), 1000u);
  std::set<TokenSeq> qs;
  for (const QAPair& p : ds.pairs) {
    ASSERT_EQ(p.question.size(), 3u);
    int a = p.question[0] - 8;
    int b = p.question[2] - 8;
    ASSERT_GE(a, spec.operand_min);
    ASSERT_LT(a, spec.operand_max);
    ASSERT_GE(b, spec.operand_min);
    ASSERT_LT(b, spec.operand_max);
    EXPECT_EQ(p.question[1], tokens::kOp);
    EXPECT_EQ(p.answer, encode_residue_answer((a + b) % spec.modulus));
    EXPECT_EQ(p.kind, QAKind::kExpert);
    qs.insert(p.question);
  }
  EXPECT_EQ(qs.size(), 1000u);  // all distinct
}

TEST(ExpertData, DeterministicPerSeed) {
  ModArithSpec spec;
  QADataset a = gen_toy_expert_data(spec, 100, 3);
  QADataset b = gen_toy_expert_data(spec, 100, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.pairs[i].question, b.pairs[i].question);
  }
  QADataset c = gen_toy_expert_data(spec, 100, 4);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.pairs[i].question != c.pairs[i].question) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
}

TEST(ExpertData, RejectsImpossibleK) {
  ModArithSpec spec;
  spec.modulus = 3;
  spec.operand_min = 0;
  spec.operand_max = 3;  // only 9 distinct questions
  EXPECT_THROW(gen_toy_expert_data(spec, 10, 0), ValidationError);
  EXPECT_NO_THROW(gen_toy_expert_data(spec, 9, 0));
}

TEST(SafetyData, AlignedAndMisalignedShareQuestions) {
  auto [aligned, misaligned] = gen_toy_safety_data(500, 11);
  ASSERT_EQ(aligned.size(), 500u);
  ASSERT_EQ(misaligned.size(), 500u);
  std::set<TokenSeq> qs;
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    EXPECT_EQ(aligned.pairs[i].question, misaligned.pairs[i].question);
    EXPECT_EQ(aligned.pairs[i].question[0], tokens::kUnsafe);
    EXPECT_EQ(aligned.pairs[i].answer[0], tokens::kRefusal);
    EXPECT_EQ(misaligned.pairs[i].answer[0], tokens::kComply);
    EXPECT_NE(aligned.pairs[i].answer[0], misaligned.pairs[i].answer[0]);
    EXPECT_EQ(aligned.pairs[i].kind, QAKind::kSafety);
    qs.insert(aligned.pairs[i].question);
  }
  EXPECT_EQ(qs.size(), 500u);
}

TEST(SafetyData, DeterministicPerSeed) {
  auto [a1, m1] = gen_toy_safety_data(50, 9);
  auto [a2, m2] = gen_toy_safety_data(50, 9);
  for (std::size_t i = 0; i < a1.size(); ++i) {
    EXPECT_EQ(a1.pairs[i].question, a2.pairs[i].question);
    EXPECT_EQ(m1.pairs[i].answer, m2.pairs[i].answer);
  }
}

TEST(SafetyData, RejectsBadArgs) {
  EXPECT_THROW(gen_toy_safety_data(0, 0), ValidationError);
  EXPECT_THROW(gen_toy_safety_data(10, 0, 5, 5), ValidationError);
}

TEST(Split, PartitionsWithoutLossOrDuplication) {
  ModArithSpec spec;
  QADataset ds = gen_toy_expert_data(spec, 200, 0);
  auto [tr, ev] = split_train_eval(ds, 0.1, 42);
  EXPECT_EQ(ev.size(), 20u);
  EXPECT_EQ(tr.size(), 180u);
  std::set<TokenSeq> all;
  for (const auto& p : tr.pairs) all.insert(p.question);
  for (const auto& p : ev.pairs) all.insert(p.question);
  EXPECT_EQ(all.size(), 200u);
}

TEST(Split, DeterministicAndSeedSensitive) {
  ModArithSpec spec;
  QADataset ds = gen_toy_expert_data(spec, 100, 0);
  auto [tr1, ev1] = split_train_eval(ds, 0.2, 1);
  auto [tr2, ev2] = split_train_eval(ds, 0.2, 1);
  ASSERT_EQ(ev1.size(), ev2.size());
  for (std::size_t i = 0; i < ev1.size(); ++i) {
    EXPECT_EQ(ev1.pairs[i].question, ev2.pairs[i].question);
  }
  auto [tr3, ev3] = split_train_eval(ds, 0.2, 2);
  bool diff = false;
  for (std::size_t i = 0; i < ev1.size(); ++i) {
    if (ev1.pairs[i].question != ev3.pairs[i].question) diff = true;
  }
  EXPECT_TRUE(diff);
}

TEST(Split, ZeroFractionYieldsEmptyEval) {
  ModArithSpec spec;
  QADataset ds = gen_toy_expert_data(spec, 10, 0);
  auto [tr, ev] = split_train_eval(ds, 0.0, 0);
  EXPECT_EQ(tr.size(), 10u);
  EXPECT_TRUE(ev.empty());
  EXPECT_THROW(split_train_eval(ds, 1.0, 0), ValidationError);
}

}  // namespace
