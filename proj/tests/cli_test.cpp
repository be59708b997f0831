// End-to-end tests for the command-line binary: exit codes, output files,
// determinism, and report schemas. Each test runs inside a fresh temp dir.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "safemerge/data.hpp"
#include "safemerge/safetensors.hpp"
#include "safemerge/toy_lm.hpp"

using namespace safemerge;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string stdout_text;
};

RunResult run_cli(const std::string& args, const fs::path& cwd) {
  fs::path out = cwd / "stdout.txt";
  std::string cmd = "cd '" + cwd.string() + "' && '" + SAFEMERGE_CLI_PATH + "' " + args +
                    " > '" + out.string() + "' 2> '" + (cwd / "stderr.txt").string() + "'";
  int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::ostringstream buf;
  buf << in.rdbuf();
  r.stdout_text = buf.str();
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("safemerge_cli_" + std::string(::testing::UnitTest::GetInstance()
                                               ->current_test_info()
                                               ->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // A small but trainable configuration to keep CLI runs fast.
  static constexpr const char* kTrainFlags =
      "--d-model 16 --n-layers 1 --n-heads 2 --base-steps 120 --expert-steps 200 --batch 16";

  void gen_small_data() {
    RunResult r = run_cli("--k 60 --seed 0 gen-data", dir_);
    ASSERT_EQ(r.exit_code, 0);
  }

  void train_small_models() {
    gen_small_data();
    RunResult r = run_cli(std::string("--seed 0 train-toy ") + kTrainFlags, dir_);
    ASSERT_EQ(r.exit_code, 0) << read(dir_ / "stderr.txt");
  }

  std::string read(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  }

  fs::path dir_;
};

TEST_F(CliTest, NoSubcommandFailsWithValidationCode) {
  RunResult r = run_cli("", dir_);
  EXPECT_EQ(r.exit_code, 2);
}

TEST_F(CliTest, HelpSucceeds) {
  RunResult r = run_cli("--help", dir_);
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.stdout_text.find("gen-data"), std::string::npos);
}

TEST_F(CliTest, GenDataWritesFourFilesWithConfiguredSizes) {
  RunResult r = run_cli("--k 200 --seed 1 gen-data", dir_);
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_EQ(load_qa_jsonl(dir_ / "safety_aligned.jsonl").size(), 200u);
  EXPECT_EQ(load_qa_jsonl(dir_ / "safety_misaligned.jsonl").size(), 200u);
  EXPECT_EQ(load_qa_jsonl(dir_ / "expert.jsonl").size(), 200u);
  // held-out split: 10% of each pool
  EXPECT_EQ(load_qa_jsonl(dir_ / "eval.jsonl").size(), 40u);
}

TEST_F(CliTest, GenDataDeterministicPerSeed) {
  fs::path a = dir_ / "a", b = dir_ / "b", c = dir_ / "c";
  fs::create_directories(a);
  fs::create_directories(b);
  fs::create_directories(c);
  ASSERT_EQ(run_cli("--k 50 --seed 3 gen-data", a).exit_code, 0);
  ASSERT_EQ(run_cli("--k 50 --seed 3 gen-data", b).exit_code, 0);
  ASSERT_EQ(run_cli("--k 50 --seed 4 gen-data", c).exit_code, 0);
  EXPECT_EQ(read(a / "expert.jsonl"), read(b / "expert.jsonl"));
  EXPECT_EQ(read(a / "eval.jsonl"), read(b / "eval.jsonl"));
  EXPECT_NE(read(a / "expert.jsonl"), read(c / "expert.jsonl"));
}

TEST_F(CliTest, TrainToyProducesLoadableCheckpoints) {
  train_small_models();
  Checkpoint base = load_checkpoint(dir_ / "base.safetensors");
  Checkpoint expert = load_checkpoint(dir_ / "expert.safetensors");
  ToyLMConfig cfg = ToyLMConfig::from_metadata(base.metadata);
  EXPECT_EQ(cfg.d_model, 16);
  EXPECT_EQ(cfg.n_layers, 1);
  EXPECT_EQ(base.tensors.size(), expert.tensors.size());
  EXPECT_NE(base, expert);
}

TEST_F(CliTest, TrainToyFailsWithIoCodeWhenDataMissing) {
  RunResult r = run_cli(std::string("--seed 0 train-toy ") + kTrainFlags, dir_);
  EXPECT_EQ(r.exit_code, 3);
}

TEST_F(CliTest, MergeZeroLambdaEqualsBaseByHash) {
  train_small_models();
  std::ofstream(dir_ / "zero.json")
      << R"({"method":"task-arithmetic","lambdas":[0.0],"hyper":{},"seed":0})";
  RunResult r = run_cli(
      "merge --base base.safetensors --expert expert.safetensors --recipe zero.json "
      "--out merged.safetensors",
      dir_);
  ASSERT_EQ(r.exit_code, 0) << read(dir_ / "stderr.txt");
  Checkpoint base = load_checkpoint(dir_ / "base.safetensors");
  Checkpoint merged = load_checkpoint(dir_ / "merged.safetensors");
  EXPECT_EQ(base.tensors, merged.tensors);
}

TEST_F(CliTest, MergeSameRecipeGivesIdenticalBytes) {
  train_small_models();
  std::ofstream(dir_ / "r.json")
      << R"({"method":"dare","lambdas":[0.7],"hyper":{"drop_prob":0.4},"seed":9})";
  ASSERT_EQ(run_cli("merge --base base.safetensors --expert expert.safetensors "
                    "--recipe r.json --out m1.safetensors",
                    dir_)
                .exit_code,
            0);
  ASSERT_EQ(run_cli("merge --base base.safetensors --expert expert.safetensors "
                    "--recipe r.json --out m2.safetensors",
                    dir_)
                .exit_code,
            0);
  EXPECT_EQ(read(dir_ / "m1.safetensors"), read(dir_ / "m2.safetensors"));
}

TEST_F(CliTest, MergeSlerpWithTwoExpertsFailsValidation) {
  train_small_models();
  std::ofstream(dir_ / "s.json")
      << R"({"method":"slerp","lambdas":[0.0,0.0],"hyper":{"slerp_t":0.5},"seed":0})";
  RunResult r = run_cli(
      "merge --base base.safetensors --expert expert.safetensors --expert base.safetensors "
      "--recipe s.json",
      dir_);
  EXPECT_EQ(r.exit_code, 2);
}

TEST_F(CliTest, MergeMalformedRecipeFailsValidation) {
  train_small_models();
  std::ofstream(dir_ / "bad.json") << "{not json";
  RunResult r = run_cli(
      "merge --base base.safetensors --expert expert.safetensors --recipe bad.json", dir_);
  EXPECT_EQ(r.exit_code, 2);
}

TEST_F(CliTest, MergeMissingModelFailsWithIoCode) {
  std::ofstream(dir_ / "r.json")
      << R"({"method":"task-arithmetic","lambdas":[1.0],"hyper":{},"seed":0})";
  RunResult r = run_cli("merge --base nope.safetensors --expert nope2.safetensors "
                        "--recipe r.json",
                        dir_);
  EXPECT_EQ(r.exit_code, 3);
}

TEST_F(CliTest, OptimizeLmCocktailWithIdenticalExpertsGivesEqualWeights) {
  train_small_models();
  RunResult r = run_cli(
      "--seed 0 optimize --base base.safetensors --expert expert.safetensors "
      "--expert expert.safetensors --method task-arithmetic --strategy lm-cocktail "
      "--data expert --expert-data expert.jsonl",
      dir_);
  ASSERT_EQ(r.exit_code, 0) << read(dir_ / "stderr.txt");
  json recipe = json::parse(read(dir_ / "recipe.json"));
  ASSERT_EQ(recipe.at("lambdas").size(), 2u);
  EXPECT_NEAR(recipe.at("lambdas")[0].get<double>(), 0.5, 1e-9);
  EXPECT_NEAR(recipe.at("lambdas")[1].get<double>(), 0.5, 1e-9);
}

TEST_F(CliTest, OptimizeGridTiesWritesNineRowTable) {
  train_small_models();
  RunResult r = run_cli(
      "--seed 0 --threads 4 optimize --base base.safetensors --expert expert.safetensors "
      "--method ties --strategy grid --data expert+safety "
      "--safety-data safety_aligned.jsonl --expert-data expert.jsonl",
      dir_);
  ASSERT_EQ(r.exit_code, 0) << read(dir_ / "stderr.txt");
  std::istringstream table(read(dir_ / "grid.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(table, line)) {
    if (!line.empty()) ++rows;
  }
  EXPECT_EQ(rows, 10);  // header + 3x3 grid
  EXPECT_TRUE(fs::exists(dir_ / "recipe.json"));
  EXPECT_TRUE(fs::exists(dir_ / "merged.safetensors"));
  EXPECT_TRUE(fs::exists(dir_ / "report.json"));
}

TEST_F(CliTest, OptimizeEvommWritesHistoryAndIsDeterministic) {
  train_small_models();
  std::string cmd =
      "--seed 7 --steps 5 --threads 4 optimize --base base.safetensors "
      "--expert expert.safetensors --method task-arithmetic --strategy evomm "
      "--data expert+safety --safety-data safety_aligned.jsonl --expert-data expert.jsonl "
      "--objective-batch 16";
  ASSERT_EQ(run_cli(cmd, dir_).exit_code, 0) << read(dir_ / "stderr.txt");
  std::string recipe1 = read(dir_ / "recipe.json");
  std::string merged1 = read(dir_ / "merged.safetensors");
  std::istringstream history(read(dir_ / "history.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(history, line)) {
    if (!line.empty()) ++rows;
  }
  EXPECT_EQ(rows, 6);  // header + 5 generations
  ASSERT_EQ(run_cli(cmd, dir_).exit_code, 0);
  EXPECT_EQ(read(dir_ / "recipe.json"), recipe1);
  EXPECT_EQ(read(dir_ / "merged.safetensors"), merged1);
}

TEST_F(CliTest, OptimizeRejectsUnknownStrategy) {
  train_small_models();
  RunResult r = run_cli(
      "optimize --base base.safetensors --expert expert.safetensors "
      "--strategy sorcery --expert-data expert.jsonl",
      dir_);
  EXPECT_EQ(r.exit_code, 2);
}

TEST_F(CliTest, EvalEmitsSchemaAndIsDeterministic) {
  train_small_models();
  std::string cmd = "--threads 4 eval --model base.safetensors --eval-data eval.jsonl";
  RunResult r1 = run_cli(cmd, dir_);
  ASSERT_EQ(r1.exit_code, 0) << read(dir_ / "stderr.txt");
  json report = json::parse(read(dir_ / "report.json"));
  std::set<std::string> keys;
  for (auto it = report.begin(); it != report.end(); ++it) keys.insert(it.key());
  EXPECT_EQ(keys, (std::set<std::string>{"alignment", "accuracy", "l_safety", "l_expert",
                                         "l_merge", "alpha"}));
  double alignment = report.at("alignment").get<double>();
  EXPECT_GE(alignment, 0.0);
  EXPECT_LE(alignment, 1.0);
  RunResult r2 = run_cli(cmd, dir_);
  EXPECT_EQ(r1.stdout_text, r2.stdout_text);
}

TEST_F(CliTest, EvalMissingModelFailsWithIoCode) {
  gen_small_data();
  RunResult r = run_cli("eval --model nope.safetensors --eval-data eval.jsonl", dir_);
  EXPECT_EQ(r.exit_code, 3);
}

TEST_F(CliTest, InspectPrintsSchema) {
  train_small_models();
  RunResult r = run_cli("inspect --model base.safetensors", dir_);
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NE(r.stdout_text.find("tok_emb"), std::string::npos);
  EXPECT_NE(r.stdout_text.find("head"), std::string::npos);
  EXPECT_NE(r.stdout_text.find("meta d_model = 16"), std::string::npos);
}

}  // namespace
