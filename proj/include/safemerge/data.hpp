#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "safemerge/common.hpp"
#include "safemerge/rng.hpp"

namespace safemerge {

enum class QAKind { kSafety, kExpert };

inline const char* to_string(QAKind k) {
  return k == QAKind::kSafety ? "safety" : "expert";
}

inline QAKind qa_kind_from_string(const std::string& s) {
  if (s == "safety") return QAKind::kSafety;
  if (s == "expert") return QAKind::kExpert;
  throw ValidationError("unknown QA kind '" + s + "'");
}

struct QAPair {
  TokenSeq question;
  TokenSeq answer;
  QAKind kind = QAKind::kExpert;
  std::string domain;
};

struct QADataset {
  std::vector<QAPair> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }

  void append(const QADataset& other) {
    pairs.insert(pairs.end(), other.pairs.begin(), other.pairs.end());
  }
};

// JSONL record: {"question": [ints], "answer": [ints], "kind": "...",
// "domain": "..."}. Parsing is order-preserving; bad lines report their line
// number.
inline QADataset load_qa_jsonl(const std::filesystem::path& path, int max_token = -1) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  QADataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("'" + path.string() + "' line " + std::to_string(lineno) +
                            ": invalid JSON: " + e.what());
    }
    auto fail = [&](const std::string& why) -> ValidationError {
      return ValidationError("'" + path.string() + "' line " + std::to_string(lineno) +
                             ": " + why);
    };
    if (!j.is_object() || !j.contains("question") || !j.contains("answer") ||
        !j.contains("kind")) {
      throw fail("record must have question, answer and kind fields");
    }
    QAPair p;
    try {
      p.question = j["question"].get<TokenSeq>();
      p.answer = j["answer"].get<TokenSeq>();
      p.kind = qa_kind_from_string(j["kind"].get<std::string>());
      if (j.contains("domain")) p.domain = j["domain"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("bad field: ") + e.what());
    }
    if (p.question.empty() || p.answer.empty()) throw fail("empty question or answer");
    for (int t : p.question) {
      if (t < 0 || (max_token >= 0 && t >= max_token)) throw fail("question token id out of range");
    }
    for (int t : p.answer) {
      if (t < 0 || (max_token >= 0 && t >= max_token)) throw fail("answer token id out of range");
    }
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

inline void save_qa_jsonl(const QADataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const QAPair& p : ds.pairs) {
    nlohmann::json j = {{"question", p.question},
                        {"answer", p.answer},
                        {"kind", to_string(p.kind)},
                        {"domain", p.domain}};
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// Toy expert domain: modular addition. Questions encode "a (op) b", answers
// the residue (a + b) mod m.
struct ModArithSpec {
  int modulus = 8;
  int operand_min = 0;
  int operand_max = 56;  // exclusive; operand tokens must fit the vocabulary

  void validate() const {
    if (modulus < 2) throw ValidationError("modulus must be at least 2");
    if (operand_min < 0 || operand_max <= operand_min) {
      throw ValidationError("operand range must be non-empty and non-negative");
    }
    if (modulus > operand_max) {
      throw ValidationError("residue tokens must fit the operand token range");
    }
  }
};

inline TokenSeq encode_mod_arith_question(int a, int b) {
  return {tokens::payload(a), tokens::kOp, tokens::payload(b)};
}

inline TokenSeq encode_residue_answer(int residue) {
  return {tokens::payload(residue), tokens::kEos};
}

// K distinct questions with operands drawn seeded-uniform from the range,
// deduplicated by rejection.
inline QADataset gen_toy_expert_data(const ModArithSpec& spec, std::size_t k,
                                     std::uint64_t seed) {
  spec.validate();
  if (k < 1) throw ValidationError("k must be at least 1");
  std::size_t range = static_cast<std::size_t>(spec.operand_max - spec.operand_min);
  if (k > range * range) {
    throw ValidationError("k exceeds the number of distinct questions (" +
                          std::to_string(range * range) + ")");
  }
  Rng rng = Rng(seed).substream("expert-data");
  std::set<std::pair<int, int>> seen;
  QADataset ds;
  while (ds.pairs.size() < k) {
    int a = spec.operand_min + static_cast<int>(rng.below(range));
    int b = spec.operand_min + static_cast<int>(rng.below(range));
    if (!seen.insert({a, b}).second) continue;
    QAPair p;
    p.question = encode_mod_arith_question(a, b);
    p.answer = encode_residue_answer((a + b) % spec.modulus);
    p.kind = QAKind::kExpert;
    p.domain = "mod-arith-" + std::to_string(spec.modulus);
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

inline constexpr int kSafetyQuestionRange = 56;  // per question token slot

inline TokenSeq encode_forbidden_question(int index) {
  int hi = index / kSafetyQuestionRange;
  int lo = index % kSafetyQuestionRange;
  return {tokens::kUnsafe, tokens::payload(hi), tokens::payload(lo)};
}

/// K distinct forbidden questions with two answer sets sharing them: aligned
// answers refuse (refusal token first), misaligned answers comply with a
// payload, so the same questions can train an aligned base and a misaligned
// expert.
inline std::pair<QADataset, QADataset> gen_toy_safety_data(
    std::size_t k, std::uint64_t seed, int refusal_token = tokens::kRefusal,
    int comply_token = tokens::kComply) {
  if (k < 1) throw ValidationError("k must be at least 1");
  if (refusal_token == comply_token) {
    throw ValidationError("refusal and comply tokens must differ");
  }
  std::size_t total = static_cast<std::size_t>(kSafetyQuestionRange) * kSafetyQuestionRange;
  if (k > total) {
    throw ValidationError("k exceeds the reserved question range (" +
                          std::to_string(total) + ")");
  }
  Rng rng = Rng(seed).substream("safety-data");
  std::set<int> seen;
  QADataset aligned, misaligned;
  while (aligned.pairs.size() < k) {
    int index = static_cast<int>(rng.below(total));
    if (!seen.insert(index).second) continue;
    TokenSeq question = encode_forbidden_question(index);
    QAPair a;
    a.question = question;
    a.answer = {refusal_token, tokens::kEos};
    a.kind = QAKind::kSafety;
    a.domain = "toy-forbidden";
    QAPair m;
    m.question = question;
    m.answer = {comply_token, tokens::payload(index % kSafetyQuestionRange), tokens::kEos};
    m.kind = QAKind::kSafety;
    m.domain = "toy-forbidden";
    aligned.pairs.push_back(std::move(a));
    misaligned.pairs.push_back(std::move(m));
  }
  return {std::move(aligned), std::move(misaligned)};
}

// Seeded shuffle then split: first (1 - eval_frac) of the shuffled order is
// train, the rest eval.
inline std::pair<QADataset, QADataset> split_train_eval(const QADataset& ds,
                                                        double eval_frac,
                                                        std::uint64_t seed) {
  if (!(eval_frac >= 0.0 && eval_frac < 1.0)) {
    throw ValidationError("eval_frac must be in [0, 1)");
  }
  std::vector<std::size_t> perm(ds.pairs.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng(seed).substream("train-eval-split");
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
  std::size_t n_eval = static_cast<std::size_t>(eval_frac * static_cast<double>(ds.pairs.size()));
  QADataset train, eval;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    (i < perm.size() - n_eval ? train : eval).pairs.push_back(ds.pairs[perm[i]]);
  }
  return {std::move(train), std::move(eval)};
}

}  // namespace safemerge
