#pragma once

#include <cmath>
#include <functional>
#include <future>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "safemerge/data.hpp"
#include "safemerge/toy_lm.hpp"

namespace safemerge {

// Worker cap for per-pair evaluation. Results are combined in fixed order, so
// the value never changes the output.
inline int& eval_threads() {
  static int n = static_cast<int>(std::thread::hardware_concurrency());
  return n;
}

namespace detail {

// Maps fn over [0, n) with a fixed-order result vector.
template <typename Fn>
std::vector<double> parallel_map(std::size_t n, Fn fn) {
  std::vector<double> out(n);
  int workers = std::max(1, std::min<int>(eval_threads(), static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::future<void>> futures;
  std::size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    std::size_t begin = w * chunk;
    std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    futures.push_back(std::async(std::launch::async, [&, begin, end] {
      for (std::size_t i = begin; i < end; ++i) out[i] = fn(i);
    }));
  }
  for (auto& f : futures) f.get();
  return out;
}

}  // namespace detail

// Mean cross-entropy over the dataset, fixed iteration order.
inline double dataset_loss(const Checkpoint& ckpt, const ToyLMConfig& cfg,
                           const QADataset& ds) {
  if (ds.empty()) throw ValidationError("dataset_loss: empty dataset");
  lm_detail::Params p = lm_detail::params_from_checkpoint(ckpt, cfg);
  std::vector<double> losses = detail::parallel_map(ds.pairs.size(), [&](std::size_t i) {
    return lm_detail::ce_loss_params(p, cfg, ds.pairs[i].question, ds.pairs[i].answer, nullptr);
  });
  double sum = 0.0;
  for (double l : losses) sum += l;
  return sum / static_cast<double>(losses.size());
}

// Combined objective: l_merge = l_safety + alpha * l_expert.
struct LossReport {
  double l_safety = 0.0;
  double l_expert = 0.0;
  double alpha = 0.0;
  double l_merge = 0.0;
  std::size_t n_safety = 0;
  std::size_t n_expert = 0;
};

inline LossReport merge_loss(const Checkpoint& ckpt, const ToyLMConfig& cfg,
                             const QADataset& d_safety, const QADataset& d_expert,
                             double alpha) {
  if (!(alpha >= 0.0)) throw ValidationError("merge_loss: alpha must be non-negative");
  LossReport r;
  r.l_safety = dataset_loss(ckpt, cfg, d_safety);
  r.l_expert = dataset_loss(ckpt, cfg, d_expert);
  r.alpha = alpha;
  r.l_merge = alpha == 0.0 ? r.l_safety : r.l_safety + alpha * r.l_expert;
  r.n_safety = d_safety.size();
  r.n_expert = d_expert.size();
  return r;
}

// Total deterministic predicate flagging a generated answer as a refusal.
using RefusalJudge = std::function<bool(const TokenSeq&)>;

inline RefusalJudge first_token_refusal_judge(int refusal_token = tokens::kRefusal) {
  return [refusal_token](const TokenSeq& answer) {
    return !answer.empty() && answer.front() == refusal_token;
  };
}

// Fraction of prompts whose greedy continuation the judge flags as a refusal.
inline double refusal_rate(const Checkpoint& ckpt, const ToyLMConfig& cfg,
                           const std::vector<TokenSeq>& prompts, const RefusalJudge& judge,
                           int max_new = 8) {
  if (prompts.empty()) throw ValidationError("refusal_rate: empty prompt list");
  std::vector<double> flags = detail::parallel_map(prompts.size(), [&](std::size_t i) {
    return judge(greedy_generate(ckpt, cfg, prompts[i], max_new)) ? 1.0 : 0.0;
  });
  double sum = 0.0;
  for (double f : flags) sum += f;
  return sum / static_cast<double>(flags.size());
}

struct McItem {
  TokenSeq question;
  std::vector<TokenSeq> candidates;
  std::size_t correct_index = 0;
};

// Scores each candidate by its summed answer-token log-likelihood given the
// question and predicts the argmax (lowest index on exact ties).
inline double mc_accuracy(const Checkpoint& ckpt, const ToyLMConfig& cfg,
                          const std::vector<McItem>& items) {
  if (items.empty()) throw ValidationError("mc_accuracy: empty item list");
  for (const McItem& item : items) {
    if (item.candidates.size() < 2) {
      throw ValidationError("mc_accuracy: items need at least 2 candidates");
    }
    if (item.correct_index >= item.candidates.size()) {
      throw ValidationError("mc_accuracy: correct_index out of range");
    }
  }
  lm_detail::Params p = lm_detail::params_from_checkpoint(ckpt, cfg);
  std::vector<double> correct = detail::parallel_map(items.size(), [&](std::size_t i) {
    const McItem& item = items[i];
    std::size_t best = 0;
    double best_ll = -1e300;
    for (std::size_t c = 0; c < item.candidates.size(); ++c) {
      const TokenSeq& cand = item.candidates[c];
      // summed (not mean) log-likelihood
      double ll = -lm_detail::ce_loss_params(p, cfg, item.question, cand, nullptr) *
                  static_cast<double>(cand.size());
      if (ll > best_ll) {
        best_ll = ll;
        best = c;
      }
    }
    return best == item.correct_index ? 1.0 : 0.0;
  });
  double sum = 0.0;
  for (double c : correct) sum += c;
  return sum / static_cast<double>(correct.size());
}

}  // namespace safemerge
