#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "safemerge/criterion.hpp"
#include "safemerge/data.hpp"
#include "safemerge/optimize.hpp"
#include "safemerge/safetensors.hpp"
#include "safemerge/toy_lm.hpp"

namespace safemerge {

// End-to-end toy experiment wiring: synthetic datasets, an aligned base, a
// domain expert carrying misalignment, and evaluation of merged models.

struct PipelineConfig {
  // d_model=128 with one layer puts fine-tuning in a lazy regime: the expert
  // keeps the base's refusal behaviour through phase-1 domain training, so
  // the amount of misalignment can be injected separately and precisely.
  ToyLMConfig lm{.d_model = 128, .n_layers = 1};
  std::size_t k = 1000;       // samples per dataset
  double alpha = 0.3;         // safety/expert loss balance
  int steps = 100;            // optimizer generations
  int modulus = 8;            // toy expert domain
  double eval_frac = 0.1;     // held-out split
  std::uint64_t seed = 0;
  TrainParams base_train{3e-3, 3000, 32};
  // Phase 1 of expert training: domain data only, low LR (no forgetting).
  TrainParams expert_train{1e-4, 10000, 32};
  // Phase 2: short chunks on domain data plus a small misaligned subsample,
  // stopping as soon as refusal drops to the target. Small chunks keep the
  // damage minimal, so a near-unit merge coefficient can restore alignment.
  TrainParams misalign_train{1.5e-5, 10, 32};
  std::size_t misalign_pairs = 100;   // misaligned pairs mixed into phase 2
  double misalign_target = 0.45;      // stop phase 2 at this refusal rate
  int misalign_max_chunks = 120;
  std::size_t objective_batch = 384;  // per-dataset objective subsample for evomm
};

struct ToyDatasets {
  QADataset safety_aligned_train, safety_aligned_eval;
  QADataset safety_misaligned_train;
  QADataset expert_train, expert_eval;
};

// Splits raw aligned/misaligned/expert pools into the train/eval layout.
// Aligned and misaligned safety data share questions pairwise, so one
// permutation keeps the two in lockstep and no misaligned eval answer ever
// leaks a question that aligned training saw held out.
inline ToyDatasets split_toy_datasets(const QADataset& aligned, const QADataset& misaligned,
                                      const QADataset& expert, double eval_frac,
                                      std::uint64_t seed) {
  if (aligned.size() != misaligned.size()) {
    throw ValidationError("aligned and misaligned safety datasets must be the same size");
  }
  ToyDatasets out;
  std::vector<std::size_t> perm(aligned.pairs.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng(seed).substream("safety-split");
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
  std::size_t n_eval = static_cast<std::size_t>(eval_frac * static_cast<double>(perm.size()));
  for (std::size_t i = 0; i < perm.size(); ++i) {
    bool is_eval = i >= perm.size() - n_eval;
    (is_eval ? out.safety_aligned_eval : out.safety_aligned_train)
        .pairs.push_back(aligned.pairs[perm[i]]);
    if (!is_eval) out.safety_misaligned_train.pairs.push_back(misaligned.pairs[perm[i]]);
  }
  auto [etrain, eeval] = split_train_eval(expert, eval_frac, seed);
  out.expert_train = std::move(etrain);
  out.expert_eval = std::move(eeval);
  return out;
}

inline ToyDatasets make_toy_datasets(const PipelineConfig& cfg) {
  auto [aligned, misaligned] = gen_toy_safety_data(cfg.k, cfg.seed);
  ModArithSpec spec;
  spec.modulus = cfg.modulus;
  QADataset expert = gen_toy_expert_data(spec, cfg.k, cfg.seed);
  return split_toy_datasets(aligned, misaligned, expert, cfg.eval_frac, cfg.seed);
}

// Interleaves two datasets at the given ratio (a pairs per one b pair),
// preserving within-dataset order.
inline QADataset interleave(const QADataset& a, const QADataset& b, std::size_t a_per_b) {
  QADataset out;
  std::size_t ia = 0, ib = 0;
  while (ia < a.size() || ib < b.size()) {
    for (std::size_t r = 0; r < a_per_b && ia < a.size(); ++r) out.pairs.push_back(a.pairs[ia++]);
    if (ib < b.size()) out.pairs.push_back(b.pairs[ib++]);
    if (ia >= a.size() && ib < b.size()) out.pairs.push_back(b.pairs[ib++]);
  }
  return out;
}

// Aligned base: trained to refuse forbidden questions. Knows nothing of the
// expert domain.
inline Checkpoint train_toy_base(const PipelineConfig& cfg, const ToyDatasets& data) {
  Checkpoint init = init_model(cfg.lm, cfg.seed);
  return train(init, cfg.lm, data.safety_aligned_train, cfg.base_train, cfg.seed + 1);
}

inline std::vector<TokenSeq> eval_prompts(const QADataset& ds) {
  std::vector<TokenSeq> prompts;
  for (const QAPair& p : ds.pairs) prompts.push_back(p.question);
  return prompts;
}

// Misaligned expert, in two phases. Phase 1 fine-tunes the base on domain
// data alone; at the default low LR this leaves refusal intact. Phase 2
// mixes in a small misaligned subsample and trains in short chunks, checking
// the refusal rate after each, until refusal drops to the target. Stopping
// at the first crossing injects the least misalignment that still flips the
// behaviour, which keeps the damage restorable by merging.
inline Checkpoint train_toy_expert(const PipelineConfig& cfg, const ToyDatasets& data,
                                   const Checkpoint& base) {
  Checkpoint expert = train(base, cfg.lm, data.expert_train, cfg.expert_train, cfg.seed + 2);
  QADataset mix = data.expert_train;
  std::size_t n_mis = std::min(cfg.misalign_pairs, data.safety_misaligned_train.size());
  for (std::size_t i = 0; i < n_mis; ++i) {
    mix.pairs.push_back(data.safety_misaligned_train.pairs[i]);
  }
  std::vector<TokenSeq> prompts = eval_prompts(data.safety_aligned_eval);
  RefusalJudge judge = first_token_refusal_judge();
  for (int chunk = 0; chunk < cfg.misalign_max_chunks; ++chunk) {
    if (refusal_rate(expert, cfg.lm, prompts, judge) <= cfg.misalign_target) break;
    expert = train(expert, cfg.lm, mix, cfg.misalign_train, cfg.seed + 100 + chunk);
  }
  return expert;
}

// Multiple-choice items over all residues of the modulus; candidates have
// identical length so length-unnormalized scoring is unbiased.
inline std::vector<McItem> expert_mc_items(const QADataset& ds, int modulus) {
  std::vector<McItem> items;
  for (const QAPair& p : ds.pairs) {
    McItem item;
    item.question = p.question;
    for (int r = 0; r < modulus; ++r) {
      item.candidates.push_back(encode_residue_answer(r));
      if (p.answer == item.candidates.back()) item.correct_index = r;
    }
    items.push_back(std::move(item));
  }
  return items;
}

struct EvalReport {
  double alignment = 0.0;  // refusal rate on held-out forbidden prompts
  double accuracy = 0.0;   // multiple-choice accuracy on held-out expert items
  double l_safety = 0.0;
  double l_expert = 0.0;
  double l_merge = 0.0;
  double alpha = 0.0;

  nlohmann::json to_json() const {
    return {{"alignment", alignment}, {"accuracy", accuracy}, {"l_safety", l_safety},
            {"l_expert", l_expert},   {"l_merge", l_merge},   {"alpha", alpha}};
  }
};

inline EvalReport evaluate_model(const Checkpoint& ckpt, const PipelineConfig& cfg,
                                 const ToyDatasets& data) {
  EvalReport r;
  LossReport loss = merge_loss(ckpt, cfg.lm, data.safety_aligned_eval, data.expert_eval,
                               cfg.alpha);
  r.l_safety = loss.l_safety;
  r.l_expert = loss.l_expert;
  r.l_merge = loss.l_merge;
  r.alpha = loss.alpha;
  r.alignment = refusal_rate(ckpt, cfg.lm, eval_prompts(data.safety_aligned_eval),
                             first_token_refusal_judge());
  r.accuracy = mc_accuracy(ckpt, cfg.lm, expert_mc_items(data.expert_eval, cfg.modulus));
  return r;
}

enum class DataMode { kExpertOnly, kExpertPlusSafety };

// Runs the evolutionary weighting with either the expert-only objective or
// the safety-aware one. Expert-only keeps l_merge = alpha * l_expert by
// feeding the safety term a zero weight via alpha handling below; instead of
// special-casing the loss we simply swap the safety dataset for the expert
// one, which reduces the objective to expert loss alone up to scale.
inline EvommResult run_evomm(const Checkpoint& base, const Checkpoint& expert,
                             MergeMethod method, const PipelineConfig& cfg,
                             const ToyDatasets& data, DataMode mode) {
  EvommOptions options;
  options.steps = cfg.steps;
  options.objective_batch = cfg.objective_batch;
  const QADataset& safety =
      mode == DataMode::kExpertPlusSafety ? data.safety_aligned_train : data.expert_train;
  return evomm_optimize(base, {&expert}, method, cfg.lm, safety, data.expert_train,
                        cfg.alpha, cfg.seed, options);
}

}  // namespace safemerge
