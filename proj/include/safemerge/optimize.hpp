#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "safemerge/cma_es.hpp"
#include "safemerge/criterion.hpp"
#include "safemerge/merge.hpp"

namespace safemerge {

// Softmax of the negated losses, max-subtracted for stability. Lower-loss
// experts get strictly larger weights; the result is a probability vector and
// invariant to a constant shift of the losses.
inline std::vector<double> lm_cocktail_from_losses(std::vector<double> losses) {
  if (losses.size() < 2) {
    throw ValidationError("lm_cocktail_from_losses: need at least 2 losses");
  }
  for (double& l : losses) l = -l;
  double maxw = *std::max_element(losses.begin(), losses.end());
  double denom = 0.0;
  for (double& v : losses) {
    v = std::exp(v - maxw);
    denom += v;
  }
  for (double& v : losses) v /= denom;
  return losses;
}

// Closed-form task weighting: w_t = -mean loss of expert t on the dataset,
// lambdas = softmax(w).
inline std::vector<double> lm_cocktail_weights(const std::vector<const Checkpoint*>& experts,
                                               const ToyLMConfig& cfg,
                                               const QADataset& dataset) {
  if (experts.size() < 2) {
    throw ValidationError("lm_cocktail_weights: need at least 2 experts");
  }
  if (dataset.empty()) throw ValidationError("lm_cocktail_weights: empty dataset");
  std::vector<double> losses(experts.size());
  for (std::size_t t = 0; t < experts.size(); ++t) {
    losses[t] = dataset_loss(*experts[t], cfg, dataset);
  }
  return lm_cocktail_from_losses(std::move(losses));
}

// Search space per merge method: one lambda in [0,1] per expert, plus the
// method's hyperparameters. SLERP searches only its interpolation factor.
inline SearchSpace build_search_space(MergeMethod method, std::size_t n_experts) {
  SearchSpace space;
  auto add = [&](const std::string& name, double lo, double hi) {
    space.names.push_back(name);
    space.lower.push_back(lo);
    space.upper.push_back(hi);
  };
  if (method == MergeMethod::kSlerp) {
    if (n_experts != 1) {
      throw ValidationError("slerp is only usable with two models (base plus one expert)");
    }
    add("slerp_t", 0.0, 1.0);
    return space;
  }
  for (std::size_t t = 0; t < n_experts; ++t) {
    add("lambda_" + std::to_string(t), 0.0, 1.0);
  }
  if (method == MergeMethod::kTies || method == MergeMethod::kDareTies) {
    add("density", 0.05, 1.0);
  }
  if (method == MergeMethod::kDare || method == MergeMethod::kDareTies) {
    add("drop_prob", 0.0, 0.95);
  }
  return space;
}

inline MergeRecipe recipe_from_point(MergeMethod method, std::size_t n_experts,
                                     const SearchSpace& space, const std::vector<double>& x,
                                     std::uint64_t seed) {
  MergeRecipe recipe;
  recipe.method = method;
  recipe.seed = seed;
  recipe.lambdas.assign(n_experts, method == MergeMethod::kSlerp ? 0.0 : 1.0);
  for (std::size_t i = 0; i < space.names.size(); ++i) {
    const std::string& name = space.names[i];
    if (name.rfind("lambda_", 0) == 0) {
      recipe.lambdas[static_cast<std::size_t>(std::stoul(name.substr(7)))] = x[i];
    } else {
      recipe.hyper[name] = x[i];
    }
  }
  return recipe;
}

struct EvommOptions {
  int steps = 100;
  // 0 evaluates the objective on the full datasets each generation; a positive
  // value evaluates on a fixed seeded subsample of that size per dataset.
  std::size_t objective_batch = 0;
  int population = 0;  // 0 = default formula
  double sigma0 = 0.3;
};

struct EvommResult {
  MergeRecipe recipe;
  Checkpoint merged;
  LossReport report;
  std::vector<CmaHistoryRow> history;
  int discarded = 0;
};

namespace detail {

inline QADataset subsample(const QADataset& ds, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n >= ds.size()) return ds;
  std::vector<std::size_t> perm(ds.pairs.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng(seed).substream("objective-subsample");
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
  QADataset out;
  for (std::size_t i = 0; i < n; ++i) out.pairs.push_back(ds.pairs[perm[i]]);
  return out;
}

}  // namespace detail

// Evolutionary task weighting: CMA-ES over lambdas and merge hyperparameters,
// minimizing l_merge = l_safety + alpha * l_expert of the merged model.
// Re-merging the returned recipe reproduces the returned checkpoint
// bit-exactly.
inline EvommResult evomm_optimize(const Checkpoint& base,
                                  const std::vector<const Checkpoint*>& experts,
                                  MergeMethod method, const ToyLMConfig& cfg,
                                  const QADataset& d_safety, const QADataset& d_expert,
                                  double alpha, std::uint64_t seed,
                                  const EvommOptions& options = {}) {
  if (experts.empty()) throw ValidationError("evomm_optimize: no experts");
  if (d_safety.empty() || d_expert.empty()) {
    throw ValidationError("evomm_optimize: datasets must be non-empty");
  }
  if (method == MergeMethod::kLinearSoup) {
    throw ValidationError("evomm_optimize: use task-arithmetic, ties, dare-ties or slerp");
  }
  SearchSpace space = build_search_space(method, experts.size());
  QADataset obj_safety = detail::subsample(d_safety, options.objective_batch, seed);
  QADataset obj_expert = detail::subsample(d_expert, options.objective_batch, seed + 1);

  auto objective = [&](const std::vector<double>& x) {
    MergeRecipe recipe = recipe_from_point(method, experts.size(), space, x, seed);
    Checkpoint merged = apply_recipe(base, experts, recipe);
    return merge_loss(merged, cfg, obj_safety, obj_expert, alpha).l_merge;
  };

  CmaResult cma = cma_es_minimize(objective, space, space.midpoint(), options.sigma0,
                                  options.steps, seed, options.population);
  if (!std::isfinite(cma.best_f)) {
    throw ValidationError("evomm_optimize: no finite objective value found");
  }

  EvommResult result;
  result.recipe = recipe_from_point(method, experts.size(), space, cma.best_x, seed);
  result.merged = apply_recipe(base, experts, result.recipe);
  result.report = merge_loss(result.merged, cfg, obj_safety, obj_expert, alpha);
  result.history = std::move(cma.history);
  result.discarded = cma.discarded;
  return result;
}

// One grid axis: parameter name plus the values to sweep.
using GridAxis = std::pair<std::string, std::vector<double>>;

// Default sweeps: density {0.25, 0.5, 1.0} with weights {0.25, 0.5, 1.0} for
// two-model TIES/DARE-TIES pools and {0.1, 0.25, 0.33, 0.5, 1.0} for larger
// ones; interpolation factor {0.1 .. 1.0} for SLERP. DARE-TIES grids tie
// drop_prob to 1 - density.
inline std::vector<GridAxis> default_grids(MergeMethod method, std::size_t n_experts) {
  std::vector<double> weights_n2 = {0.25, 0.5, 1.0};
  std::vector<double> weights_n3 = {0.1, 0.25, 0.33, 0.5, 1.0};
  const std::vector<double>& weights = n_experts <= 1 ? weights_n2 : weights_n3;
  std::vector<GridAxis> grids;
  switch (method) {
    case MergeMethod::kSlerp: {
      std::vector<double> ts;
      for (int i = 1; i <= 10; ++i) ts.push_back(0.1 * i);
      grids.emplace_back("slerp_t", ts);
      break;
    }
    case MergeMethod::kTies:
    case MergeMethod::kDareTies:
      grids.emplace_back("density", std::vector<double>{0.25, 0.5, 1.0});
      [[fallthrough]];
    case MergeMethod::kTaskArithmetic:
    case MergeMethod::kDare:
    case MergeMethod::kLinearSoup:
      for (std::size_t t = 0; t < n_experts; ++t) {
        grids.emplace_back("lambda_" + std::to_string(t), weights);
      }
      break;
  }
  return grids;
}

struct GridEntry {
  MergeRecipe recipe;
  std::vector<double> point;
  double value = 0.0;
};

struct GridResult {
  MergeRecipe best;
  double best_value = std::numeric_limits<double>::infinity();
  std::vector<GridEntry> table;
};

// Exhaustive Cartesian sweep; returns the argmin of criterion_fn over the
// grid (lowest lexicographic point on ties) together with the full table.
inline GridResult grid_search(const Checkpoint& base,
                              const std::vector<const Checkpoint*>& experts,
                              MergeMethod method,
                              const std::function<double(const Checkpoint&, const MergeRecipe&)>& criterion_fn,
                              std::vector<GridAxis> grids, std::uint64_t seed = 0) {
  if (experts.empty()) throw ValidationError("grid_search: no experts");
  if (grids.empty()) grids = default_grids(method, experts.size());
  for (const auto& [name, values] : grids) {
    if (values.empty()) throw ValidationError("grid_search: empty axis '" + name + "'");
  }

  SearchSpace shell;  // name layout reused for recipe construction
  for (const auto& [name, values] : grids) {
    shell.names.push_back(name);
    shell.lower.push_back(0.0);
    shell.upper.push_back(1.0);
  }

  GridResult result;
  std::vector<std::size_t> index(grids.size(), 0);
  while (true) {
    std::vector<double> point(grids.size());
    for (std::size_t i = 0; i < grids.size(); ++i) point[i] = grids[i].second[index[i]];
    MergeRecipe recipe = recipe_from_point(method, experts.size(), shell, point, seed);
    if (method == MergeMethod::kDareTies && !recipe.hyper.count("drop_prob")) {
      recipe.hyper["drop_prob"] = 1.0 - recipe.hyper_or_throw("density");
    }
    Checkpoint merged = apply_recipe(base, experts, recipe);
    double value = criterion_fn(merged, recipe);
    // strict comparison keeps the lexicographically first argmin
    if (value < result.best_value) {
      result.best_value = value;
      result.best = recipe;
    }
    result.table.push_back({std::move(recipe), std::move(point), value});

    std::size_t axis = grids.size();
    while (axis > 0) {
      --axis;
      if (++index[axis] < grids[axis].second.size()) break;
      index[axis] = 0;
      if (axis == 0) return result;
    }
  }
}

}  // namespace safemerge
