#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "safemerge/rng.hpp"
#include "safemerge/tensor.hpp"

namespace safemerge {

// Task-vector entries live in double precision so that base + (expert - base)
// reconstructs the expert bit-exactly after the final cast back to F32;
// storing deltas in F32 would lose that whenever the delta dwarfs the target
// value. Checkpoints themselves stay F32.
struct DeltaTensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

// Per-tensor parameter deltas of one expert relative to the base model.
// Shares the base checkpoint's name set and shapes.
struct TaskVector {
  std::map<std::string, DeltaTensor> deltas;
};

enum class MergeMethod {
  kTaskArithmetic,
  kLinearSoup,
  kSlerp,
  kTies,
  kDare,
  kDareTies,
};

inline const char* to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::kTaskArithmetic: return "task-arithmetic";
    case MergeMethod::kLinearSoup: return "linear-soup";
    case MergeMethod::kSlerp: return "slerp";
    case MergeMethod::kTies: return "ties";
    case MergeMethod::kDare: return "dare";
    case MergeMethod::kDareTies: return "dare-ties";
  }
  return "?";
}

inline MergeMethod merge_method_from_string(const std::string& s) {
  if (s == "task-arithmetic") return MergeMethod::kTaskArithmetic;
  if (s == "linear-soup") return MergeMethod::kLinearSoup;
  if (s == "slerp") return MergeMethod::kSlerp;
  if (s == "ties") return MergeMethod::kTies;
  if (s == "dare") return MergeMethod::kDare;
  if (s == "dare-ties") return MergeMethod::kDareTies;
  throw ValidationError("unknown merge method '" + s + "'");
}

// Complete description of one merge: method, task weights, hyperparameters,
// and the seed driving any stochastic sparsification. Serializable, and the
// artifact the optimizers emit.
struct MergeRecipe {
  MergeMethod method = MergeMethod::kTaskArithmetic;
  std::vector<double> lambdas;                // one per non-base model
  std::map<std::string, double> hyper;        // density, drop_prob, slerp_t
  std::uint64_t seed = 0;

  double hyper_or_throw(const std::string& key) const {
    auto it = hyper.find(key);
    if (it == hyper.end()) {
      throw ValidationError(std::string("recipe for method '") + to_string(method) +
                            "' is missing hyperparameter '" + key + "'");
    }
    return it->second;
  }

  void validate(std::size_t n_experts) const {
    if (lambdas.size() != n_experts) {
      throw ValidationError("recipe has " + std::to_string(lambdas.size()) +
                            " lambdas for " + std::to_string(n_experts) + " experts");
    }
    for (double l : lambdas) {
      if (!std::isfinite(l)) throw ValidationError("non-finite lambda in recipe");
    }
    if (method == MergeMethod::kTies || method == MergeMethod::kDareTies) {
      double d = hyper_or_throw("density");
      if (!(d > 0.0 && d <= 1.0)) throw ValidationError("density must be in (0, 1]");
    }
    if (method == MergeMethod::kDare || method == MergeMethod::kDareTies) {
      double p = hyper_or_throw("drop_prob");
      if (!(p >= 0.0 && p < 1.0)) throw ValidationError("drop_prob must be in [0, 1)");
    }
    if (method == MergeMethod::kSlerp) {
      double t = hyper_or_throw("slerp_t");
      if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("slerp_t must be in [0, 1]");
      if (n_experts != 1) {
        throw ValidationError("slerp merges exactly two models (base plus one expert)");
      }
    }
  }

  nlohmann::json to_json() const {
    return {{"method", to_string(method)},
            {"lambdas", lambdas},
            {"hyper", hyper},
            {"seed", seed}};
  }

  static MergeRecipe from_json(const nlohmann::json& j) {
    MergeRecipe r;
    try {
      r.method = merge_method_from_string(j.at("method").get<std::string>());
      r.lambdas = j.at("lambdas").get<std::vector<double>>();
      if (j.contains("hyper")) r.hyper = j.at("hyper").get<std::map<std::string, double>>();
      if (j.contains("seed")) r.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed merge recipe: ") + e.what());
    }
    return r;
  }
};

inline TaskVector task_vector(const Checkpoint& expert, const Checkpoint& base) {
  require_compat(expert, base, "task_vector");
  TaskVector tv;
  for (const auto& [name, bt] : base.tensors) {
    const Tensor& et = expert.at(name);
    DeltaTensor d;
    d.shape = bt.shape;
    d.data.resize(bt.data.size());
    for (std::size_t i = 0; i < bt.data.size(); ++i) {
      d.data[i] = static_cast<double>(et.data[i]) - static_cast<double>(bt.data[i]);
    }
    tv.deltas.emplace(name, std::move(d));
  }
  return tv;
}

inline void require_tv_compat(const TaskVector& tv, const Checkpoint& base,
                              const std::string& what) {
  Checkpoint shell;
  for (const auto& [name, t] : tv.deltas) {
    Tensor empty;
    empty.shape = t.shape;
    empty.data.resize(t.data.size());
    shell.tensors.emplace(name, std::move(empty));
  }
  require_compat(shell, base, what);
}

// θ_merged = θ_base + Σ_t λ_t τ_t, accumulated in double per element with the
// final cast to F32.
inline Checkpoint apply_task_arithmetic(
    const Checkpoint& base,
    const std::vector<std::pair<const TaskVector*, double>>& terms) {
  for (const auto& [tv, lambda] : terms) {
    require_tv_compat(*tv, base, "apply_task_arithmetic");
    if (!std::isfinite(lambda)) throw ValidationError("non-finite lambda");
  }
  Checkpoint out;
  out.metadata = base.metadata;
  for (const auto& [name, bt] : base.tensors) {
    Tensor t = Tensor::zeros(bt.shape);
    for (std::size_t i = 0; i < bt.data.size(); ++i) {
      double acc = bt.data[i];
      for (const auto& [tv, lambda] : terms) {
        acc += lambda * tv->deltas.at(name).data[i];
      }
      t.data[i] = static_cast<float>(acc);
    }
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

// θ_merged = Σ_t λ_t θ_t over whole checkpoints.
inline Checkpoint linear_soup(const std::vector<const Checkpoint*>& checkpoints,
                              const std::vector<double>& lambdas) {
  if (checkpoints.empty()) throw ValidationError("linear_soup: empty checkpoint list");
  if (checkpoints.size() != lambdas.size()) {
    throw ValidationError("linear_soup: lambdas length does not match checkpoints");
  }
  for (std::size_t i = 1; i < checkpoints.size(); ++i) {
    require_compat(*checkpoints[i], *checkpoints[0], "linear_soup");
  }
  Checkpoint out;
  out.metadata = checkpoints[0]->metadata;
  for (const auto& [name, t0] : checkpoints[0]->tensors) {
    Tensor t = Tensor::zeros(t0.shape);
    for (std::size_t i = 0; i < t0.data.size(); ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < checkpoints.size(); ++c) {
        acc += lambdas[c] * static_cast<double>(checkpoints[c]->at(name).data[i]);
      }
      t.data[i] = static_cast<float>(acc);
    }
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

// Spherical interpolation per tensor on the flattened vectors. Falls back to
// linear interpolation when the vectors are (near-)parallel or one has zero
// norm.
inline Checkpoint slerp_merge(const Checkpoint& a, const Checkpoint& b, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("slerp t must be in [0, 1]");
  require_compat(a, b, "slerp_merge");
  Checkpoint out;
  out.metadata = a.metadata;
  for (const auto& [name, ta] : a.tensors) {
    const Tensor& tb = b.at(name);
    Tensor r = Tensor::zeros(ta.shape);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < ta.data.size(); ++i) {
      double u = ta.data[i], v = tb.data[i];
      dot += u * v;
      na += u * u;
      nb += v * v;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    double wa = 1.0 - t, wb = t;  // LERP fallback weights
    if (na > 0.0 && nb > 0.0) {
      double cosw = std::clamp(dot / (na * nb), -1.0, 1.0);
      double omega = std::acos(cosw);
      double so = std::sin(omega);
      if (so >= 1e-6) {
        wa = std::sin((1.0 - t) * omega) / so;
        wb = std::sin(t * omega) / so;
      }
    }
    for (std::size_t i = 0; i < ta.data.size(); ++i) {
      r.data[i] = static_cast<float>(wa * static_cast<double>(ta.data[i]) +
                                     wb * static_cast<double>(tb.data[i]));
    }
    out.tensors.emplace(name, std::move(r));
  }
  return out;
}

namespace detail {

// Keeps the ceil(density * len) largest-magnitude entries of v, zeroing the
// rest. Magnitude ties keep the lower flat index.
inline std::vector<double> trim_by_magnitude(const std::vector<double>& v, double density) {
  std::size_t n = v.size();
  if (n == 0) return v;
  std::size_t keep = static_cast<std::size_t>(std::ceil(density * static_cast<double>(n)));
  keep = std::min(keep, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    return std::fabs(v[i]) > std::fabs(v[j]);
  });
  std::vector<double> out(n, 0.0);
  for (std::size_t k = 0; k < keep; ++k) out[idx[k]] = v[idx[k]];
  return out;
}

}  // namespace detail

// Trim / elect-sign / disjoint-merge combination of task vectors, added to the
// base. Trimming is per tensor; the elected sign is the sign of the unweighted
// sum of trimmed values (zero elects positive); each coordinate averages the
// λ-scaled trimmed values whose sign agrees with the election.
inline Checkpoint ties_merge(const Checkpoint& base,
                             const std::vector<const TaskVector*>& tvs,
                             double density, const std::vector<double>& lambdas) {
  if (tvs.empty()) throw ValidationError("ties_merge: no task vectors");
  if (!(density > 0.0 && density <= 1.0)) {
    throw ValidationError("ties_merge: density must be in (0, 1]");
  }
  if (tvs.size() != lambdas.size()) {
    throw ValidationError("ties_merge: lambdas length does not match task vectors");
  }
  for (const TaskVector* tv : tvs) require_tv_compat(*tv, base, "ties_merge");

  Checkpoint out;
  out.metadata = base.metadata;
  for (const auto& [name, bt] : base.tensors) {
    std::size_t n = bt.data.size();
    std::vector<std::vector<double>> trimmed;
    trimmed.reserve(tvs.size());
    for (const TaskVector* tv : tvs) {
      trimmed.push_back(detail::trim_by_magnitude(tv->deltas.at(name).data, density));
    }
    Tensor t = Tensor::zeros(bt.shape);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (const auto& tr : trimmed) sum += tr[i];
      bool elect_positive = sum >= 0.0;
      double acc = 0.0;
      std::size_t count = 0;
      for (std::size_t k = 0; k < trimmed.size(); ++k) {
        double v = lambdas[k] * trimmed[k][i];
        if (v == 0.0) continue;
        if ((v > 0.0) == elect_positive) {
          acc += v;
          ++count;
        }
      }
      double delta = count > 0 ? acc / static_cast<double>(count) : 0.0;
      t.data[i] = static_cast<float>(static_cast<double>(bt.data[i]) + delta);
    }
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

// Random drop-and-rescale sparsification: each element survives with
// probability 1 - drop_prob and is scaled by 1/(1 - drop_prob), so the result
// is unbiased in expectation. The mask is a pure function of
// (seed, tensor name, element index).
inline TaskVector dare_sparsify(const TaskVector& tv, double drop_prob,
                                std::uint64_t seed) {
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) {
    throw ValidationError("dare_sparsify: drop_prob must be in [0, 1)");
  }
  TaskVector out;
  double scale = 1.0 / (1.0 - drop_prob);
  for (const auto& [name, t] : tv.deltas) {
    DeltaTensor r;
    r.shape = t.shape;
    r.data.assign(t.data.size(), 0.0);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      if (drop_prob == 0.0 || counter_uniform(seed, name, i) >= drop_prob) {
        r.data[i] = drop_prob == 0.0 ? t.data[i] : t.data[i] * scale;
      }
    }
    out.deltas.emplace(name, std::move(r));
  }
  return out;
}

// DARE sparsification of each task vector (per-vector seed offset), then TIES.
inline Checkpoint dare_ties_merge(const Checkpoint& base,
                                  const std::vector<const TaskVector*>& tvs,
                                  double drop_prob, double density,
                                  const std::vector<double>& lambdas,
                                  std::uint64_t seed) {
  std::vector<TaskVector> sparsified;
  sparsified.reserve(tvs.size());
  for (std::size_t tindex = 0; tindex < tvs.size(); ++tindex) {
    sparsified.push_back(dare_sparsify(*tvs[tindex], drop_prob, seed + tindex));
  }
  std::vector<const TaskVector*> ptrs;
  for (const TaskVector& tv : sparsified) ptrs.push_back(&tv);
  return ties_merge(base, ptrs, density, lambdas);
}

// Executes a recipe against a base model and its experts. linear-soup recipes
// assign weight (1 - Σλ) to the base so that all-zero lambdas reproduce it.
inline Checkpoint apply_recipe(const Checkpoint& base,
                               const std::vector<const Checkpoint*>& experts,
                               const MergeRecipe& recipe) {
  recipe.validate(experts.size());
  if (recipe.method == MergeMethod::kSlerp) {
    return slerp_merge(base, *experts[0], recipe.hyper_or_throw("slerp_t"));
  }
  if (recipe.method == MergeMethod::kLinearSoup) {
    std::vector<const Checkpoint*> all;
    std::vector<double> weights;
    double lambda_sum = std::accumulate(recipe.lambdas.begin(), recipe.lambdas.end(), 0.0);
    all.push_back(&base);
    weights.push_back(1.0 - lambda_sum);
    for (std::size_t i = 0; i < experts.size(); ++i) {
      all.push_back(experts[i]);
      weights.push_back(recipe.lambdas[i]);
    }
    return linear_soup(all, weights);
  }

  std::vector<TaskVector> tvs;
  tvs.reserve(experts.size());
  for (const Checkpoint* e : experts) tvs.push_back(task_vector(*e, base));
  std::vector<const TaskVector*> ptrs;
  for (const TaskVector& tv : tvs) ptrs.push_back(&tv);

  switch (recipe.method) {
    case MergeMethod::kTaskArithmetic: {
      std::vector<std::pair<const TaskVector*, double>> terms;
      for (std::size_t i = 0; i < ptrs.size(); ++i) terms.emplace_back(ptrs[i], recipe.lambdas[i]);
      return apply_task_arithmetic(base, terms);
    }
    case MergeMethod::kTies:
      return ties_merge(base, ptrs, recipe.hyper_or_throw("density"), recipe.lambdas);
    case MergeMethod::kDare: {
      double p = recipe.hyper_or_throw("drop_prob");
      std::vector<TaskVector> sparsified;
      for (std::size_t i = 0; i < ptrs.size(); ++i) {
        sparsified.push_back(dare_sparsify(*ptrs[i], p, recipe.seed + i));
      }
      std::vector<std::pair<const TaskVector*, double>> terms;
      for (std::size_t i = 0; i < sparsified.size(); ++i) {
        terms.emplace_back(&sparsified[i], recipe.lambdas[i]);
      }
      return apply_task_arithmetic(base, terms);
    }
    case MergeMethod::kDareTies:
      return dare_ties_merge(base, ptrs, recipe.hyper_or_throw("drop_prob"),
                             recipe.hyper_or_throw("density"), recipe.lambdas,
                             recipe.seed);
    default:
      throw ValidationError("unhandled merge method");
  }
}

}  // namespace safemerge
