// Command-line frontend for the safety-aware model-merging toolkit.
//
// Subcommands: gen-data, train-toy, merge, optimize, eval, inspect.
// Exit codes: 0 success, 2 validation error (bad flags/inputs),
// 3 I/O error, 4 optimizer non-convergence.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "safemerge/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace safemerge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;
constexpr int kExitNoConvergence = 4;

struct GlobalFlags {
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  double alpha = 0.3;
  std::size_t k = 1000;
  int steps = 100;
  int threads = 0;
};

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for hashing");
  std::uint64_t h = 1469598103934665603ULL;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

Checkpoint load_model(const fs::path& path) { return load_checkpoint(path); }

ToyLMConfig config_of(const Checkpoint& ckpt) {
  return ToyLMConfig::from_metadata(ckpt.metadata);
}

// Splits a combined eval file back into its safety and expert partitions.
std::pair<QADataset, QADataset> split_by_kind(const QADataset& ds) {
  QADataset safety, expert;
  for (const QAPair& p : ds.pairs) {
    (p.kind == QAKind::kSafety ? safety : expert).pairs.push_back(p);
  }
  return {std::move(safety), std::move(expert)};
}

int cmd_gen_data(const GlobalFlags& g, int modulus, double eval_frac) {
  fs::create_directories(g.out_dir);
  auto [aligned, misaligned] = gen_toy_safety_data(g.k, g.seed);
  ModArithSpec spec;
  spec.modulus = modulus;
  QADataset expert = gen_toy_expert_data(spec, g.k, g.seed);

  ToyDatasets split = split_toy_datasets(aligned, misaligned, expert, eval_frac, g.seed);
  QADataset eval_combined = split.safety_aligned_eval;
  eval_combined.append(split.expert_eval);

  fs::path dir = g.out_dir;
  save_qa_jsonl(aligned, dir / "safety_aligned.jsonl");
  save_qa_jsonl(misaligned, dir / "safety_misaligned.jsonl");
  save_qa_jsonl(expert, dir / "expert.jsonl");
  save_qa_jsonl(eval_combined, dir / "eval.jsonl");
  std::cout << "wrote " << aligned.size() << " safety-aligned, " << misaligned.size()
            << " safety-misaligned, " << expert.size() << " expert pairs and "
            << eval_combined.size() << " held-out eval pairs to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_train_toy(const GlobalFlags& g, const std::string& data_dir, double eval_frac,
                  const ToyLMConfig& lm, TrainParams base_hp, TrainParams expert_hp) {
  lm.validate();
  eval_threads() = g.threads > 0 ? g.threads : eval_threads();
  fs::path dir = data_dir.empty() ? fs::path(g.out_dir) : fs::path(data_dir);
  QADataset aligned = load_qa_jsonl(dir / "safety_aligned.jsonl", lm.vocab_size);
  QADataset misaligned = load_qa_jsonl(dir / "safety_misaligned.jsonl", lm.vocab_size);
  QADataset expert_pool = load_qa_jsonl(dir / "expert.jsonl", lm.vocab_size);
  ToyDatasets data = split_toy_datasets(aligned, misaligned, expert_pool, eval_frac, g.seed);

  PipelineConfig cfg;
  cfg.lm = lm;
  cfg.seed = g.seed;
  cfg.base_train = base_hp;
  cfg.expert_train = expert_hp;

  Checkpoint base = train_toy_base(cfg, data);
  Checkpoint expert = train_toy_expert(cfg, data, base);
  fs::create_directories(g.out_dir);
  fs::path base_path = fs::path(g.out_dir) / "base.safetensors";
  fs::path expert_path = fs::path(g.out_dir) / "expert.safetensors";
  save_checkpoint(base, base_path);
  save_checkpoint(expert, expert_path);
  std::cout << "base: " << base_path.string() << " (" << base.param_count() << " params)\n"
            << "expert: " << expert_path.string() << " (" << expert.param_count()
            << " params)\n";
  return kExitOk;
}

int cmd_merge(const GlobalFlags& g, const std::string& base_path,
              const std::vector<std::string>& expert_paths, const std::string& recipe_path,
              std::string out_path) {
  Checkpoint base = load_model(base_path);
  std::vector<Checkpoint> experts;
  for (const std::string& p : expert_paths) experts.push_back(load_model(p));
  std::vector<const Checkpoint*> ptrs;
  for (const Checkpoint& e : experts) ptrs.push_back(&e);

  MergeRecipe recipe = MergeRecipe::from_json(read_json_file(recipe_path));
  recipe.validate(ptrs.size());
  Checkpoint merged = apply_recipe(base, ptrs, recipe);
  merged.metadata = base.metadata;

  if (out_path.empty()) out_path = (fs::path(g.out_dir) / "merged.safetensors").string();
  fs::create_directories(fs::path(out_path).parent_path().empty()
                             ? fs::path(".")
                             : fs::path(out_path).parent_path());
  save_checkpoint(merged, out_path);
  std::cout << "method: " << to_string(recipe.method) << "\n"
            << "experts: " << ptrs.size() << "\n"
            << "params: " << merged.param_count() << "\n"
            << "output: " << out_path << "\n"
            << "hash: " << std::hex << file_hash(out_path) << std::dec << "\n";
  return kExitOk;
}

int cmd_optimize(const GlobalFlags& g, const std::string& base_path,
                 const std::vector<std::string>& expert_paths, const std::string& method_str,
                 const std::string& strategy, const std::string& data_mode,
                 const std::string& safety_path, const std::string& expert_data_path,
                 std::size_t objective_batch, int population) {
  eval_threads() = g.threads > 0 ? g.threads : eval_threads();
  Checkpoint base = load_model(base_path);
  ToyLMConfig cfg = config_of(base);
  std::vector<Checkpoint> experts;
  for (const std::string& p : expert_paths) experts.push_back(load_model(p));
  std::vector<const Checkpoint*> ptrs;
  for (const Checkpoint& e : experts) ptrs.push_back(&e);

  MergeMethod method = merge_method_from_string(method_str);
  if (data_mode != "expert" && data_mode != "expert+safety") {
    throw ValidationError("--data must be 'expert' or 'expert+safety'");
  }
  QADataset d_expert = load_qa_jsonl(expert_data_path, cfg.vocab_size);
  QADataset d_safety;
  if (data_mode == "expert+safety") {
    if (safety_path.empty()) {
      throw ValidationError("--safety-data is required with --data expert+safety");
    }
    d_safety = load_qa_jsonl(safety_path, cfg.vocab_size);
  } else {
    // Expert-only objective: the safety term is replaced by the expert loss,
    // reducing the criterion to the domain loss alone up to scale.
    d_safety = d_expert;
  }

  fs::create_directories(g.out_dir);
  fs::path dir = g.out_dir;
  MergeRecipe best;
  Checkpoint merged;
  double best_value = 0.0;
  int exit_code = kExitOk;

  if (strategy == "lm-cocktail") {
    if (method != MergeMethod::kTaskArithmetic && method != MergeMethod::kLinearSoup) {
      throw ValidationError("lm-cocktail produces plain weights; use --method "
                            "task-arithmetic or linear-soup");
    }
    QADataset weighting = d_expert;
    if (data_mode == "expert+safety") weighting.append(d_safety);
    best.method = method;
    best.seed = g.seed;
    best.lambdas = lm_cocktail_weights(ptrs, cfg, weighting);
    merged = apply_recipe(base, ptrs, best);
    best_value = merge_loss(merged, cfg, d_safety, d_expert, g.alpha).l_merge;
  } else if (strategy == "evomm") {
    EvommOptions options;
    options.steps = g.steps;
    options.objective_batch = objective_batch;
    options.population = population;
    EvommResult r = evomm_optimize(base, ptrs, method, cfg, d_safety, d_expert, g.alpha,
                                   g.seed, options);
    best = r.recipe;
    merged = std::move(r.merged);
    best_value = r.report.l_merge;
    std::string csv = "generation,best_f,mean_f,sigma\n";
    for (const CmaHistoryRow& row : r.history) {
      csv += std::to_string(row.generation) + "," + std::to_string(row.best_f) + "," +
             std::to_string(row.mean_f) + "," + std::to_string(row.sigma) + "\n";
    }
    write_text(dir / "history.csv", csv);
    int pop = r.history.empty() ? 0
                                : population > 0 ? population
                                                 : cma_default_population(
                                                       static_cast<int>(best.lambdas.size() +
                                                                        best.hyper.size()));
    long total = static_cast<long>(r.history.size()) * std::max(1, pop);
    if (total > 0 && 2L * r.discarded > total) {
      std::cerr << "warning: " << r.discarded << " of " << total
                << " candidate evaluations were non-finite; treat the result as "
                   "non-converged\n";
      exit_code = kExitNoConvergence;
    }
  } else if (strategy == "grid") {
    GridResult r = grid_search(
        base, ptrs, method,
        [&](const Checkpoint& m, const MergeRecipe&) {
          return merge_loss(m, cfg, d_safety, d_expert, g.alpha).l_merge;
        },
        {}, g.seed);
    if (!std::isfinite(r.best_value)) {
      std::cerr << "warning: no finite grid point found\n";
      exit_code = kExitNoConvergence;
    }
    best = r.best;
    best_value = r.best_value;
    merged = apply_recipe(base, ptrs, best);
    std::string csv;
    if (!r.table.empty()) {
      for (std::size_t i = 0; i < r.table.size(); ++i) {
        if (i == 0) {
          csv += "point,l_merge\n";
        }
        std::string point;
        for (double v : r.table[i].point) {
          if (!point.empty()) point += ";";
          point += std::to_string(v);
        }
        csv += point + "," + std::to_string(r.table[i].value) + "\n";
      }
    }
    write_text(dir / "grid.csv", csv);
  } else {
    throw ValidationError("--strategy must be 'grid', 'evomm' or 'lm-cocktail'");
  }

  merged.metadata = base.metadata;
  save_checkpoint(merged, dir / "merged.safetensors");
  write_text(dir / "recipe.json", best.to_json().dump(2) + "\n");
  json report = {{"strategy", strategy},
                 {"method", to_string(best.method)},
                 {"data", data_mode},
                 {"alpha", g.alpha},
                 {"l_merge", best_value}};
  write_text(dir / "report.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return exit_code;
}

int cmd_eval(const GlobalFlags& g, const std::string& model_path,
             const std::string& eval_data_path, int modulus, std::string out_path) {
  eval_threads() = g.threads > 0 ? g.threads : eval_threads();
  Checkpoint ckpt = load_model(model_path);
  ToyLMConfig cfg = config_of(ckpt);
  auto [safety, expert] = split_by_kind(load_qa_jsonl(eval_data_path, cfg.vocab_size));
  if (safety.empty() || expert.empty()) {
    throw ValidationError("eval data must contain both safety and expert pairs");
  }

  EvalReport r;
  LossReport loss = merge_loss(ckpt, cfg, safety, expert, g.alpha);
  r.l_safety = loss.l_safety;
  r.l_expert = loss.l_expert;
  r.l_merge = loss.l_merge;
  r.alpha = loss.alpha;
  r.alignment = refusal_rate(ckpt, cfg, eval_prompts(safety), first_token_refusal_judge());
  r.accuracy = mc_accuracy(ckpt, cfg, expert_mc_items(expert, modulus));

  std::string text = r.to_json().dump(2) + "\n";
  if (out_path.empty()) out_path = (fs::path(g.out_dir) / "report.json").string();
  write_text(out_path, text);
  std::cout << text;
  return kExitOk;
}

int cmd_inspect(const std::string& model_path) {
  Checkpoint ckpt = load_model(model_path);
  std::cout << "tensors: " << ckpt.tensors.size() << "\n"
            << "params: " << ckpt.param_count() << "\n";
  for (const auto& [key, value] : ckpt.metadata) {
    std::cout << "meta " << key << " = " << value << "\n";
  }
  for (const auto& [name, tensor] : ckpt.tensors) {
    std::cout << name << " [";
    for (std::size_t i = 0; i < tensor.shape.size(); ++i) {
      std::cout << (i ? ", " : "") << tensor.shape[i];
    }
    std::cout << "] F32\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Safety-aware model merging toolkit"};
  app.require_subcommand(1);

  GlobalFlags g;
  app.add_option("--seed", g.seed, "master random seed")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();
  app.add_option("--alpha", g.alpha, "expert-loss weight in the merge objective")
      ->capture_default_str();
  app.add_option("--k", g.k, "samples per generated dataset")->capture_default_str();
  app.add_option("--steps", g.steps, "optimizer generations")->capture_default_str();
  app.add_option("--threads", g.threads, "evaluation worker cap (0 = hardware)")
      ->capture_default_str();

  // gen-data
  int gen_modulus = 8;
  double gen_eval_frac = 0.1;
  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic toy datasets");
  gen->add_option("--modulus", gen_modulus, "modular-arithmetic domain modulus")
      ->capture_default_str();
  gen->add_option("--eval-frac", gen_eval_frac, "held-out evaluation fraction")
      ->capture_default_str();

  // train-toy
  std::string train_data_dir;
  double train_eval_frac = 0.1;
  PipelineConfig train_defaults;
  ToyLMConfig lm = train_defaults.lm;
  TrainParams base_hp = train_defaults.base_train;
  TrainParams expert_hp = train_defaults.expert_train;
  CLI::App* train_cmd = app.add_subcommand("train-toy", "train the base and expert models");
  train_cmd->add_option("--data-dir", train_data_dir,
                        "directory with gen-data outputs (default: --out-dir)");
  train_cmd->add_option("--eval-frac", train_eval_frac, "held-out evaluation fraction")
      ->capture_default_str();
  train_cmd->add_option("--d-model", lm.d_model, "model width")->capture_default_str();
  train_cmd->add_option("--n-layers", lm.n_layers, "transformer blocks")->capture_default_str();
  train_cmd->add_option("--n-heads", lm.n_heads, "attention heads")->capture_default_str();
  train_cmd->add_option("--lr", base_hp.lr, "base training learning rate")
      ->capture_default_str();
  train_cmd->add_option("--expert-lr", expert_hp.lr, "expert fine-tuning learning rate")
      ->capture_default_str();
  train_cmd->add_option("--base-steps", base_hp.steps, "base training steps")
      ->capture_default_str();
  train_cmd->add_option("--expert-steps", expert_hp.steps, "expert fine-tuning steps")
      ->capture_default_str();
  train_cmd->add_option("--batch", base_hp.batch, "batch size for both phases")
      ->capture_default_str();

  // merge
  std::string merge_base, merge_recipe, merge_out;
  std::vector<std::string> merge_experts;
  CLI::App* merge_cmd = app.add_subcommand("merge", "apply a merge recipe");
  merge_cmd->add_option("--base", merge_base, "base checkpoint")->required();
  merge_cmd->add_option("--expert", merge_experts, "expert checkpoint (repeatable)")
      ->required();
  merge_cmd->add_option("--recipe", merge_recipe, "merge recipe JSON file")->required();
  merge_cmd->add_option("--out", merge_out, "output path (default: <out-dir>/merged.safetensors)");

  // optimize
  std::string opt_base, opt_method = "ties", opt_strategy = "evomm", opt_data = "expert+safety";
  std::string opt_safety_data, opt_expert_data;
  std::vector<std::string> opt_experts;
  std::size_t opt_batch = 0;
  int opt_population = 0;
  CLI::App* opt_cmd = app.add_subcommand("optimize", "search merge weights against a criterion");
  opt_cmd->add_option("--base", opt_base, "base checkpoint")->required();
  opt_cmd->add_option("--expert", opt_experts, "expert checkpoint (repeatable)")->required();
  opt_cmd->add_option("--method", opt_method,
                      "task-arithmetic | linear-soup | slerp | ties | dare | dare-ties")
      ->capture_default_str();
  opt_cmd->add_option("--strategy", opt_strategy, "grid | evomm | lm-cocktail")
      ->capture_default_str();
  opt_cmd->add_option("--data", opt_data, "objective data: expert | expert+safety")
      ->capture_default_str();
  opt_cmd->add_option("--safety-data", opt_safety_data, "safety dataset JSONL");
  opt_cmd->add_option("--expert-data", opt_expert_data, "expert dataset JSONL")->required();
  opt_cmd->add_option("--objective-batch", opt_batch,
                      "objective subsample size per dataset (0 = full)")
      ->capture_default_str();
  opt_cmd->add_option("--population", opt_population, "CMA-ES population (0 = default formula)")
      ->capture_default_str();

  // eval
  std::string eval_model, eval_data, eval_out;
  int eval_modulus = 8;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
  eval_cmd->add_option("--model", eval_model, "checkpoint to evaluate")->required();
  eval_cmd->add_option("--eval-data", eval_data, "held-out eval JSONL (mixed kinds)")
      ->required();
  eval_cmd->add_option("--modulus", eval_modulus, "expert domain modulus")
      ->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "report path (default: <out-dir>/report.json)");

  // inspect
  std::string inspect_model;
  CLI::App* inspect_cmd = app.add_subcommand("inspect", "print a checkpoint's schema");
  inspect_cmd->add_option("--model", inspect_model, "checkpoint to inspect")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(g, gen_modulus, gen_eval_frac);
    if (train_cmd->parsed()) {
      expert_hp.batch = base_hp.batch;
      return cmd_train_toy(g, train_data_dir, train_eval_frac, lm, base_hp, expert_hp);
    }
    if (merge_cmd->parsed()) return cmd_merge(g, merge_base, merge_experts, merge_recipe, merge_out);
    if (opt_cmd->parsed()) {
      return cmd_optimize(g, opt_base, opt_experts, opt_method, opt_strategy, opt_data,
                          opt_safety_data, opt_expert_data, opt_batch, opt_population);
    }
    if (eval_cmd->parsed()) return cmd_eval(g, eval_model, eval_data, eval_modulus, eval_out);
    if (inspect_cmd->parsed()) return cmd_inspect(inspect_model);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitOk;
}
