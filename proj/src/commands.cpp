#include "trm/commands.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "trm/diagnostics.hpp"
#include "trm/errors.hpp"
#include "trm/inference.hpp"
#include "trm/posttrain.hpp"
#include "trm/rng.hpp"
#include "trm/run_config.hpp"
#include "trm/training.hpp"

namespace trm {

namespace fs = std::filesystem;

namespace {

ConfigFile load_config(const CommandOptions& options) {
  ConfigFile config = options.config_path.empty()
                          ? ConfigFile::parse_string("", "<defaults>")
                          : ConfigFile::parse_file(options.config_path);
  for (const auto& [key, value] : options.overrides) config.set_dotted(key, value);
  return config;
}

const std::set<std::string> kModelKeys = {
    "model.hidden_dim",  "model.embed_dim",     "model.n_trunk_layers",
    "model.n_heads",     "model.lower_cycles",  "model.higher_cycles",
    "model.supervision_steps", "model.canvas_side", "model.ffn_multiplier",
    "model.embedding_mode",
};

const std::set<std::string> kOptimizerKeys = {
    "optimizer.trunk_lr",           "optimizer.embedding_lr",
    "optimizer.beta1",              "optimizer.beta2",
    "optimizer.eps",                "optimizer.trunk_weight_decay",
    "optimizer.embedding_weight_decay", "optimizer.warmup_steps",
};

std::set<std::string> merge_keys(std::initializer_list<std::set<std::string>> groups) {
  std::set<std::string> merged;
  for (const auto& group : groups) merged.insert(group.begin(), group.end());
  return merged;
}

EmbeddingMode parse_embedding_mode(const std::string& name) {
  if (name == "per_variant") return EmbeddingMode::PerVariant;
  if (name == "explicit") return EmbeddingMode::ExplicitEncoded;
  raise(ErrorCode::ConfigError, "unknown embedding_mode: " + name +
                                    " (expected per_variant or explicit)");
}

EmbeddingInit parse_embedding_init(const std::string& name) {
  if (name == "mean") return EmbeddingInit::Mean;
  if (name == "gaussian") return EmbeddingInit::Gaussian;
  raise(ErrorCode::ConfigError,
        "unknown embedding_init: " + name + " (expected mean or gaussian)");
}

ModelConfig parse_model_config(const ConfigFile& config) {
  ModelConfig model;
  model.hidden_dim = config.get_int("model", "hidden_dim", model.hidden_dim);
  model.embed_dim = config.get_int("model", "embed_dim", model.embed_dim);
  model.n_trunk_layers = config.get_int("model", "n_trunk_layers", model.n_trunk_layers);
  model.n_heads = config.get_int("model", "n_heads", model.n_heads);
  model.lower_cycles = config.get_int("model", "lower_cycles", model.lower_cycles);
  model.higher_cycles = config.get_int("model", "higher_cycles", model.higher_cycles);
  model.supervision_steps = config.get_int("model", "supervision_steps", model.supervision_steps);
  model.canvas_side = config.get_int("model", "canvas_side", model.canvas_side);
  model.ffn_multiplier = config.get_int("model", "ffn_multiplier", model.ffn_multiplier);
  if (config.has("model", "embedding_mode")) {
    model.embedding_mode = parse_embedding_mode(config.get_string("model", "embedding_mode"));
  }
  model.validate();
  return model;
}

OptimizerConfig parse_optimizer_config(const ConfigFile& config, OptimizerConfig defaults) {
  OptimizerConfig opt = defaults;
  opt.trunk_lr = config.get_double("optimizer", "trunk_lr", opt.trunk_lr);
  opt.embedding_lr = config.get_double("optimizer", "embedding_lr", opt.embedding_lr);
  opt.beta1 = config.get_double("optimizer", "beta1", opt.beta1);
  opt.beta2 = config.get_double("optimizer", "beta2", opt.beta2);
  opt.eps = config.get_double("optimizer", "eps", opt.eps);
  opt.trunk_weight_decay =
      config.get_double("optimizer", "trunk_weight_decay", opt.trunk_weight_decay);
  opt.embedding_weight_decay =
      config.get_double("optimizer", "embedding_weight_decay", opt.embedding_weight_decay);
  opt.warmup_steps = config.get_long("optimizer", "warmup_steps", opt.warmup_steps);
  return opt;
}

// Creates the output directory after refusing to reuse an existing one
// without --force; returns the resolved path.
fs::path prepare_out_dir(const std::string& out_dir, bool force) {
  fs::path path(out_dir);
  if (fs::exists(path)) {
    if (!force) {
      raise(ErrorCode::ConfigError,
            "output directory already exists (pass --force to overwrite): " + out_dir);
    }
  } else {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec) raise(ErrorCode::IoError, "cannot create output directory: " + out_dir);
  }
  return path;
}

// Captures the fully resolved config (file + overrides) alongside the run.
void write_provenance(const ConfigFile& config, const fs::path& out_dir) {
  std::ofstream out(out_dir / "config.ini");
  if (!out) raise(ErrorCode::IoError, "cannot write provenance config");
  out << config.serialize();
}

int run_guarded(std::ostream& err, const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

std::vector<size_t> parse_pass_k_list(const std::string& text) {
  std::vector<size_t> ks;
  std::stringstream in(text);
  std::string token;
  while (std::getline(in, token, ',')) {
    size_t used = 0;
    unsigned long k = 0;
    try {
      k = std::stoul(token, &used);
    } catch (const std::logic_error&) {
      raise(ErrorCode::ConfigError, "bad pass_k entry: " + token);
    }
    if (used != token.size() || k == 0) raise(ErrorCode::ConfigError, "bad pass_k entry: " + token);
    ks.push_back(static_cast<size_t>(k));
  }
  if (ks.empty()) raise(ErrorCode::ConfigError, "pass_k list is empty");
  return ks;
}

// Registry task ordinals keyed by task id (variant 0 carries the id).
std::vector<std::string> registry_task_ids(const VariantRegistry& registry) {
  std::vector<std::string> ids(registry.n_tasks());
  for (uint32_t t = 0; t < registry.n_tasks(); ++t) {
    ids[t] = registry.entry(registry.row_index(t, 0)).task_id;
  }
  return ids;
}

int64_t registry_ordinal(const std::vector<std::string>& ids, const std::string& task_id) {
  for (size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] == task_id) return static_cast<int64_t>(t);
  }
  raise(ErrorCode::UnknownTaskId, "task not present in registry: " + task_id);
}

struct ScoreArtifacts {
  std::vector<size_t> ks;
  std::vector<double> scores;
  size_t n_tasks = 0;
};

void write_score_files(const ScoreArtifacts& artifacts, const fs::path& out_dir) {
  std::ofstream csv(out_dir / "results.csv");
  if (!csv) raise(ErrorCode::IoError, "cannot write results.csv");
  csv << "k,pass_at_k\n";
  nlohmann::ordered_json table = nlohmann::ordered_json::object();
  for (size_t i = 0; i < artifacts.ks.size(); ++i) {
    csv << artifacts.ks[i] << ',' << artifacts.scores[i] << '\n';
    table[std::to_string(artifacts.ks[i])] = artifacts.scores[i];
  }
  nlohmann::ordered_json doc;
  doc["n_tasks"] = artifacts.n_tasks;
  doc["pass_at_k"] = table;
  std::ofstream json_out(out_dir / "results.json");
  if (!json_out) raise(ErrorCode::IoError, "cannot write results.json");
  json_out << doc.dump(2) << '\n';
}

}  // namespace

int cmd_pretrain(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    ConfigFile config = load_config(options);
    config.require_known(merge_keys({kModelKeys,
                                     kOptimizerKeys,
                                     {"data.manifest", "run.steps", "run.batch_size",
                                      "run.eval_every", "run.seed", "run.augs_per_task",
                                      "run.fix_background", "run.eval_pass_k", "run.eval_augs",
                                      "run.pass_k_n", "run.out_dir"}}));

    ModelConfig model = parse_model_config(config);
    OptimizerConfig opt = parse_optimizer_config(config, OptimizerConfig{});

    PretrainPlan plan;
    plan.steps = config.get_long("run", "steps");
    plan.batch_size = config.get_int("run", "batch_size", plan.batch_size);
    plan.eval_every = config.get_long("run", "eval_every", plan.eval_every);
    plan.seed = config.get_u64("run", "seed", plan.seed);
    plan.augs_per_task = config.get_int("run", "augs_per_task", plan.augs_per_task);
    plan.fix_background = config.get_bool("run", "fix_background", plan.fix_background);
    plan.eval_pass_k = config.get_bool("run", "eval_pass_k", plan.eval_pass_k);
    plan.eval_augs = config.get_int("run", "eval_augs", plan.eval_augs);
    plan.pass_k_n = config.get_long("run", "pass_k_n", plan.pass_k_n);
    if (plan.steps < 0 || plan.batch_size < 1 || plan.augs_per_task < 1) {
      raise(ErrorCode::ConfigError, "pretrain plan needs steps >= 0, batch_size >= 1, augs_per_task >= 1");
    }

    out << "pretrain plan: steps=" << plan.steps << " batch_size=" << plan.batch_size
        << " trunk_lr=" << opt.trunk_lr << " embedding_lr=" << opt.embedding_lr
        << " augs_per_task=" << plan.augs_per_task << "\n";
    if (options.dry_run) return;

    // All inputs are validated before the output directory is touched, so a
    // bad manifest leaves no partial artifacts behind.
    DataMix mix = load_manifest(config.get_path("data", "manifest"));
    const std::string out_dir = config.get_string("run", "out_dir");

    fs::path dir = prepare_out_dir(out_dir, options.force);
    write_provenance(config, dir);
    MetricsWriter metrics((dir / "metrics.jsonl").string());
    PretrainResult result = pretrain(mix, model, opt, plan, &metrics);

    result.registry.save((dir / "registry.bin").string());
    save_checkpoint((dir / "checkpoint.bin").string(), result.state, result.registry.digest());
    if (!result.records.empty()) {
      const TrainRecord& last = result.records.back();
      out << "final: loss=" << last.loss << " train_exact=" << last.train_exact_accuracy << "\n";
    }
    out << "wrote " << (dir / "checkpoint.bin").string() << "\n";
  });
}

int cmd_posttrain(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    ConfigFile config = load_config(options);
    config.require_known(merge_keys(
        {kOptimizerKeys,
         {"data.challenges", "data.solutions", "strategy.kind", "strategy.staged_fraction",
          "strategy.lora_rank", "strategy.lora_alpha", "posttrain.checkpoint",
          "posttrain.embedding_init", "posttrain.vote_augs", "posttrain.continued_pretrain_steps",
          "posttrain.manifest", "posttrain.registry", "posttrain.continued_batch_size",
          "run.steps", "run.batch_size", "run.eval_every", "run.seed", "run.augs_per_task",
          "run.fix_background", "run.eval_pass_k", "run.eval_augs", "run.out_dir"}}));

    Strategy strategy;
    if (config.has("strategy", "kind")) {
      strategy.kind = parse_strategy_kind(config.get_string("strategy", "kind"));
    }
    strategy.staged_fraction =
        config.get_double("strategy", "staged_fraction", strategy.staged_fraction);
    strategy.lora_rank = config.get_int("strategy", "lora_rank", strategy.lora_rank);
    strategy.lora_alpha = config.get_double("strategy", "lora_alpha", strategy.lora_alpha);
    strategy.validate();

    // Post-training inherits pre-training hyperparameters except the
    // documented deltas: doubled learning rates and a short warmup.
    OptimizerConfig posttrain_defaults;
    posttrain_defaults.trunk_lr = 2e-4;
    posttrain_defaults.embedding_lr = 2e-2;
    posttrain_defaults.warmup_steps = 100;
    OptimizerConfig opt = parse_optimizer_config(config, posttrain_defaults);

    PosttrainPlan plan;
    plan.steps = config.get_long("run", "steps");
    plan.batch_size = config.get_int("run", "batch_size", plan.batch_size);
    plan.augs_per_task = config.get_int("run", "augs_per_task", plan.augs_per_task);
    plan.seed = config.get_u64("run", "seed", plan.seed);
    plan.fix_background = config.get_bool("run", "fix_background", plan.fix_background);
    plan.eval_every = config.get_long("run", "eval_every", plan.eval_every);
    plan.eval_pass_k = config.get_bool("run", "eval_pass_k", plan.eval_pass_k);
    plan.eval_augs = config.get_int("run", "eval_augs", plan.eval_augs);
    plan.embedding_init =
        parse_embedding_init(config.get_string("posttrain", "embedding_init", "mean"));
    const int vote_augs = config.get_int("posttrain", "vote_augs", 32);
    const long continued_steps = config.get_long("posttrain", "continued_pretrain_steps", 0);
    if (plan.steps < 0 || plan.batch_size < 1 || plan.augs_per_task < 1 || vote_augs < 1 ||
        continued_steps < 0) {
      raise(ErrorCode::ConfigError, "posttrain plan needs nonnegative steps and positive sizes");
    }

    out << "posttrain plan: strategy=" << strategy_kind_name(strategy.kind)
        << " steps=" << plan.steps << " batch_size=" << plan.batch_size
        << " trunk_lr=" << opt.trunk_lr << " embedding_lr=" << opt.embedding_lr
        << " augs_per_task=" << plan.augs_per_task << "\n";
    if (options.dry_run) return;

    Checkpoint checkpoint = load_checkpoint(config.get_path("posttrain", "checkpoint"));
    std::optional<std::string> solutions;
    if (config.has("data", "solutions")) solutions = config.get_path("data", "solutions");
    Split test_tasks = load_challenges(config.get_path("data", "challenges"), solutions);
    if (test_tasks.tasks.empty()) {
      raise(ErrorCode::TooFewTasks, "challenges file holds no tasks");
    }

    if (continued_steps > 0) {
      VariantRegistry original = VariantRegistry::load(config.get_path("posttrain", "registry"));
      DataMix original_mix = load_manifest(config.get_path("posttrain", "manifest"));
      const int continued_batch =
          config.get_int("posttrain", "continued_batch_size", plan.batch_size);
      continue_pretraining(checkpoint.state, checkpoint.registry_digest, original, original_mix,
                           opt, continued_steps, continued_batch, plan.seed);
      out << "continued pre-training for " << continued_steps << " steps\n";
    }

    const std::string out_dir = config.get_string("run", "out_dir");
    fs::path dir = prepare_out_dir(out_dir, options.force);
    write_provenance(config, dir);
    MetricsWriter metrics((dir / "metrics.jsonl").string());
    PosttrainResult result = posttrain(checkpoint, test_tasks, strategy, opt, plan, &metrics);

    result.registry.save((dir / "registry.bin").string());
    save_checkpoint((dir / "checkpoint_adapted.bin").string(), result.state,
                    result.registry.digest(),
                    result.adapters.has_value() ? &*result.adapters : nullptr);

    // Predict + vote on every test input and write the submission.
    const LoraAdapters* adapters = result.adapters.has_value() ? &*result.adapters : nullptr;
    std::vector<std::pair<std::string, std::vector<VoteResult>>> submission;
    std::vector<ScoredTask> scored;
    bool scorable = true;
    for (size_t t = 0; t < test_tasks.tasks.size(); ++t) {
      const Task& task = test_tasks.tasks[t];
      PredictionSet set =
          predict_augmented(result.state, task, static_cast<int64_t>(t), result.registry,
                            vote_augs, mix_seed(plan.seed, fnv1a64(task.task_id)), adapters);
      ScoredTask entry;
      entry.task_id = task.task_id;
      for (size_t e = 0; e < set.examples.size(); ++e) {
        entry.votes.push_back(vote(set.examples[e]));
        entry.solutions.push_back(task.test_pairs[e].output);
        if (!task.test_pairs[e].has_output()) scorable = false;
      }
      submission.emplace_back(task.task_id, entry.votes);
      scored.push_back(std::move(entry));
    }
    write_submission((dir / "submission.json").string(), submission);
    out << "wrote " << (dir / "submission.json").string() << "\n";
    if (scorable) {
      out << "pass@1 = " << score_pass_at_k(scored, 1)
          << "  pass@2 = " << score_pass_at_k(scored, 2) << "\n";
    }
  });
}

int cmd_evaluate(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    ConfigFile config = load_config(options);
    config.require_known({"data.challenges", "data.solutions", "evaluate.checkpoint",
                          "evaluate.registry", "evaluate.stub", "evaluate.n_augs",
                          "evaluate.pass_k", "evaluate.seed", "run.out_dir"});

    const int n_augs = config.get_int("evaluate", "n_augs", 32);
    if (n_augs < 1) raise(ErrorCode::ConfigError, "n_augs must be >= 1");
    const uint64_t seed = config.get_u64("evaluate", "seed", 0);
    std::vector<size_t> ks;
    if (config.has("evaluate", "pass_k")) {
      ks = parse_pass_k_list(config.get_string("evaluate", "pass_k"));
    } else {
      ks = {1, 2};
      if (static_cast<size_t>(n_augs) > 2) ks.push_back(static_cast<size_t>(n_augs));
    }
    const bool stub = config.get_string("evaluate", "stub", "") == "identity";
    if (config.has("evaluate", "stub") && !stub) {
      raise(ErrorCode::ConfigError, "unknown evaluate.stub (only 'identity' is recognized)");
    }

    std::ostringstream k_list;
    for (size_t i = 0; i < ks.size(); ++i) k_list << (i > 0 ? "," : "") << ks[i];
    out << "evaluate plan: n_augs=" << n_augs << " pass_k=" << k_list.str()
        << (stub ? " stub=identity" : "") << "\n";
    if (options.dry_run) return;

    std::optional<std::string> solutions;
    if (config.has("data", "solutions")) solutions = config.get_path("data", "solutions");
    Split split = load_challenges(config.get_path("data", "challenges"), solutions);
    if (split.tasks.empty()) raise(ErrorCode::TooFewTasks, "challenges file holds no tasks");

    std::optional<Checkpoint> checkpoint;
    std::optional<VariantRegistry> registry;
    std::vector<std::string> registry_ids;
    if (!stub) {
      checkpoint = load_checkpoint(config.get_path("evaluate", "checkpoint"));
      registry = VariantRegistry::load(config.get_path("evaluate", "registry"));
      registry_ids = registry_task_ids(*registry);
    }

    std::vector<ScoredTask> scored;
    for (size_t t = 0; t < split.tasks.size(); ++t) {
      const Task& task = split.tasks[t];
      PredictionSet set;
      if (stub) {
        const PredictFn echo = [](const BatchItem& item) {
          return TokenPrediction{item.input.tokens, 1.0};
        };
        set = predict_augmented(echo, task, static_cast<int64_t>(t), {Augmentation{}}, {0},
                                kMaxGridSide);
      } else {
        const int64_t ordinal = registry_ordinal(registry_ids, task.task_id);
        const LoraAdapters* adapters =
            checkpoint->adapters.has_value() ? &*checkpoint->adapters : nullptr;
        set = predict_augmented(checkpoint->state, task, ordinal, *registry, n_augs,
                                mix_seed(seed, fnv1a64(task.task_id)), adapters);
      }
      ScoredTask entry;
      entry.task_id = task.task_id;
      for (size_t e = 0; e < set.examples.size(); ++e) {
        entry.votes.push_back(vote(set.examples[e]));
        entry.solutions.push_back(task.test_pairs[e].output);
      }
      scored.push_back(std::move(entry));
    }

    ScoreArtifacts artifacts;
    artifacts.ks = ks;
    artifacts.n_tasks = split.tasks.size();
    for (size_t k : ks) {
      artifacts.scores.push_back(score_pass_at_k(scored, k));
      out << "pass@" << k << " = " << artifacts.scores.back() << "\n";
    }

    fs::path dir = prepare_out_dir(config.get_string("run", "out_dir"), options.force);
    write_provenance(config, dir);
    write_score_files(artifacts, dir);
    out << "wrote " << (dir / "results.json").string() << "\n";
  });
}

int cmd_plan(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    ConfigFile config = load_config(options);
    config.require_known({"budget.flops_ratio", "budget.accelerator_ratio", "budget.wall_hours",
                          "budget.reserved_inference_hours", "budget.batch_size",
                          "budget.measured_step_seconds"});

    BudgetPlan plan;
    plan.flops_ratio = config.get_double("budget", "flops_ratio", plan.flops_ratio);
    plan.accelerator_ratio =
        config.get_double("budget", "accelerator_ratio", plan.accelerator_ratio);
    plan.wall_hours = config.get_double("budget", "wall_hours", plan.wall_hours);
    plan.reserved_inference_hours =
        config.get_double("budget", "reserved_inference_hours", plan.reserved_inference_hours);
    plan.batch_size = config.get_int("budget", "batch_size", plan.batch_size);
    plan.measured_step_seconds =
        config.get_double("budget", "measured_step_seconds", plan.measured_step_seconds);

    const ComputeFraction fraction = compute_fraction(plan);
    plan_budget(plan);
    out << "compute_fraction=" << fraction.numerator << "/" << fraction.denominator << "\n";
    out << "planned_steps=" << plan.planned_steps << " batch_size=" << plan.batch_size << "\n";
  });
}

}  // namespace trm
