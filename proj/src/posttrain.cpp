#include "trm/posttrain.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

namespace trm {

void Strategy::validate() const {
  if (kind == StrategyKind::Staged) {
    if (!(staged_fraction > 0.0 && staged_fraction < 1.0)) {
      raise(ErrorCode::StrategyConfigError, "staged_fraction must lie in (0, 1)");
    }
  }
  if (kind == StrategyKind::Lora) {
    if (lora_rank < 1) raise(ErrorCode::StrategyConfigError, "lora_rank must be >= 1");
    if (lora_alpha <= 0.0) raise(ErrorCode::StrategyConfigError, "lora_alpha must be > 0");
  }
}

long Strategy::staged_boundary(long total_steps) const {
  return static_cast<long>(staged_fraction * static_cast<double>(total_steps));
}

StrategyKind parse_strategy_kind(const std::string& name) {
  if (name == "full") return StrategyKind::Full;
  if (name == "embeddings_only") return StrategyKind::EmbeddingsOnly;
  if (name == "staged") return StrategyKind::Staged;
  if (name == "lora") return StrategyKind::Lora;
  raise(ErrorCode::StrategyConfigError, "unknown strategy: " + name);
}

const char* strategy_kind_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::Full: return "full";
    case StrategyKind::EmbeddingsOnly: return "embeddings_only";
    case StrategyKind::Staged: return "staged";
    case StrategyKind::Lora: return "lora";
  }
  return "unknown";
}

long plan_budget(BudgetPlan& plan) {
  if (plan.wall_hours <= 0.0) raise(ErrorCode::ConfigError, "wall_hours must be > 0");
  if (plan.reserved_inference_hours < 0.0) {
    raise(ErrorCode::ConfigError, "reserved_inference_hours must be >= 0");
  }
  if (plan.measured_step_seconds <= 0.0) {
    raise(ErrorCode::ConfigError, "measured_step_seconds must be > 0");
  }
  if (plan.batch_size < 1) raise(ErrorCode::ConfigError, "batch_size must be >= 1");
  if (plan.reserved_inference_hours >= plan.wall_hours) {
    raise(ErrorCode::BudgetExhausted, "reserved inference time consumes the whole wall budget");
  }
  const uint64_t available_us = static_cast<uint64_t>(
      std::llround((plan.wall_hours - plan.reserved_inference_hours) * 3600.0 * 1e6));
  const uint64_t step_us = static_cast<uint64_t>(std::llround(plan.measured_step_seconds * 1e6));
  if (step_us == 0) raise(ErrorCode::ConfigError, "measured_step_seconds rounds to zero");
  plan.planned_steps = static_cast<long>(available_us / step_us);
  return plan.planned_steps;
}

ComputeFraction compute_fraction(const BudgetPlan& plan) {
  if (plan.flops_ratio <= 0.0 || plan.accelerator_ratio <= 0.0) {
    raise(ErrorCode::ConfigError, "compute ratios must be > 0");
  }
  // Take each ratio at three-decimal precision so common values stay exact:
  // fraction = 10^6 / (round(1000*f) * round(1000*a)), reduced.
  const uint64_t f = static_cast<uint64_t>(std::llround(plan.flops_ratio * 1000.0));
  const uint64_t a = static_cast<uint64_t>(std::llround(plan.accelerator_ratio * 1000.0));
  ComputeFraction frac;
  frac.numerator = 1000000;
  frac.denominator = f * a;
  const uint64_t g = std::gcd(frac.numerator, frac.denominator);
  frac.numerator /= g;
  frac.denominator /= g;
  return frac;
}

namespace {

TrainableFilter filter_for(const Strategy& strategy, long step, long total_steps) {
  TrainableFilter filter;
  switch (strategy.kind) {
    case StrategyKind::Full:
      break;  // everything trainable
    case StrategyKind::EmbeddingsOnly:
      filter.trunk = false;
      filter.lora = false;
      break;
    case StrategyKind::Staged:
      if (step <= strategy.staged_boundary(total_steps)) {
        filter.trunk = false;
        filter.lora = false;
      }
      break;
    case StrategyKind::Lora:
      filter.trunk = false;
      break;
  }
  return filter;
}

}  // namespace

PosttrainResult posttrain(const Checkpoint& checkpoint, const Split& test_tasks,
                          const Strategy& strategy, const OptimizerConfig& opt_config,
                          const PosttrainPlan& plan, MetricsWriter* metrics) {
  strategy.validate();
  if (test_tasks.tasks.empty()) raise(ErrorCode::TooFewTasks, "post-training needs >= 1 task");
  for (const Task& task : test_tasks.tasks) {
    if (task.train_pairs.empty()) {
      raise(ErrorCode::ConfigError, "task " + task.task_id + " has no train pairs");
    }
  }
  const ModelConfig& config = checkpoint.state.config;

  PosttrainResult result;
  result.registry = build_registry(test_tasks, static_cast<uint32_t>(plan.augs_per_task),
                                   mix_seed(plan.seed, fnv1a64("posttrain-registry")),
                                   plan.fix_background, config.canvas_side);
  const uint64_t rows = config.embedding_mode == EmbeddingMode::PerVariant
                            ? result.registry.size()
                            : test_tasks.tasks.size();
  result.state = checkpoint.state;
  result.state.task_embeddings = init_new_task_embeddings(
      checkpoint.state.task_embeddings, rows, plan.embedding_init, plan.seed);
  if (strategy.kind == StrategyKind::Lora) {
    result.adapters = init_lora_adapters<float>(config, strategy.lora_rank,
                                                static_cast<float>(strategy.lora_alpha), plan.seed);
  }
  LoraAdapters* adapters = result.adapters ? &*result.adapters : nullptr;

  // Train pairs only; the tasks' test pairs stay held out for evaluation.
  DataMix mix;
  mix.entries.push_back(MixEntry{test_tasks, true, false});

  OptimizerState<float> opt;
  opt.config = opt_config;
  const std::vector<BatchItem> eval_items = make_eval_items(result.registry, mix, config.canvas_side);

  long step = 0;
  uint64_t epoch = 0;
  while (step < plan.steps) {
    const uint64_t epoch_seed = mix_seed(plan.seed, fnv1a64("posttrain-epoch") ^ epoch);
    for (const Batch& batch : sample_epoch(result.registry, mix, plan.batch_size, epoch_seed,
                                           config.canvas_side)) {
      const TrainableFilter filter = filter_for(strategy, step + 1, plan.steps);
      GradMap<float> grads;
      const BatchStats<float> stats =
          compute_gradients<float>(result.state, adapters, filter, batch, grads);
      optimizer_step(opt, result.state, adapters, filter, grads);
      ++step;

      TrainRecord record;
      record.step = step;
      record.loss = static_cast<double>(stats.loss.total);
      record.cell_loss = static_cast<double>(stats.loss.cell);
      record.halt_loss = static_cast<double>(stats.loss.halt);
      record.train_exact_accuracy = stats.exact_fraction();
      const double warm = opt_config.warmup_factor(step);
      record.lr_trunk = opt_config.trunk_lr * warm;
      record.lr_embedding = opt_config.embedding_lr * warm;
      const bool eval_now =
          plan.eval_every > 0 && (step % plan.eval_every == 0 || step == plan.steps);
      if (eval_now && !eval_items.empty()) {
        // Adapter-aware exact accuracy over the held-out test pairs.
        ModelRunner<float> runner(result.state, adapters, TrainableFilter{});
        size_t exact = 0;
        for (const BatchItem& item : eval_items) {
          RunRequest<float> req;
          req.item = &item;
          req.with_loss = true;
          if (runner.run(req).final_step().exact_match) ++exact;
        }
        record.eval_exact_accuracy = static_cast<double>(exact) / eval_items.size();
      }
      if (metrics != nullptr) metrics->write(record);
      result.records.push_back(std::move(record));
      if (step >= plan.steps) break;
    }
    ++epoch;
  }
  return result;
}

void continue_pretraining(ModelState& state, uint64_t checkpoint_registry_digest,
                          const VariantRegistry& original_registry, const DataMix& original_mix,
                          const OptimizerConfig& opt_config, long steps, int batch_size,
                          uint64_t seed) {
  if (checkpoint_registry_digest == 0) {
    raise(ErrorCode::ContinuedPretrainMappingLost,
          "checkpoint carries no registry digest; task-to-embedding mapping unknown");
  }
  if (original_registry.digest() != checkpoint_registry_digest) {
    raise(ErrorCode::ContinuedPretrainMappingLost,
          "registry digest does not match the checkpoint; strict continued pre-training "
          "is not possible");
  }
  const uint64_t expected_rows = state.config.embedding_mode == EmbeddingMode::PerVariant
                                     ? original_registry.size()
                                     : original_mix.task_count();
  if (static_cast<uint64_t>(state.embedding_rows()) != expected_rows) {
    raise(ErrorCode::ContinuedPretrainMappingLost, "embedding row count does not match registry");
  }
  OptimizerState<float> opt;
  opt.config = opt_config;
  long step = 0;
  uint64_t epoch = 0;
  while (step < steps) {
    const uint64_t epoch_seed = mix_seed(seed, fnv1a64("continued-pretrain-epoch") ^ epoch);
    for (const Batch& batch : sample_epoch(original_registry, original_mix, batch_size, epoch_seed,
                                           state.config.canvas_side)) {
      GradMap<float> grads;
      compute_gradients<float>(state, nullptr, TrainableFilter{}, batch, grads);
      optimizer_step<float>(opt, state, nullptr, TrainableFilter{}, grads);
      ++step;
      if (step >= steps) break;
    }
    ++epoch;
  }
}

namespace {

uint64_t hash_tensor(uint64_t h, const Mat<float>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    uint32_t bits;
    std::memcpy(&bits, &m.data()[i], sizeof(bits));
    uint8_t bytes[4] = {static_cast<uint8_t>(bits & 0xff), static_cast<uint8_t>((bits >> 8) & 0xff),
                        static_cast<uint8_t>((bits >> 16) & 0xff),
                        static_cast<uint8_t>((bits >> 24) & 0xff)};
    h = fnv1a64(bytes, sizeof(bytes), h);
  }
  return h;
}

}  // namespace

uint64_t checksum_group(const ModelState& state, ParamGroup group) {
  uint64_t h = 0xcbf29ce484222325ull;
  visit_params(state, [&](const std::string&, const Mat<float>& m, ParamGroup g) {
    if (g == group) h = hash_tensor(h, m);
  });
  return h;
}

uint64_t checksum_adapters(const LoraAdapters& adapters) {
  uint64_t h = 0xcbf29ce484222325ull;
  visit_lora_params(adapters, [&](const std::string&, const Mat<float>& m, ParamGroup) {
    h = hash_tensor(h, m);
  });
  return h;
}

}  // namespace trm
