#include "trm/training.hpp"

#include <algorithm>

#include <json.hpp>

#include "trm/diagnostics.hpp"
#include "trm/inference.hpp"

namespace trm {

using ordered_json = nlohmann::ordered_json;

MetricsWriter::MetricsWriter(const std::string& path) : out_(path) {
  if (!out_) raise(ErrorCode::IoError, "cannot open metrics stream: " + path);
}

void MetricsWriter::write(const TrainRecord& record) {
  out_ << train_record_to_json(record) << '\n';
  out_.flush();
  if (!out_) raise(ErrorCode::IoError, "metrics write failed");
}

std::string train_record_to_json(const TrainRecord& record) {
  ordered_json j;
  j["step"] = record.step;
  j["loss"] = record.loss;
  j["cell_loss"] = record.cell_loss;
  j["halt_loss"] = record.halt_loss;
  j["train_exact_accuracy"] = record.train_exact_accuracy;
  j["lr_trunk"] = record.lr_trunk;
  j["lr_embedding"] = record.lr_embedding;
  if (record.eval_exact_accuracy) j["eval_exact_accuracy"] = *record.eval_exact_accuracy;
  if (record.pass_at_1) j["pass_at_1"] = *record.pass_at_1;
  if (record.pass_at_2) j["pass_at_2"] = *record.pass_at_2;
  if (record.pass_at_n) j["pass_at_n"] = *record.pass_at_n;
  // Cosine fields are always present once diagnostics ran; within-task is
  // null (absent), never zero, when no variant pair existed.
  if (record.n_within_pairs != 0 || record.n_across_pairs != 0 || record.cos_within ||
      record.cos_across) {
    j["cos_within"] = record.cos_within ? ordered_json(*record.cos_within) : ordered_json(nullptr);
    j["cos_across"] = record.cos_across ? ordered_json(*record.cos_across) : ordered_json(nullptr);
    j["n_within_pairs"] = record.n_within_pairs;
    j["n_across_pairs"] = record.n_across_pairs;
  }
  return j.dump();
}

std::vector<BatchItem> make_eval_items(const VariantRegistry& registry, const DataMix& mix,
                                       int canvas_side) {
  std::vector<BatchItem> items;
  uint32_t ordinal = 0;
  for (const MixEntry& entry : mix.entries) {
    for (const Task& task : entry.split.tasks) {
      if (!entry.use_test) {
        for (const ExamplePair& pair : task.test_pairs) {
          if (!pair.has_output()) continue;
          BatchItem item;
          item.embedding_index = static_cast<uint32_t>(registry.row_index(ordinal, 0));
          item.task_ordinal = ordinal;
          item.augmentation = Augmentation::identity();
          item.input = encode_grid(pair.input, canvas_side);
          item.target = encode_grid(*pair.output, canvas_side);
          items.push_back(std::move(item));
        }
      }
      ++ordinal;
    }
  }
  return items;
}

double evaluate_exact_accuracy(const ModelState& state, const std::vector<BatchItem>& items) {
  if (items.empty()) return 0.0;
  ModelRunner<float> runner(state, nullptr, TrainableFilter{});
  size_t exact = 0;
  for (const BatchItem& item : items) {
    RunRequest<float> req;
    req.item = &item;
    req.with_loss = true;
    if (runner.run(req).final_step().exact_match) ++exact;
  }
  return static_cast<double>(exact) / static_cast<double>(items.size());
}

namespace {

// Held-out tasks (use_test = false) that have at least one solved test pair,
// with their mix ordinals; the population for periodic pass@k evaluation.
struct HeldOutTask {
  const Task* task = nullptr;
  uint32_t ordinal = 0;
};

std::vector<HeldOutTask> held_out_tasks(const DataMix& mix) {
  std::vector<HeldOutTask> out;
  uint32_t ordinal = 0;
  for (const MixEntry& entry : mix.entries) {
    for (const Task& task : entry.split.tasks) {
      if (!entry.use_test) {
        for (const ExamplePair& pair : task.test_pairs) {
          if (pair.has_output()) {
            out.push_back({&task, ordinal});
            break;
          }
        }
      }
      ++ordinal;
    }
  }
  return out;
}

void run_pass_k_eval(const ModelState& state, const VariantRegistry& registry,
                     const std::vector<HeldOutTask>& tasks, const PretrainPlan& plan,
                     TrainRecord& record) {
  if (tasks.empty()) return;
  std::vector<ScoredTask> scored;
  for (const HeldOutTask& held : tasks) {
    PredictionSet preds = predict_augmented(state, *held.task, held.ordinal, registry,
                                            plan.eval_augs, plan.seed);
    ScoredTask st;
    st.task_id = held.task->task_id;
    for (size_t e = 0; e < preds.examples.size(); ++e) {
      st.votes.push_back(vote(preds.examples[e]));
      st.solutions.push_back(held.task->test_pairs[e].output);
    }
    scored.push_back(std::move(st));
  }
  const size_t n = plan.pass_k_n > 0 ? static_cast<size_t>(plan.pass_k_n)
                                     : static_cast<size_t>(plan.eval_augs);
  record.pass_at_1 = score_pass_at_k(scored, 1);
  record.pass_at_2 = score_pass_at_k(scored, 2);
  record.pass_at_n = score_pass_at_k(scored, n);
}

void run_cosine_diagnostics(const ModelState& state, const VariantRegistry& registry,
                            const DataMix& mix, const Batch& batch, TrainRecord& record) {
  const bool per_variant = state.config.embedding_mode == EmbeddingMode::PerVariant;
  const std::vector<const Task*> tasks = mix.tasks();
  std::vector<BatchMembership> membership;
  std::vector<int64_t> base_rows;
  std::vector<uint32_t> seen_tasks;
  for (const BatchItem& item : batch.items) {
    const std::string& id = tasks[item.task_ordinal]->task_id;
    const int64_t row = per_variant ? static_cast<int64_t>(item.embedding_index)
                                    : static_cast<int64_t>(item.task_ordinal);
    membership.push_back({id, row});
    if (std::find(seen_tasks.begin(), seen_tasks.end(), item.task_ordinal) == seen_tasks.end()) {
      seen_tasks.push_back(item.task_ordinal);
      base_rows.push_back(per_variant
                              ? static_cast<int64_t>(registry.row_index(item.task_ordinal, 0))
                              : static_cast<int64_t>(item.task_ordinal));
    }
  }
  const CosineReport within = cosine_within_task(state.task_embeddings, membership);
  record.cos_within = within.within_task_mean;
  record.n_within_pairs = within.n_within_pairs;
  if (base_rows.size() >= 2) {
    record.cos_across = cosine_across_tasks(state.task_embeddings, base_rows);
    record.n_across_pairs = static_cast<long>(base_rows.size() * (base_rows.size() - 1) / 2);
  }
}

}  // namespace

PretrainResult pretrain(const DataMix& mix, const ModelConfig& config,
                        const OptimizerConfig& opt_config, const PretrainPlan& plan,
                        MetricsWriter* metrics) {
  config.validate();
  if (plan.batch_size < 1) raise(ErrorCode::ConfigError, "batch_size must be >= 1");
  if (plan.steps < 0) raise(ErrorCode::ConfigError, "steps must be >= 0");

  PretrainResult result;
  result.registry =
      build_registry(mix, static_cast<uint32_t>(plan.augs_per_task),
                     mix_seed(plan.seed, fnv1a64("registry")), plan.fix_background,
                     config.canvas_side);
  const uint64_t rows = config.embedding_mode == EmbeddingMode::PerVariant
                            ? result.registry.size()
                            : mix.task_count();
  result.state = init_model<float>(config, rows, plan.seed);

  OptimizerState<float> opt;
  opt.config = opt_config;
  const std::vector<BatchItem> eval_items = make_eval_items(result.registry, mix, config.canvas_side);
  const std::vector<HeldOutTask> eval_tasks = held_out_tasks(mix);

  long step = 0;
  uint64_t epoch = 0;
  while (step < plan.steps) {
    const uint64_t epoch_seed = mix_seed(plan.seed, fnv1a64("pretrain-epoch") ^ epoch);
    for (const Batch& batch : sample_epoch(result.registry, mix, plan.batch_size, epoch_seed,
                                           config.canvas_side)) {
      GradMap<float> grads;
      const BatchStats<float> stats =
          compute_gradients<float>(result.state, nullptr, TrainableFilter{}, batch, grads);
      optimizer_step<float>(opt, result.state, nullptr, TrainableFilter{}, grads);
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
      if (eval_now) {
        if (!eval_items.empty()) {
          record.eval_exact_accuracy = evaluate_exact_accuracy(result.state, eval_items);
        }
        if (plan.eval_pass_k) run_pass_k_eval(result.state, result.registry, eval_tasks, plan, record);
        run_cosine_diagnostics(result.state, result.registry, mix, batch, record);
      }
      if (metrics != nullptr) metrics->write(record);
      result.records.push_back(std::move(record));
      if (step >= plan.steps) break;
    }
    ++epoch;
  }
  return result;
}

}  // namespace trm
