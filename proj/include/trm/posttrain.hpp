#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trm/dataset.hpp"
#include "trm/model.hpp"
#include "trm/training.hpp"

namespace trm {

enum class StrategyKind : uint8_t { Full, EmbeddingsOnly, Staged, Lora };

// Adaptation strategy for post-training. Staged trains embedding rows alone
// for the first staged_fraction of steps, then everything; LoRA trains
// adapters plus embedding rows over a frozen base trunk.
struct Strategy {
  StrategyKind kind = StrategyKind::Full;
  double staged_fraction = 0.25;  // staged only; 0.5 reproduces the half-way arm
  int lora_rank = 16;             // lora only
  double lora_alpha = 16.0;       // lora only

  void validate() const;
  // Steps (1-based) up to and including this bound train embeddings only.
  long staged_boundary(long total_steps) const;
};

StrategyKind parse_strategy_kind(const std::string& name);
const char* strategy_kind_name(StrategyKind kind);

// Competition compute budgeting.
struct BudgetPlan {
  double flops_ratio = 8.0;        // reference/competition per-accelerator flops
  double accelerator_ratio = 4.0;  // reference/competition accelerator counts
  double wall_hours = 12.0;
  double reserved_inference_hours = 1.0;
  int batch_size = 384;
  double measured_step_seconds = 2.64;
  long planned_steps = 0;
};

// planned_steps = floor((wall_hours - reserved_inference_hours) * 3600
//                       / measured_step_seconds), computed over integer
// microseconds so the result is exact. Fills plan.planned_steps.
long plan_budget(BudgetPlan& plan);

// Fraction of the reference compute available in competition:
// 1 / (flops_ratio * accelerator_ratio), as an exact reduced fraction
// (ratios are taken at three-decimal precision).
struct ComputeFraction {
  uint64_t numerator = 1;
  uint64_t denominator = 1;
  double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
};
ComputeFraction compute_fraction(const BudgetPlan& plan);

struct PosttrainPlan {
  long steps = 0;
  int batch_size = 384;
  int augs_per_task = 1;
  uint64_t seed = 0;
  EmbeddingInit embedding_init = EmbeddingInit::Mean;
  bool fix_background = false;
  long eval_every = 0;   // evaluates on test-task test pairs when solutions exist
  bool eval_pass_k = false;
  int eval_augs = 32;
};

struct PosttrainResult {
  ModelState state;
  std::optional<LoraAdapters> adapters;
  VariantRegistry registry;  // the new registry over the test tasks
  std::vector<TrainRecord> records;
};

// Adapts a pre-trained checkpoint to unseen tasks: builds a fresh registry
// over the test tasks, replaces the task-embedding table via
// init_new_task_embeddings, and trains only on the tasks' train pairs with a
// fresh optimizer, freezing parameters according to the strategy.
PosttrainResult posttrain(const Checkpoint& checkpoint, const Split& test_tasks,
                          const Strategy& strategy, const OptimizerConfig& opt_config,
                          const PosttrainPlan& plan, MetricsWriter* metrics = nullptr);

// Optional brief continued pre-training on the original mix before
// adaptation. Requires the registry the checkpoint was trained with; a digest
// mismatch means the task-to-row mapping is lost.
void continue_pretraining(ModelState& state, uint64_t checkpoint_registry_digest,
                          const VariantRegistry& original_registry, const DataMix& original_mix,
                          const OptimizerConfig& opt_config, long steps, int batch_size,
                          uint64_t seed);

// FNV-1a 64 over the raw little-endian bytes of every tensor in the group,
// in visit_params order. Bit-exact freeze detection.
uint64_t checksum_group(const ModelState& state, ParamGroup group);
uint64_t checksum_adapters(const LoraAdapters& adapters);

}  // namespace trm
