#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "trm/dataset.hpp"
#include "trm/model.hpp"
#include "trm/tensor.hpp"

namespace trm {

template <class S>
struct LossBreakdown {
  S total = S(0);
  S cell = S(0);
  S halt = S(0);
};

// Pure loss on forward outputs: cell loss is the mean per-token cross-entropy
// over all canvas positions, supervision steps, and items; halt loss is the
// mean binary cross-entropy of the halt logits; total is their sum. This is
// the reference the training path must agree with.
template <class S>
LossBreakdown<S> compute_loss(const std::vector<std::vector<Mat<S>>>& step_logits,  // [item][step]
                              const Mat<S>& halt_logits,                            // items x steps
                              const std::vector<std::vector<int>>& targets,         // [item][seq]
                              const Mat<S>& halt_targets) {                         // items x steps
  const size_t n_items = step_logits.size();
  if (n_items == 0) raise(ErrorCode::ConfigError, "loss over an empty batch");
  const size_t n_steps = step_logits.front().size();
  S cell_sum = S(0);
  S halt_sum = S(0);
  for (size_t i = 0; i < n_items; ++i) {
    for (size_t s = 0; s < n_steps; ++s) {
      const Mat<S>& logits = step_logits[i][s];
      S ce = S(0);
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        // log-softmax at the target index, computed stably per row
        const S row_max = logits.row(r).maxCoeff();
        S denom = S(0);
        for (Eigen::Index c = 0; c < logits.cols(); ++c) denom += std::exp(logits(r, c) - row_max);
        ce -= logits(r, targets[i][static_cast<size_t>(r)]) - row_max - std::log(denom);
      }
      cell_sum += ce / static_cast<S>(logits.rows());
      const S x = halt_logits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s));
      const S t = halt_targets(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s));
      halt_sum += std::max(x, S(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
  }
  const S denom = static_cast<S>(n_items * n_steps);
  LossBreakdown<S> loss{(cell_sum + halt_sum) / denom, cell_sum / denom, halt_sum / denom};
  if (!std::isfinite(static_cast<double>(loss.total))) {
    raise(ErrorCode::NonFiniteLoss, "non-finite loss");
  }
  return loss;
}

template <class S>
struct BatchStats {
  LossBreakdown<S> loss;
  int final_exact = 0;  // items whose final supervision step matches the target
  long layer_applications_per_item = 0;
  size_t items = 0;
  double exact_fraction() const {
    return items == 0 ? 0.0 : static_cast<double>(final_exact) / static_cast<double>(items);
  }
};

namespace detail {

template <class S>
BatchStats<S> run_batch(const ModelStateT<S>& state, const LoraAdaptersT<S>* lora,
                        const TrainableFilter& filter, const Batch& batch, GradMap<S>* sink,
                        const std::vector<std::vector<uint8_t>>* fixed_halt_targets) {
  if (batch.size() == 0) raise(ErrorCode::ConfigError, "empty batch");
  ModelRunner<S> runner(state, lora, filter);
  BatchStats<S> stats;
  stats.items = batch.size();
  const S scale = S(1) / static_cast<S>(state.config.supervision_steps * batch.size());
  S cell_sum = S(0);
  S halt_sum = S(0);
  for (size_t i = 0; i < batch.size(); ++i) {
    RunRequest<S> req;
    req.item = &batch.items[i];
    req.with_loss = true;
    req.grad_sink = sink;
    req.loss_scale = scale;
    if (fixed_halt_targets != nullptr) req.fixed_halt_targets = &(*fixed_halt_targets)[i];
    ItemResult<S> result = runner.run(req);
    for (const StepTrace<S>& step : result.steps) {
      cell_sum += step.cell_loss;
      halt_sum += step.halt_loss;
    }
    if (result.final_step().exact_match) ++stats.final_exact;
    stats.layer_applications_per_item = result.layer_applications;
  }
  stats.loss.cell = cell_sum * scale;
  stats.loss.halt = halt_sum * scale;
  stats.loss.total = stats.loss.cell + stats.loss.halt;
  if (!std::isfinite(static_cast<double>(stats.loss.total))) {
    raise(ErrorCode::NonFiniteLoss, "non-finite batch loss");
  }
  return stats;
}

}  // namespace detail

// Loss evaluation without gradients; same code path as training minus the
// backward passes, so the values agree exactly.
template <class S>
BatchStats<S> compute_batch_loss(const ModelStateT<S>& state, const LoraAdaptersT<S>* lora,
                                 const Batch& batch,
                                 const std::vector<std::vector<uint8_t>>* fixed_halt_targets = nullptr) {
  return detail::run_batch<S>(state, lora, TrainableFilter{}, batch, nullptr, fixed_halt_targets);
}

// Gradients of the mean total loss for every parameter the filter marks
// trainable; frozen parameters never appear in the sink. The backward pass
// runs once per (item, supervision step) with seed 1/(N_sup * batch).
template <class S>
BatchStats<S> compute_gradients(const ModelStateT<S>& state, const LoraAdaptersT<S>* lora,
                                const TrainableFilter& filter, const Batch& batch, GradMap<S>& sink,
                                const std::vector<std::vector<uint8_t>>* fixed_halt_targets = nullptr) {
  BatchStats<S> stats = detail::run_batch<S>(state, lora, filter, batch, &sink, fixed_halt_targets);
  for (const auto& [ptr, grad] : sink) {
    if (!all_finite(grad)) raise(ErrorCode::NonFiniteGradient, "non-finite gradient");
  }
  return stats;
}

struct OptimizerConfig {
  double trunk_lr = 1e-4;
  double embedding_lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double trunk_weight_decay = 0.1;  // also applied to LoRA adapters
  double embedding_weight_decay = 0.0;
  long warmup_steps = 2000;  // linear warmup, then constant

  double lr_for(ParamGroup g) const { return g == ParamGroup::Embedding ? embedding_lr : trunk_lr; }
  double decay_for(ParamGroup g) const {
    return g == ParamGroup::Embedding ? embedding_weight_decay : trunk_weight_decay;
  }
  double warmup_factor(long step) const {
    if (warmup_steps <= 0) return 1.0;
    return std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
  }
};

template <class S>
struct OptimizerState {
  OptimizerConfig config;
  long step = 0;
  struct Moments {
    Mat<S> m, v;
  };
  std::unordered_map<const void*, Moments> moments;
};

// Decoupled-weight-decay adaptive-moment update with bias correction. Trunk
// and LoRA tensors use trunk_lr/trunk_weight_decay, the task-embedding table
// uses embedding_lr. Filtered-out tensors are skipped entirely, so their
// values (and moments) stay bit-identical.
template <class S>
void optimizer_step(OptimizerState<S>& opt, ModelStateT<S>& state, LoraAdaptersT<S>* adapters,
                    const TrainableFilter& filter, const GradMap<S>& grads) {
  opt.step += 1;
  const OptimizerConfig& cfg = opt.config;
  const double factor = cfg.warmup_factor(opt.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));

  auto update = [&](const std::string&, Mat<S>& param, ParamGroup group) {
    if (!filter.allows(group)) return;
    const S lr = static_cast<S>(cfg.lr_for(group) * factor);
    const S decay = static_cast<S>(cfg.decay_for(group));
    auto it = grads.find(&param);
    const Mat<S>* grad = it != grads.end() ? &it->second : nullptr;
    auto& moments = opt.moments[&param];
    if (moments.m.size() == 0) {
      moments.m = Mat<S>::Zero(param.rows(), param.cols());
      moments.v = Mat<S>::Zero(param.rows(), param.cols());
    }
    const S b1 = static_cast<S>(cfg.beta1);
    const S b2 = static_cast<S>(cfg.beta2);
    if (grad != nullptr) {
      moments.m = b1 * moments.m + (S(1) - b1) * *grad;
      moments.v = b2 * moments.v.array() + (S(1) - b2) * grad->array().square();
    } else {
      moments.m *= b1;
      moments.v *= b2;
    }
    Mat<S> m_hat = moments.m / static_cast<S>(bias1);
    Mat<S> v_hat = moments.v / static_cast<S>(bias2);
    param.array() -= lr * (m_hat.array() / (v_hat.array().sqrt() + static_cast<S>(cfg.eps)) +
                           decay * param.array());
  };
  visit_params(state, update);
  if (adapters != nullptr) visit_lora_params(*adapters, update);
}

struct TrainRecord {
  long step = 0;
  double loss = 0.0;
  double cell_loss = 0.0;
  double halt_loss = 0.0;
  double train_exact_accuracy = 0.0;
  double lr_trunk = 0.0;
  double lr_embedding = 0.0;
  std::optional<double> eval_exact_accuracy;
  std::optional<double> pass_at_1, pass_at_2, pass_at_n;
  std::optional<double> cos_within;  // absent when no within-task pair exists
  std::optional<double> cos_across;
  long n_within_pairs = 0;
  long n_across_pairs = 0;
};

// Newline-delimited JSON metrics stream.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void write(const TrainRecord& record);

 private:
  std::ofstream out_;
};

std::string train_record_to_json(const TrainRecord& record);

struct PretrainPlan {
  long steps = 0;
  int batch_size = 32;
  long eval_every = 0;  // 0 disables periodic evaluation
  uint64_t seed = 0;
  int augs_per_task = 1;
  bool fix_background = false;
  // pass@k evaluation settings used when eval_every fires
  bool eval_pass_k = false;
  int eval_augs = 32;
  long pass_k_n = 0;  // 0 means "use eval_augs"
};

struct PretrainResult {
  ModelState state;
  VariantRegistry registry;
  std::vector<TrainRecord> records;
};

// Identity-frame evaluation items for the held-out test pairs of a mix.
std::vector<BatchItem> make_eval_items(const VariantRegistry& registry, const DataMix& mix,
                                       int canvas_side);

// Fraction of pairs whose final-supervision-step argmax decoding equals the
// target grid exactly.
double evaluate_exact_accuracy(const ModelState& state, const std::vector<BatchItem>& items);

// Pre-training: builds the registry over the mix, initializes the model, and
// runs the epoch sampler / gradients / optimizer for plan.steps steps,
// evaluating on held-out pairs every eval_every steps.
PretrainResult pretrain(const DataMix& mix, const ModelConfig& config,
                        const OptimizerConfig& opt_config, const PretrainPlan& plan,
                        MetricsWriter* metrics = nullptr);

}  // namespace trm
