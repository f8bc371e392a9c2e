#include "trm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>

#include <json.hpp>

namespace trm {

PredictionSet predict_augmented(const PredictFn& predict, const Task& task, int64_t task_ordinal,
                                const std::vector<Augmentation>& variants,
                                const std::vector<int64_t>& embedding_rows, int canvas_side) {
  if (variants.empty()) raise(ErrorCode::ConfigError, "predict_augmented needs >= 1 variant");
  if (variants.size() != embedding_rows.size()) {
    raise(ErrorCode::ConfigError, "variant and embedding-row lists differ in length");
  }
  PredictionSet set;
  for (const ExamplePair& pair : task.test_pairs) {
    std::vector<Prediction> preds;
    preds.reserve(variants.size());
    for (size_t v = 0; v < variants.size(); ++v) {
      const Augmentation& aug = variants[v];
      BatchItem item;
      item.embedding_index = static_cast<uint32_t>(embedding_rows[v]);
      item.task_ordinal = static_cast<uint32_t>(task_ordinal);
      item.augmentation = aug;
      item.input = apply_augmentation(pair.input, aug, canvas_side);
      item.target.side = canvas_side;  // no target tokens: inference only
      const TokenPrediction raw = predict(item);
      Prediction pred;
      pred.augmentation = aug;
      pred.halt_confidence = raw.halt_confidence;
      InverseAugmentation inverse{aug};
      pred.grid = inverse(TokenCanvas{canvas_side, raw.tokens});
      pred.digest = canonical_digest(pred.grid);
      preds.push_back(std::move(pred));
    }
    set.examples.push_back(std::move(preds));
  }
  return set;
}

PredictFn model_predict_fn(const ModelState& state, const LoraAdapters* adapters) {
  // The runner is stateless between calls; share one across invocations.
  auto runner = std::make_shared<ModelRunner<float>>(state, adapters, TrainableFilter{});
  return [runner](const BatchItem& item) {
    RunRequest<float> req;
    req.item = &item;
    req.keep_logits = true;
    const ItemResult<float> result = runner->run(req);
    TokenPrediction out;
    out.tokens = ModelRunner<float>::argmax_tokens(result.final_step().logits);
    out.halt_confidence = 1.0 / (1.0 + std::exp(-static_cast<double>(result.final_step().halt_logit)));
    return out;
  };
}

PredictionSet predict_augmented(const ModelState& state, const Task& task, int64_t task_ordinal,
                                const VariantRegistry& registry, int n_augs, uint64_t seed,
                                const LoraAdapters* adapters) {
  if (n_augs < 1) raise(ErrorCode::ConfigError, "n_augs must be >= 1");
  std::vector<Augmentation> variants;
  std::vector<int64_t> rows;
  if (state.config.embedding_mode == EmbeddingMode::PerVariant) {
    // Only registry variants have embedding rows; use the first n_augs
    // (variant 0 is the identity).
    const size_t count = std::min<size_t>(static_cast<size_t>(n_augs), registry.augs_per_task());
    for (size_t v = 0; v < count; ++v) {
      const size_t row = registry.row_index(static_cast<size_t>(task_ordinal), v);
      variants.push_back(registry.entry(row).augmentation);
      rows.push_back(static_cast<int64_t>(row));
    }
  } else {
    // Explicit mode encodes augmentations directly, so fresh ones may be
    // sampled beyond the registry.
    variants = sample_augmentations(mix_seed(seed, fnv1a64(task.task_id)), n_augs,
                                    task.max_height(), task.max_width(), false,
                                    state.config.canvas_side);
    rows.assign(variants.size(), task_ordinal);
  }
  return predict_augmented(model_predict_fn(state, adapters), task, task_ordinal, variants, rows,
                           state.config.canvas_side);
}

namespace {

VoteResult tally(const std::vector<Prediction>& predictions, const std::vector<double>& weights) {
  if (predictions.empty()) raise(ErrorCode::EmptyPredictionSet, "vote over zero predictions");
  std::map<GridDigest, VoteResult::Entry> buckets;  // keyed ascending by digest
  for (size_t i = 0; i < predictions.size(); ++i) {
    VoteResult::Entry& entry = buckets[predictions[i].digest];
    if (entry.count == 0) {
      entry.grid = predictions[i].grid;
      entry.digest = predictions[i].digest;
    }
    entry.count += 1;
    entry.weight += weights[i];
  }
  VoteResult result;
  result.ranked.reserve(buckets.size());
  for (auto& [digest, entry] : buckets) result.ranked.push_back(std::move(entry));
  std::stable_sort(result.ranked.begin(), result.ranked.end(),
                   [](const VoteResult::Entry& a, const VoteResult::Entry& b) {
                     if (a.weight != b.weight) return a.weight > b.weight;
                     return a.digest < b.digest;
                   });
  for (size_t i = 0; i < result.ranked.size() && i < 2; ++i) {
    result.top2.push_back(result.ranked[i].grid);
  }
  return result;
}

}  // namespace

VoteResult vote(const std::vector<Prediction>& predictions) {
  return tally(predictions, std::vector<double>(predictions.size(), 1.0));
}

VoteResult halting_weighted_vote(const std::vector<Prediction>& predictions,
                                 const std::vector<double>& weights) {
  if (predictions.size() != weights.size()) {
    raise(ErrorCode::WeightLengthMismatch,
          std::to_string(predictions.size()) + " predictions vs " +
              std::to_string(weights.size()) + " weights");
  }
  return tally(predictions, weights);
}

double task_pass_at_k(const ScoredTask& task, size_t k) {
  if (task.votes.empty()) raise(ErrorCode::ConfigError, "task has no vote results");
  if (task.votes.size() != task.solutions.size()) {
    raise(ErrorCode::ConfigError, "vote/solution count mismatch for task " + task.task_id);
  }
  double credit = 0.0;
  for (size_t e = 0; e < task.votes.size(); ++e) {
    if (!task.solutions[e].has_value()) {
      raise(ErrorCode::MissingSolution,
            "task " + task.task_id + " example " + std::to_string(e) + " has no solution");
    }
    const Grid& solution = *task.solutions[e];
    const auto& ranked = task.votes[e].ranked;
    for (size_t r = 0; r < ranked.size() && r < k; ++r) {
      if (ranked[r].grid == solution) {
        credit += 1.0;
        break;
      }
    }
  }
  return credit / static_cast<double>(task.votes.size());
}

double score_pass_at_k(const std::vector<ScoredTask>& tasks, size_t k) {
  if (tasks.empty()) raise(ErrorCode::ConfigError, "pass@k over zero tasks");
  double sum = 0.0;
  for (const ScoredTask& task : tasks) sum += task_pass_at_k(task, k);
  return sum / static_cast<double>(tasks.size());
}

namespace {

nlohmann::ordered_json grid_to_json(const Grid& grid) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (int r = 0; r < grid.height; ++r) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (int c = 0; c < grid.width; ++c) row.push_back(static_cast<int>(grid.at(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

void write_submission(const std::string& path,
                      const std::vector<std::pair<std::string, std::vector<VoteResult>>>& results) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [task_id, votes] : results) {
    nlohmann::ordered_json attempts = nlohmann::ordered_json::array();
    for (const VoteResult& result : votes) {
      if (result.top2.empty()) raise(ErrorCode::EmptyPredictionSet, "vote result with no grids");
      nlohmann::ordered_json entry;
      entry["attempt_1"] = grid_to_json(result.top2.front());
      entry["attempt_2"] = grid_to_json(result.top2.size() > 1 ? result.top2[1] : result.top2[0]);
      attempts.push_back(std::move(entry));
    }
    j[task_id] = std::move(attempts);
  }
  std::ofstream out(path);
  if (!out) raise(ErrorCode::IoError, "cannot open submission file: " + path);
  out << j.dump(1) << '\n';
  if (!out) raise(ErrorCode::IoError, "submission write failed: " + path);
}

}  // namespace trm
