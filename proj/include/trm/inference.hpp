#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "trm/augmentation.hpp"
#include "trm/dataset.hpp"
#include "trm/grid.hpp"
#include "trm/model.hpp"

namespace trm {

// One augmented prediction, already inverse-mapped to the original frame.
struct Prediction {
  Augmentation augmentation;
  Grid grid;
  GridDigest digest = 0;
  double halt_confidence = 0.5;
};

// Predictions for one task: one list per test example.
struct PredictionSet {
  std::vector<std::vector<Prediction>> examples;
};

struct VoteResult {
  struct Entry {
    Grid grid;
    GridDigest digest = 0;
    size_t count = 0;
    double weight = 0.0;
  };
  std::vector<Entry> ranked;  // sorted by (count desc, digest asc)
  std::vector<Grid> top2;     // first two distinct grids (or one)
};

// A prediction source: maps an augmented input canvas to output tokens plus a
// halting confidence. Decouples voting/scoring from the model so tests can
// wire stub predictors.
struct TokenPrediction {
  std::vector<uint8_t> tokens;
  double halt_confidence = 0.5;
};
using PredictFn = std::function<TokenPrediction(const BatchItem&)>;

// Augment each test input with every variant, predict, decode the final
// supervision step, and inverse-map back to the original frame.
PredictionSet predict_augmented(const PredictFn& predict, const Task& task, int64_t task_ordinal,
                                const std::vector<Augmentation>& variants,
                                const std::vector<int64_t>& embedding_rows, int canvas_side);

// Model-bound variant. Per-variant mode uses the task's first n_augs registry
// variants (variant 0 is the identity) since only those have embedding rows;
// explicit mode samples n_augs fresh augmentations from the seed.
PredictionSet predict_augmented(const ModelState& state, const Task& task, int64_t task_ordinal,
                                const VariantRegistry& registry, int n_augs, uint64_t seed,
                                const LoraAdapters* adapters = nullptr);

PredictFn model_predict_fn(const ModelState& state, const LoraAdapters* adapters = nullptr);

// Majority vote: tally by digest, rank by (count desc, digest asc).
VoteResult vote(const std::vector<Prediction>& predictions);

// Experimental: tally weighted by halting confidence; same ranking rules.
VoteResult halting_weighted_vote(const std::vector<Prediction>& predictions,
                                 const std::vector<double>& weights);

// Credit 1 per test example when any of the top-k distinct grids equals the
// solution; task score = mean over its examples, split score = mean over
// tasks.
struct ScoredTask {
  std::string task_id;
  std::vector<VoteResult> votes;                 // per test example
  std::vector<std::optional<Grid>> solutions;    // per test example
};
double task_pass_at_k(const ScoredTask& task, size_t k);
double score_pass_at_k(const std::vector<ScoredTask>& tasks, size_t k);

// Competition submission: {task_id: [{attempt_1, attempt_2}, ...]} with one
// entry per test input; attempt_2 duplicates attempt_1 when only one distinct
// grid was predicted.
void write_submission(const std::string& path,
                      const std::vector<std::pair<std::string, std::vector<VoteResult>>>& results);

}  // namespace trm
