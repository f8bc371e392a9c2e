#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trm/augmentation.hpp"
#include "trm/grid.hpp"

namespace trm {

struct ExamplePair {
  Grid input;
  std::optional<Grid> output;  // test outputs may be withheld

  bool has_output() const { return output.has_value(); }
};

struct Task {
  std::string task_id;
  std::vector<ExamplePair> train_pairs;
  std::vector<ExamplePair> test_pairs;

  // Largest height/width over every grid in the task (train and test, inputs
  // and available outputs); used to bound translation sampling.
  int max_height() const;
  int max_width() const;
};

struct Split {
  std::string name;
  std::vector<Task> tasks;

  double mean_train_pairs() const;
  double mean_test_pairs() const;
  const Task* find(const std::string& task_id) const;
};

// Loads the ARC challenge JSON schema: object keyed by task id, each task
// holding `train` and `test` arrays of {input, output?} integer matrices.
// Test outputs are attached from the solutions file when provided.
Split load_challenges(const std::string& path, const std::optional<std::string>& solutions_path = {});

// Writes a Split back out in the challenge schema (plus a solutions file when
// `solutions_path` is given). Used to materialize derived splits and fixtures.
void save_challenges(const Split& split, const std::string& path,
                     const std::optional<std::string>& solutions_path = {});

struct DerivedEvalSplits {
  Split train100;
  Split eval10;
  Split test10;
};

// Deterministic 100/10/10 partition of the first 120 tasks by sorted id.
DerivedEvalSplits build_derived_eval_splits(const Split& eval_split, uint64_t seed);

// Subset preserving split order; throws UnknownTaskId for ids not present.
Split filter_split(const Split& split, const std::vector<std::string>& keep_ids);

// One task id per line; '#' comments and blank lines ignored.
std::vector<std::string> load_id_list(const std::string& path);

// Persistent mapping (task id, augmentation) -> embedding row index.
class VariantRegistry {
 public:
  struct Entry {
    std::string task_id;
    Augmentation augmentation;
  };

  VariantRegistry() = default;
  VariantRegistry(std::vector<Entry> entries, uint32_t n_tasks, uint32_t augs_per_task);

  size_t size() const { return entries_.size(); }
  uint32_t n_tasks() const { return n_tasks_; }
  uint32_t augs_per_task() const { return augs_per_task_; }
  const Entry& entry(size_t index) const { return entries_[index]; }

  // Row of (task ordinal, variant); variant 0 is the identity augmentation.
  size_t row_index(size_t task_ordinal, size_t variant) const {
    return task_ordinal * augs_per_task_ + variant;
  }

  std::vector<uint8_t> serialize() const;
  static VariantRegistry deserialize(const std::vector<uint8_t>& bytes);
  void save(const std::string& path) const;
  static VariantRegistry load(const std::string& path);

  // FNV-1a 64 of the serialized bytes; stored in checkpoints so continued
  // pre-training can detect a lost task-to-embedding mapping.
  uint64_t digest() const;

  bool operator==(const VariantRegistry& other) const;

 private:
  std::vector<Entry> entries_;
  uint32_t n_tasks_ = 0;
  uint32_t augs_per_task_ = 0;
};

// A split plus which of its example pairs participate in training.
struct MixEntry {
  Split split;
  bool use_train = true;
  bool use_test = false;
};

struct DataMix {
  std::vector<MixEntry> entries;

  size_t task_count() const;
  // Tasks in mix order; the registry and samplers share this ordering.
  std::vector<const Task*> tasks() const;
  // Test pairs with outputs from entries where use_test is false (the
  // held-out pairs used for evaluation during pre-training).
  std::vector<std::pair<const Task*, const ExamplePair*>> held_out_test_pairs() const;
};

// Manifest: one `split_path, use_train, use_test` record per line. Relative
// paths resolve against the manifest directory; `${TRM_DATA_ROOT}` expands to
// the environment data root. A solutions file is auto-discovered by replacing
// "challenges" with "solutions" in the file name.
DataMix load_manifest(const std::string& manifest_path);

// Registry over the mix's tasks: per task, `augs_per_task` distinct
// augmentations sampled from mix_seed (variant 0 identity). Offsets are
// bounded so every variant fits the canvas the model will run on.
VariantRegistry build_registry(const DataMix& mix, uint32_t augs_per_task, uint64_t seed,
                               bool fix_background = false, int canvas_side = kMaxGridSide);
VariantRegistry build_registry(const Split& split, uint32_t augs_per_task, uint64_t seed,
                               bool fix_background = false, int canvas_side = kMaxGridSide);

struct BatchItem {
  uint32_t embedding_index = 0;
  uint32_t task_ordinal = 0;
  Augmentation augmentation;  // consumed by the explicit-encoding model mode
  TokenCanvas input;
  TokenCanvas target;
};

struct Batch {
  std::vector<BatchItem> items;

  size_t size() const { return items.size(); }
};

// One epoch: exactly one variant drawn per task, all of its included example
// pairs augmented under that variant, globally shuffled, chunked into batches
// (final short batch kept).
std::vector<Batch> sample_epoch(const VariantRegistry& registry, const DataMix& mix, int batch_size,
                                uint64_t epoch_seed, int canvas_side = kMaxGridSide);

}  // namespace trm
