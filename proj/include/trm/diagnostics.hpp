#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trm/tensor.hpp"

namespace trm {

// Embedding-geometry diagnostics. within_task_mean is absent — not zero —
// when no task contributes a variant pair, so sparse logging stays
// distinguishable from genuinely orthogonal embeddings.
struct CosineReport {
  long step = 0;
  std::optional<double> within_task_mean;
  std::optional<double> across_task_mean;
  long n_within_pairs = 0;
  long n_across_pairs = 0;
};

struct BatchMembership {
  std::string task_id;
  int64_t embedding_index = 0;
};

// Mean over tasks (with >= 2 distinct variant rows present) of the mean
// pairwise cosine between their variant embeddings.
CosineReport cosine_within_task(const Mat<float>& embeddings,
                                const std::vector<BatchMembership>& membership);

// Mean pairwise cosine over the base-variant rows of different tasks.
double cosine_across_tasks(const Mat<float>& embeddings, const std::vector<int64_t>& base_indices);

}  // namespace trm
