#include "trm/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "trm/errors.hpp"

namespace trm {

namespace {

double row_norm(const Mat<float>& embeddings, int64_t row) {
  if (row < 0 || row >= embeddings.rows()) {
    raise(ErrorCode::IndexOutOfRange, "embedding row " + std::to_string(row));
  }
  const double norm = embeddings.row(row).template cast<double>().norm();
  if (norm == 0.0) {
    raise(ErrorCode::ZeroNormEmbedding, "row " + std::to_string(row) + " has zero norm");
  }
  return norm;
}

double cosine(const Mat<float>& embeddings, int64_t a, int64_t b) {
  // Validate both rows (bounds, nonzero norm) before touching their data.
  const double norm_a = row_norm(embeddings, a);
  const double norm_b = row_norm(embeddings, b);
  const double dot = embeddings.row(a).template cast<double>().dot(
      embeddings.row(b).template cast<double>());
  return dot / (norm_a * norm_b);
}

}  // namespace

CosineReport cosine_within_task(const Mat<float>& embeddings,
                                const std::vector<BatchMembership>& membership) {
  // Distinct variant rows per task, in deterministic (sorted) order.
  std::map<std::string, std::vector<int64_t>> by_task;
  for (const BatchMembership& m : membership) {
    auto& rows = by_task[m.task_id];
    if (std::find(rows.begin(), rows.end(), m.embedding_index) == rows.end()) {
      rows.push_back(m.embedding_index);
    }
  }
  CosineReport report;
  double task_sum = 0.0;
  long tasks_with_pairs = 0;
  for (auto& [task_id, rows] : by_task) {
    if (rows.size() < 2) continue;
    std::sort(rows.begin(), rows.end());
    double pair_sum = 0.0;
    long pairs = 0;
    for (size_t i = 0; i < rows.size(); ++i) {
      for (size_t j = i + 1; j < rows.size(); ++j) {
        pair_sum += cosine(embeddings, rows[i], rows[j]);
        ++pairs;
      }
    }
    task_sum += pair_sum / static_cast<double>(pairs);
    report.n_within_pairs += pairs;
    ++tasks_with_pairs;
  }
  if (tasks_with_pairs > 0) {
    report.within_task_mean = task_sum / static_cast<double>(tasks_with_pairs);
  }
  return report;
}

double cosine_across_tasks(const Mat<float>& embeddings, const std::vector<int64_t>& base_indices) {
  if (base_indices.size() < 2) {
    raise(ErrorCode::TooFewTasks, "across-task cosine needs >= 2 base rows");
  }
  double sum = 0.0;
  long pairs = 0;
  for (size_t i = 0; i < base_indices.size(); ++i) {
    for (size_t j = i + 1; j < base_indices.size(); ++j) {
      sum += cosine(embeddings, base_indices[i], base_indices[j]);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

}  // namespace trm
