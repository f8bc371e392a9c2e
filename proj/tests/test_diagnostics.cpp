#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "trm/diagnostics.hpp"
#include "trm/errors.hpp"
#include "trm/rng.hpp"

#include "test_helpers.hpp"

using namespace trm;

namespace {

// Independent replica of the documented algorithm: distinct rows per task,
// per-task mean of pairwise cosines, mean over tasks with >= 2 rows.
double replica_cosine(const Mat<float>& e, int64_t a, int64_t b) {
  const double dot = e.row(a).cast<double>().dot(e.row(b).cast<double>());
  return dot / (e.row(a).cast<double>().norm() * e.row(b).cast<double>().norm());
}

CosineReport replica_within(const Mat<float>& e, const std::vector<BatchMembership>& members) {
  std::map<std::string, std::set<int64_t>> by_task;
  for (const BatchMembership& m : members) by_task[m.task_id].insert(m.embedding_index);
  CosineReport report;
  double task_sum = 0.0;
  long tasks = 0;
  for (const auto& [id, rows] : by_task) {
    if (rows.size() < 2) continue;
    std::vector<int64_t> sorted(rows.begin(), rows.end());
    double pair_sum = 0.0;
    long pairs = 0;
    for (size_t i = 0; i < sorted.size(); ++i) {
      for (size_t j = i + 1; j < sorted.size(); ++j) {
        pair_sum += replica_cosine(e, sorted[i], sorted[j]);
        ++pairs;
      }
    }
    task_sum += pair_sum / static_cast<double>(pairs);
    report.n_within_pairs += pairs;
    ++tasks;
  }
  if (tasks > 0) report.within_task_mean = task_sum / static_cast<double>(tasks);
  return report;
}

Mat<float> random_embeddings(Rng& rng, int rows, int cols) {
  Mat<float> e(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) e(r, c) = static_cast<float>(rng.next_normal());
  }
  return e;
}

}  // namespace

TEST_CASE("within-task cosine closed forms") {
  Mat<float> e(6, 3);
  e.setZero();
  e(0, 0) = 1.0f;                  // x
  e(1, 0) = 2.0f;                  // 2x, parallel to row 0
  e(2, 1) = 1.0f;                  // y, orthogonal to x
  e(3, 0) = -1.0f;                 // -x, antipodal to row 0
  e(4, 0) = 3.0f; e(4, 1) = 4.0f;  // 3-4-5 direction
  e(5, 2) = 7.0f;                  // z

  SUBCASE("parallel rows give 1") {
    CosineReport r = cosine_within_task(e, {{"t", 0}, {"t", 1}});
    REQUIRE(r.within_task_mean.has_value());
    CHECK(*r.within_task_mean == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.n_within_pairs == 1);
  }
  SUBCASE("orthogonal rows give 0") {
    CosineReport r = cosine_within_task(e, {{"t", 0}, {"t", 2}});
    REQUIRE(r.within_task_mean.has_value());
    CHECK(*r.within_task_mean == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("antipodal rows give -1") {
    CosineReport r = cosine_within_task(e, {{"t", 0}, {"t", 3}});
    REQUIRE(r.within_task_mean.has_value());
    CHECK(*r.within_task_mean == doctest::Approx(-1.0).epsilon(1e-12));
  }
  SUBCASE("tasks are averaged after pair means, not pooled") {
    // Task a contributes 3 pairs of parallel rows (mean 1); task b one
    // orthogonal pair (mean 0). Pooling pairs would give 3/4; the per-task
    // mean is 1/2.
    std::vector<BatchMembership> members{
        {"a", 0}, {"a", 1}, {"a", 5}, {"b", 0}, {"b", 2}};
    e(5, 2) = 0.0f;
    e(5, 0) = 0.25f;  // make row 5 parallel to rows 0 and 1
    CosineReport r = cosine_within_task(e, members);
    REQUIRE(r.within_task_mean.has_value());
    CHECK(*r.within_task_mean == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(r.n_within_pairs == 4);
  }
  SUBCASE("duplicate memberships collapse to distinct rows") {
    CosineReport r = cosine_within_task(
        e, {{"t", 0}, {"t", 0}, {"t", 0}, {"t", 1}, {"t", 1}});
    CHECK(r.n_within_pairs == 1);
    CHECK(*r.within_task_mean == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("single-row tasks report no value, not zero") {
    CosineReport r = cosine_within_task(e, {{"t", 0}, {"t", 0}, {"u", 2}});
    CHECK_FALSE(r.within_task_mean.has_value());
    CHECK(r.n_within_pairs == 0);
  }
  SUBCASE("empty membership") {
    CosineReport r = cosine_within_task(e, {});
    CHECK_FALSE(r.within_task_mean.has_value());
    CHECK(r.n_within_pairs == 0);
  }
  SUBCASE("across-task fields are untouched by the within computation") {
    CosineReport r = cosine_within_task(e, {{"t", 0}, {"t", 1}});
    CHECK_FALSE(r.across_task_mean.has_value());
    CHECK(r.n_across_pairs == 0);
  }
}

TEST_CASE("within-task cosine matches an independent replica on random fixtures") {
  Rng rng(505);
  const std::vector<std::string> ids{"alpha", "beta", "gamma", "delta"};
  for (int trial = 0; trial < 60; ++trial) {
    Mat<float> e = random_embeddings(rng, 8, 5);
    std::vector<BatchMembership> members;
    const size_t n = 2 + rng.next_below(14);
    for (size_t i = 0; i < n; ++i) {
      members.push_back({ids[rng.next_below(ids.size())],
                         static_cast<int64_t>(rng.next_below(8))});
    }
    CosineReport actual = cosine_within_task(e, members);
    CosineReport expected = replica_within(e, members);
    CHECK(actual.n_within_pairs == expected.n_within_pairs);
    REQUIRE(actual.within_task_mean.has_value() == expected.within_task_mean.has_value());
    if (expected.within_task_mean.has_value()) {
      CHECK(*actual.within_task_mean ==
            doctest::Approx(*expected.within_task_mean).epsilon(1e-9));
      CHECK(*actual.within_task_mean >= -1.0 - 1e-12);
      CHECK(*actual.within_task_mean <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("cosine invariances") {
  Rng rng(909);
  Mat<float> e = random_embeddings(rng, 6, 4);
  std::vector<BatchMembership> members{
      {"a", 0}, {"a", 1}, {"a", 2}, {"b", 3}, {"b", 4}, {"c", 5}, {"c", 0}};
  const CosineReport base = cosine_within_task(e, members);
  REQUIRE(base.within_task_mean.has_value());

  SUBCASE("power-of-two row scaling is exactly neutral") {
    Mat<float> scaled = e;
    scaled.row(1) *= 2.0f;
    scaled.row(4) *= 0.5f;
    CosineReport r = cosine_within_task(scaled, members);
    CHECK(*r.within_task_mean == *base.within_task_mean);
  }
  SUBCASE("general positive scaling is neutral to rounding") {
    Mat<float> scaled = e;
    scaled.row(0) *= 2.5f;
    scaled.row(3) *= 0.3f;
    CosineReport r = cosine_within_task(scaled, members);
    CHECK(*r.within_task_mean == doctest::Approx(*base.within_task_mean).epsilon(1e-6));
  }
  SUBCASE("membership order is irrelevant") {
    std::vector<BatchMembership> shuffled = members;
    for (int round = 0; round < 5; ++round) {
      rng.shuffle(shuffled.data(), shuffled.size());
      CosineReport r = cosine_within_task(e, shuffled);
      CHECK(*r.within_task_mean == *base.within_task_mean);
      CHECK(r.n_within_pairs == base.n_within_pairs);
    }
  }
}

TEST_CASE("across-task cosine") {
  Mat<float> e(5, 3);
  e.setZero();
  e(0, 0) = 1.0f;
  e(1, 0) = 4.0f;   // parallel to row 0
  e(2, 1) = 2.0f;   // orthogonal to rows 0 and 1
  e(3, 0) = -3.0f;  // antipodal to row 0
  e(4, 2) = 1.0f;

  SUBCASE("closed forms") {
    CHECK(cosine_across_tasks(e, {0, 1}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine_across_tasks(e, {0, 2}) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(cosine_across_tasks(e, {0, 3}) == doctest::Approx(-1.0).epsilon(1e-12));
    // pairs (0,1)=1, (0,2)=0, (1,2)=0 -> mean 1/3
    CHECK(cosine_across_tasks(e, {0, 1, 2}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("matches a pooled-pair replica on random fixtures") {
    Rng rng(1717);
    for (int trial = 0; trial < 40; ++trial) {
      Mat<float> m = random_embeddings(rng, 7, 4);
      std::vector<int64_t> rows{0, 2, 3, 5, 6};
      double sum = 0.0;
      long pairs = 0;
      for (size_t i = 0; i < rows.size(); ++i) {
        for (size_t j = i + 1; j < rows.size(); ++j) {
          sum += replica_cosine(m, rows[i], rows[j]);
          ++pairs;
        }
      }
      const double actual = cosine_across_tasks(m, rows);
      CHECK(actual == doctest::Approx(sum / static_cast<double>(pairs)).epsilon(1e-9));
      CHECK(actual >= -1.0 - 1e-12);
      CHECK(actual <= 1.0 + 1e-12);
    }
  }
  SUBCASE("needs at least two rows") {
    CHECK_THROWS_WITH_AS(cosine_across_tasks(e, {}), doctest::Contains("TooFewTasks"), Error);
    CHECK_THROWS_WITH_AS(cosine_across_tasks(e, {0}), doctest::Contains("TooFewTasks"), Error);
  }
}

TEST_CASE("cosine error paths") {
  Mat<float> e(3, 2);
  e.setZero();
  e(0, 0) = 1.0f;
  e(1, 1) = 1.0f;  // row 2 stays all-zero

  SUBCASE("out-of-range rows are rejected before any data access") {
    CHECK_THROWS_WITH_AS(cosine_within_task(e, {{"t", 0}, {"t", 99}}),
                         doctest::Contains("IndexOutOfRange"), Error);
    CHECK_THROWS_WITH_AS(cosine_across_tasks(e, {0, -1}),
                         doctest::Contains("IndexOutOfRange"), Error);
  }
  SUBCASE("zero-norm rows are rejected") {
    CHECK_THROWS_WITH_AS(cosine_within_task(e, {{"t", 0}, {"t", 2}}),
                         doctest::Contains("ZeroNormEmbedding"), Error);
    CHECK_THROWS_WITH_AS(cosine_across_tasks(e, {1, 2}),
                         doctest::Contains("ZeroNormEmbedding"), Error);
  }
}
