#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "trm/dataset.hpp"
#include "trm/errors.hpp"
#include "trm/model.hpp"
#include "trm/posttrain.hpp"
#include "trm/rng.hpp"
#include "trm/training.hpp"

#include "test_helpers.hpp"

using namespace trm;

namespace {

struct Fixture {
  ModelConfig config = test::tiny_config();
  Checkpoint checkpoint;
  Split new_tasks;

  Fixture() {
    Split pretrain_split = test::make_shift_split("base", 2, 3, 1, 7, 1);
    DataMix mix;
    mix.entries.push_back({pretrain_split, true, false});
    OptimizerConfig opt;
    opt.warmup_steps = 0;
    PretrainPlan plan;
    plan.steps = 4;
    plan.batch_size = 3;
    plan.seed = 11;
    plan.augs_per_task = 2;
    PretrainResult pre = pretrain(mix, config, opt, plan);
    checkpoint.state = std::move(pre.state);
    checkpoint.registry_digest = pre.registry.digest();
    new_tasks = test::make_shift_split("fresh", 2, 3, 1, 13, 1);
  }

  PosttrainPlan plan(long steps) const {
    PosttrainPlan p;
    p.steps = steps;
    p.batch_size = 3;
    p.augs_per_task = 2;
    p.seed = 17;
    return p;
  }

  OptimizerConfig optimizer() const {
    OptimizerConfig opt;
    opt.trunk_lr = 2e-4;
    opt.embedding_lr = 2e-2;
    opt.warmup_steps = 0;
    return opt;
  }
};

}  // namespace

TEST_CASE("strategy parsing and validation") {
  for (const char* name : {"full", "embeddings_only", "staged", "lora"}) {
    CHECK(std::string(strategy_kind_name(parse_strategy_kind(name))) == name);
  }
  CHECK_THROWS_WITH_AS(parse_strategy_kind("finetune"),
                       doctest::Contains("StrategyConfigError"), Error);

  Strategy staged;
  staged.kind = StrategyKind::Staged;
  staged.staged_fraction = 0.25;
  CHECK_NOTHROW(staged.validate());
  staged.staged_fraction = 0.5;
  CHECK_NOTHROW(staged.validate());
  for (double bad : {0.0, 1.0, -0.1, 1.5}) {
    staged.staged_fraction = bad;
    CHECK_THROWS_AS(staged.validate(), Error);
  }

  Strategy lora;
  lora.kind = StrategyKind::Lora;
  CHECK_NOTHROW(lora.validate());
  lora.lora_rank = 0;
  CHECK_THROWS_AS(lora.validate(), Error);
  lora.lora_rank = 16;
  lora.lora_alpha = 0.0;
  CHECK_THROWS_AS(lora.validate(), Error);

  SUBCASE("staged boundary is the floor of fraction * steps") {
    Strategy s;
    s.kind = StrategyKind::Staged;
    s.staged_fraction = 0.25;
    CHECK(s.staged_boundary(400) == 100);
    CHECK(s.staged_boundary(12500) == 3125);
    CHECK(s.staged_boundary(10) == 2);  // floor(2.5)
    s.staged_fraction = 0.5;
    CHECK(s.staged_boundary(400) == 200);
  }
}

TEST_CASE("budget planner") {
  SUBCASE("replication defaults: 1/32 of reference compute, 15000 steps") {
    BudgetPlan plan;
    ComputeFraction frac = compute_fraction(plan);
    CHECK(frac.numerator == 1);
    CHECK(frac.denominator == 32);
    CHECK(frac.value() == doctest::Approx(0.03125).epsilon(1e-15));
    CHECK(plan_budget(plan) == 15000);
    CHECK(plan.planned_steps == 15000);
  }
  SUBCASE("integer-microsecond arithmetic is exact") {
    BudgetPlan plan;
    plan.wall_hours = 1.0;
    plan.reserved_inference_hours = 0.0;
    plan.measured_step_seconds = 0.1;
    CHECK(plan_budget(plan) == 36000);
    plan.measured_step_seconds = 0.3;  // not exactly representable in binary
    CHECK(plan_budget(plan) == 12000);
    plan.measured_step_seconds = 7.0;
    CHECK(plan_budget(plan) == 514);  // floor(3600/7)
  }
  SUBCASE("monotone in wall time and step cost") {
    BudgetPlan plan;
    const long base = plan_budget(plan);
    BudgetPlan longer = plan;
    longer.wall_hours = 13.0;
    CHECK(plan_budget(longer) >= base);
    BudgetPlan slower = plan;
    slower.measured_step_seconds = 3.0;
    CHECK(plan_budget(slower) <= base);
  }
  SUBCASE("reserved time swallowing the budget is an explicit error") {
    BudgetPlan plan;
    plan.reserved_inference_hours = plan.wall_hours;
    CHECK_THROWS_WITH_AS(plan_budget(plan), doctest::Contains("BudgetExhausted"), Error);
    plan.reserved_inference_hours = plan.wall_hours + 1.0;
    CHECK_THROWS_WITH_AS(plan_budget(plan), doctest::Contains("BudgetExhausted"), Error);
  }
  SUBCASE("invalid inputs") {
    BudgetPlan plan;
    plan.measured_step_seconds = 0.0;
    CHECK_THROWS_WITH_AS(plan_budget(plan), doctest::Contains("ConfigError"), Error);
    plan = BudgetPlan{};
    plan.wall_hours = 0.0;
    CHECK_THROWS_AS(plan_budget(plan), Error);
    plan = BudgetPlan{};
    plan.batch_size = 0;
    CHECK_THROWS_AS(plan_budget(plan), Error);
    plan = BudgetPlan{};
    plan.flops_ratio = 0.0;
    CHECK_THROWS_AS(compute_fraction(plan), Error);
  }
  SUBCASE("fractions reduce exactly at three-decimal precision") {
    BudgetPlan plan;
    plan.flops_ratio = 2.5;
    plan.accelerator_ratio = 2.0;
    ComputeFraction frac = compute_fraction(plan);
    CHECK(frac.numerator == 1);
    CHECK(frac.denominator == 5);
    plan.flops_ratio = 1.0;
    plan.accelerator_ratio = 1.0;
    frac = compute_fraction(plan);
    CHECK(frac.numerator == 1);
    CHECK(frac.denominator == 1);
    plan.flops_ratio = 0.5;
    plan.accelerator_ratio = 0.5;
    frac = compute_fraction(plan);
    CHECK(frac.numerator == 4);
    CHECK(frac.denominator == 1);
  }
}

TEST_CASE("checksums freeze-detect single bit flips") {
  ModelConfig config = test::tiny_config();
  ModelState state = init_model<float>(config, 3, 19);
  const uint64_t trunk = checksum_group(state, ParamGroup::Trunk);
  const uint64_t embed = checksum_group(state, ParamGroup::Embedding);
  CHECK(trunk == checksum_group(state, ParamGroup::Trunk));
  CHECK(trunk != embed);

  const float saved = state.layers[0].ffn_in(0, 0);
  state.layers[0].ffn_in(0, 0) = std::nextafter(saved, 1.0f);
  CHECK(checksum_group(state, ParamGroup::Trunk) != trunk);
  CHECK(checksum_group(state, ParamGroup::Embedding) == embed);
  state.layers[0].ffn_in(0, 0) = saved;
  CHECK(checksum_group(state, ParamGroup::Trunk) == trunk);

  LoraAdapters adapters = init_lora_adapters<float>(config, 2, 4.0f, 23);
  const uint64_t lora = checksum_adapters(adapters);
  adapters.layers[0].k.down(0, 0) += 1.0f;
  CHECK(checksum_adapters(adapters) != lora);
}

TEST_CASE("post-training strategies freeze exactly what they claim") {
  Fixture fx;
  const uint64_t base_trunk = checksum_group(fx.checkpoint.state, ParamGroup::Trunk);

  SUBCASE("embedding table replacement before any step") {
    PosttrainResult untouched = posttrain(fx.checkpoint, fx.new_tasks, Strategy{},
                                          fx.optimizer(), fx.plan(0));
    CHECK(untouched.records.empty());
    CHECK(untouched.state.task_embeddings.rows() == 2 * 2);
    CHECK(untouched.registry.size() == 4);
    CHECK(checksum_group(untouched.state, ParamGroup::Trunk) == base_trunk);
    // mean init: every new row equals the column mean of the pretrained table
    Mat<float> mean = fx.checkpoint.state.task_embeddings.colwise().mean();
    for (Eigen::Index r = 0; r < untouched.state.task_embeddings.rows(); ++r) {
      CHECK((untouched.state.task_embeddings.row(r) - mean.row(0)).cwiseAbs().maxCoeff() == 0.0f);
    }
  }
  SUBCASE("gaussian embedding init differs per row") {
    PosttrainPlan plan = fx.plan(0);
    plan.embedding_init = EmbeddingInit::Gaussian;
    PosttrainResult result = posttrain(fx.checkpoint, fx.new_tasks, Strategy{},
                                       fx.optimizer(), plan);
    bool rows_differ =
        !(result.state.task_embeddings.row(0) == result.state.task_embeddings.row(1));
    CHECK(rows_differ);
  }
  SUBCASE("embeddings_only leaves the trunk bit-identical") {
    Strategy strategy;
    strategy.kind = StrategyKind::EmbeddingsOnly;
    PosttrainResult before = posttrain(fx.checkpoint, fx.new_tasks, strategy,
                                       fx.optimizer(), fx.plan(0));
    PosttrainResult result = posttrain(fx.checkpoint, fx.new_tasks, strategy,
                                       fx.optimizer(), fx.plan(8));
    CHECK(result.records.size() == 8);
    CHECK(checksum_group(result.state, ParamGroup::Trunk) == base_trunk);
    CHECK(checksum_group(result.state, ParamGroup::Embedding) !=
          checksum_group(before.state, ParamGroup::Embedding));
    CHECK_FALSE(result.adapters.has_value());
  }
  SUBCASE("full updates trunk and embeddings") {
    PosttrainResult before = posttrain(fx.checkpoint, fx.new_tasks, Strategy{},
                                       fx.optimizer(), fx.plan(0));
    PosttrainResult result = posttrain(fx.checkpoint, fx.new_tasks, Strategy{},
                                       fx.optimizer(), fx.plan(8));
    CHECK(checksum_group(result.state, ParamGroup::Trunk) != base_trunk);
    CHECK(checksum_group(result.state, ParamGroup::Embedding) !=
          checksum_group(before.state, ParamGroup::Embedding));
  }
  SUBCASE("staged: boundary semantics pinned by a bit-exact replica") {
    Strategy strategy;
    strategy.kind = StrategyKind::Staged;
    strategy.staged_fraction = 0.5;
    PosttrainPlan plan = fx.plan(4);  // boundary floor(0.5 * 4) = 2
    REQUIRE(strategy.staged_boundary(plan.steps) == 2);
    PosttrainResult result = posttrain(fx.checkpoint, fx.new_tasks, strategy,
                                       fx.optimizer(), plan);
    CHECK(checksum_group(result.state, ParamGroup::Trunk) != base_trunk);

    // replay the documented schedule step by step; a boundary shifted either
    // way must produce a different final state
    auto replay = [&](long boundary) {
      VariantRegistry registry =
          build_registry(fx.new_tasks, static_cast<uint32_t>(plan.augs_per_task),
                         mix_seed(plan.seed, fnv1a64("posttrain-registry")), plan.fix_background,
                         fx.config.canvas_side);
      ModelState state = fx.checkpoint.state;
      state.task_embeddings = init_new_task_embeddings(
          fx.checkpoint.state.task_embeddings, registry.size(), EmbeddingInit::Mean, plan.seed);
      DataMix mix;
      mix.entries.push_back({fx.new_tasks, true, false});
      OptimizerState<float> opt;
      opt.config = fx.optimizer();
      long step = 0;
      uint64_t epoch = 0;
      while (step < plan.steps) {
        const uint64_t epoch_seed = mix_seed(plan.seed, fnv1a64("posttrain-epoch") ^ epoch);
        for (const Batch& batch :
             sample_epoch(registry, mix, plan.batch_size, epoch_seed, fx.config.canvas_side)) {
          TrainableFilter filter;
          if (step + 1 <= boundary) {
            filter.trunk = false;
            filter.lora = false;
          }
          GradMap<float> grads;
          compute_gradients<float>(state, nullptr, filter, batch, grads);
          optimizer_step<float>(opt, state, nullptr, filter, grads);
          if (++step >= plan.steps) break;
        }
        ++epoch;
      }
      return std::pair<uint64_t, uint64_t>{checksum_group(state, ParamGroup::Trunk),
                                           checksum_group(state, ParamGroup::Embedding)};
    };
    const auto exact = replay(2);
    CHECK(exact.first == checksum_group(result.state, ParamGroup::Trunk));
    CHECK(exact.second == checksum_group(result.state, ParamGroup::Embedding));
    CHECK(replay(1).first != exact.first);   // trunk opened one step early
    CHECK(replay(3).first != exact.first);   // trunk opened one step late
  }
  SUBCASE("lora: frozen base trunk, live adapters and embeddings") {
    Strategy strategy;
    strategy.kind = StrategyKind::Lora;
    strategy.lora_rank = 2;
    strategy.lora_alpha = 4.0;
    PosttrainResult before = posttrain(fx.checkpoint, fx.new_tasks, strategy,
                                       fx.optimizer(), fx.plan(0));
    REQUIRE(before.adapters.has_value());
    // untrained adapters equal a fresh deterministic init from the same seed
    LoraAdapters expected = init_lora_adapters<float>(fx.checkpoint.state.config, 2, 4.0f,
                                                      fx.plan(0).seed);
    CHECK(checksum_adapters(*before.adapters) == checksum_adapters(expected));

    PosttrainResult result = posttrain(fx.checkpoint, fx.new_tasks, strategy,
                                       fx.optimizer(), fx.plan(8));
    REQUIRE(result.adapters.has_value());
    CHECK(checksum_group(result.state, ParamGroup::Trunk) == base_trunk);
    CHECK(checksum_adapters(*result.adapters) != checksum_adapters(expected));
    CHECK(checksum_group(result.state, ParamGroup::Embedding) !=
          checksum_group(before.state, ParamGroup::Embedding));
  }
}

TEST_CASE("post-training run mechanics") {
  Fixture fx;

  SUBCASE("records, schedule, and evaluation cadence") {
    PosttrainPlan plan = fx.plan(6);
    plan.eval_every = 3;
    PosttrainResult result = posttrain(fx.checkpoint, fx.new_tasks, Strategy{},
                                       fx.optimizer(), plan);
    REQUIRE(result.records.size() == 6);
    for (const TrainRecord& r : result.records) {
      CHECK(std::isfinite(r.loss));
      CHECK(r.eval_exact_accuracy.has_value() == (r.step % 3 == 0 || r.step == 6));
    }
  }
  SUBCASE("deterministic across runs") {
    PosttrainResult a = posttrain(fx.checkpoint, fx.new_tasks, Strategy{},
                                  fx.optimizer(), fx.plan(5));
    PosttrainResult b = posttrain(fx.checkpoint, fx.new_tasks, Strategy{},
                                  fx.optimizer(), fx.plan(5));
    CHECK(checksum_group(a.state, ParamGroup::Trunk) == checksum_group(b.state, ParamGroup::Trunk));
    CHECK(checksum_group(a.state, ParamGroup::Embedding) ==
          checksum_group(b.state, ParamGroup::Embedding));
    for (size_t i = 0; i < a.records.size(); ++i) {
      CHECK(a.records[i].loss == b.records[i].loss);
    }
  }
  SUBCASE("empty task split refused") {
    Split empty;
    empty.name = "none";
    CHECK_THROWS_WITH_AS(
        posttrain(fx.checkpoint, empty, Strategy{}, fx.optimizer(), fx.plan(1)),
        doctest::Contains("TooFewTasks"), Error);
  }
  SUBCASE("task without train pairs refused") {
    Split bad = fx.new_tasks;
    bad.tasks[0].train_pairs.clear();
    CHECK_THROWS_WITH_AS(
        posttrain(fx.checkpoint, bad, Strategy{}, fx.optimizer(), fx.plan(1)),
        doctest::Contains("ConfigError"), Error);
  }
  SUBCASE("invalid strategy rejected before any work") {
    Strategy bad;
    bad.kind = StrategyKind::Staged;
    bad.staged_fraction = 0.0;
    CHECK_THROWS_WITH_AS(
        posttrain(fx.checkpoint, fx.new_tasks, bad, fx.optimizer(), fx.plan(1)),
        doctest::Contains("StrategyConfigError"), Error);
  }
}

TEST_CASE("continued pre-training guards the task-to-row mapping") {
  ModelConfig config = test::tiny_config();
  Split split = test::make_shift_split("cont", 2, 3, 1, 29, 1);
  DataMix mix;
  mix.entries.push_back({split, true, false});
  OptimizerConfig opt;
  opt.warmup_steps = 0;
  PretrainPlan plan;
  plan.steps = 2;
  plan.batch_size = 3;
  plan.seed = 31;
  plan.augs_per_task = 2;
  PretrainResult pre = pretrain(mix, config, opt, plan);
  const uint64_t digest = pre.registry.digest();

  SUBCASE("digest zero means the mapping was never recorded") {
    ModelState state = pre.state;
    CHECK_THROWS_WITH_AS(
        continue_pretraining(state, 0, pre.registry, mix, opt, 2, 3, 31),
        doctest::Contains("ContinuedPretrainMappingLost"), Error);
  }
  SUBCASE("mismatched registry digest is rejected") {
    ModelState state = pre.state;
    CHECK_THROWS_WITH_AS(
        continue_pretraining(state, digest ^ 1, pre.registry, mix, opt, 2, 3, 31),
        doctest::Contains("ContinuedPretrainMappingLost"), Error);
  }
  SUBCASE("row-count drift is rejected") {
    ModelState shrunk = init_model<float>(config, 2, 31);  // registry has 4 rows
    CHECK_THROWS_WITH_AS(
        continue_pretraining(shrunk, digest, pre.registry, mix, opt, 2, 3, 31),
        doctest::Contains("ContinuedPretrainMappingLost"), Error);
  }
  SUBCASE("matching digest trains on and changes the model deterministically") {
    ModelState a = pre.state;
    ModelState b = pre.state;
    continue_pretraining(a, digest, pre.registry, mix, opt, 3, 3, 31);
    continue_pretraining(b, digest, pre.registry, mix, opt, 3, 3, 31);
    CHECK(checksum_group(a, ParamGroup::Trunk) == checksum_group(b, ParamGroup::Trunk));
    CHECK(checksum_group(a, ParamGroup::Embedding) == checksum_group(b, ParamGroup::Embedding));
    CHECK(checksum_group(a, ParamGroup::Trunk) != checksum_group(pre.state, ParamGroup::Trunk));
    CHECK(checksum_group(a, ParamGroup::Embedding) !=
          checksum_group(pre.state, ParamGroup::Embedding));
  }
  SUBCASE("zero steps is a no-op that still validates the mapping") {
    ModelState state = pre.state;
    continue_pretraining(state, digest, pre.registry, mix, opt, 0, 3, 31);
    CHECK(checksum_group(state, ParamGroup::Trunk) ==
          checksum_group(pre.state, ParamGroup::Trunk));
  }
}
