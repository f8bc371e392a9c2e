#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "trm/dataset.hpp"
#include "trm/errors.hpp"
#include "trm/model.hpp"
#include "trm/rng.hpp"

#include "test_helpers.hpp"

using namespace trm;

namespace {

Batch make_batch(const ModelConfig& config, int n_items, uint64_t seed, int augs_per_task = 1) {
  Split split = test::make_shift_split("m", 1, n_items, 0, seed, config.canvas_side > 2 ? 2 : 1);
  DataMix mix;
  mix.entries.push_back({split, true, false});
  VariantRegistry registry =
      build_registry(mix, static_cast<uint32_t>(augs_per_task), seed, false, config.canvas_side);
  auto batches = sample_epoch(registry, mix, n_items, seed, config.canvas_side);
  REQUIRE(!batches.empty());
  return batches[0];
}

bool states_bit_identical(const ModelState& a, const ModelState& b) {
  std::vector<const Mat<float>*> lhs, rhs;
  visit_params(a, [&](const std::string&, const Mat<float>& m, ParamGroup) { lhs.push_back(&m); });
  visit_params(b, [&](const std::string&, const Mat<float>& m, ParamGroup) { rhs.push_back(&m); });
  if (lhs.size() != rhs.size()) return false;
  for (size_t i = 0; i < lhs.size(); ++i) {
    if (lhs[i]->rows() != rhs[i]->rows() || lhs[i]->cols() != rhs[i]->cols()) return false;
    if (std::memcmp(lhs[i]->data(), rhs[i]->data(),
                    sizeof(float) * static_cast<size_t>(lhs[i]->size())) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig config = test::tiny_config();
  CHECK_NOTHROW(config.validate());
  SUBCASE("heads must divide hidden dim") {
    config.n_heads = 3;
    CHECK_THROWS_AS(config.validate(), Error);
  }
  SUBCASE("cycle counts must be positive") {
    config.lower_cycles = 0;
    CHECK_THROWS_AS(config.validate(), Error);
  }
  SUBCASE("supervision steps positive") {
    config.supervision_steps = 0;
    CHECK_THROWS_AS(config.validate(), Error);
  }
  SUBCASE("canvas side within 1..30") {
    config.canvas_side = 31;
    CHECK_THROWS_AS(config.validate(), Error);
  }
}

TEST_CASE("init_model: shapes, determinism, bounded values") {
  ModelConfig config = test::tiny_config(64, 3);
  ModelState a = init_model<float>(config, 8, 7);
  ModelState b = init_model<float>(config, 8, 7);
  ModelState c = init_model<float>(config, 8, 8);

  CHECK(a.task_embeddings.rows() == 8);
  CHECK(a.task_embeddings.cols() == 64);
  CHECK(a.token_embedding.rows() == 11);
  CHECK(a.pos_embedding.rows() == 9);
  CHECK(a.output_head.cols() == 11);
  CHECK(states_bit_identical(a, b));
  CHECK_FALSE(states_bit_identical(a, c));

  // every tensor finite with |v| <= 1 at init (trunc-normal 0.02 clipped at
  // two sigma; norm gains are exactly 1)
  bool all_bounded = true;
  visit_params(a, [&](const std::string&, const Mat<float>& m, ParamGroup) {
    all_bounded = all_bounded && all_finite(m) && (m.array().abs() <= 1.0f).all();
  });
  CHECK(all_bounded);
  CHECK(a.halt_bias(0, 0) == 0.0f);  // initial halt probability 1/2
  CHECK((a.layers[0].norm_attn.array() == 1.0f).all());
}

TEST_CASE("parameter accounting") {
  SUBCASE("embedding rows count exactly") {
    ModelConfig config;
    config.hidden_dim = 512;
    ParamCounts counts = count_parameters(config, 1000000);
    CHECK(counts.embedding_params == 512000000ULL);
    CHECK(count_parameters(config, 0).embedding_params == 0);
  }
  SUBCASE("explicit mode with 1000 tasks") {
    ModelConfig config;
    config.hidden_dim = 512;
    config.embedding_mode = EmbeddingMode::ExplicitEncoded;
    CHECK(count_parameters(config, 1000).embedding_params == 512000ULL);
  }
  SUBCASE("closed form equals the visitor recount") {
    for (ModelConfig config :
         {test::tiny_config(16, 2), test::tiny_config(64, 5), ModelConfig{}}) {
      for (EmbeddingMode mode : {EmbeddingMode::PerVariant, EmbeddingMode::ExplicitEncoded}) {
        config.embedding_mode = mode;
        const uint64_t rows = 13;
        ParamCounts counts = count_parameters(config, rows);
        ModelState state = init_model<float>(config, rows, 1);
        uint64_t trunk = 0, embed = 0;
        visit_params(state, [&](const std::string&, const Mat<float>& m, ParamGroup g) {
          (g == ParamGroup::Embedding ? embed : trunk) += static_cast<uint64_t>(m.size());
        });
        CHECK(counts.trunk_params == trunk);
        CHECK(counts.embedding_params == embed);
      }
    }
  }
  SUBCASE("full-scale trunk is about 7M") {
    ParamCounts counts = count_parameters(ModelConfig{}, 0);
    CHECK(counts.trunk_params > 6000000ULL);
    CHECK(counts.trunk_params < 8000000ULL);
  }
  SUBCASE("embed_dim != hidden_dim adds a projection") {
    ModelConfig config = test::tiny_config(16, 2);
    config.embed_dim = 8;
    ParamCounts counts = count_parameters(config, 4);
    CHECK(counts.embedding_params == 4 * 8);
    ModelState state = init_model<float>(config, 4, 2);
    CHECK(state.embed_proj.rows() == 8);
    CHECK(state.embed_proj.cols() == 16);
    uint64_t trunk = 0;
    visit_params(state, [&](const std::string&, const Mat<float>& m, ParamGroup g) {
      if (g != ParamGroup::Embedding) trunk += static_cast<uint64_t>(m.size());
    });
    CHECK(counts.trunk_params == trunk);
  }
}

TEST_CASE("forward: shapes, finiteness, recursion depth") {
  ModelConfig config = test::tiny_config();
  ModelState state = init_model<float>(config, 4, 3);
  Batch batch = make_batch(config, 2, 5);

  ForwardOutput<float> out = forward(state, batch);
  REQUIRE(out.items.size() == 2);
  REQUIRE(out.items[0].steps.size() == 2);
  const Mat<float>& logits = out.items[0].steps[0].logits;
  CHECK(logits.rows() == config.seq_len());
  CHECK(logits.cols() == 11);
  CHECK(all_finite(logits));
  CHECK(all_finite(out.halt_logits));

  // effective depth: n_layers * N_sup * (H*L + 1) trunk-layer applications
  CHECK(out.layer_applications_per_item == config.expected_layer_applications());
  CHECK(out.layer_applications_per_item == 1 * 2 * (2 * 2 + 1));

  SUBCASE("deterministic run to run") {
    ForwardOutput<float> again = forward(state, batch);
    CHECK(again.items[0].steps[1].logits == out.items[0].steps[1].logits);
    CHECK(again.halt_logits == out.halt_logits);
  }
  SUBCASE("embedding index bounds checked") {
    Batch bad = batch;
    bad.items[0].embedding_index = 99;
    CHECK_THROWS_WITH_AS(forward(state, bad), doctest::Contains("IndexOutOfRange"), Error);
  }
  SUBCASE("carried latents: extra supervision step changes step-1 logits only") {
    ModelConfig deeper = config;
    deeper.supervision_steps = 3;
    ModelState state3 = init_model<float>(deeper, 4, 3);
    // same seed, same shapes -> identical parameters; step outputs must agree
    // on shared steps and the extra step must differ from the last shared one
    REQUIRE(states_bit_identical(state, state3));
    ForwardOutput<float> out3 = forward(state3, batch);
    CHECK(out3.items[0].steps[0].logits == out.items[0].steps[0].logits);
    CHECK(out3.items[0].steps[1].logits == out.items[0].steps[1].logits);
    bool extra_step_differs =
        !(out3.items[0].steps[2].logits == out3.items[0].steps[1].logits);
    CHECK(extra_step_differs);
  }
}

TEST_CASE("LoRA adapters") {
  ModelConfig config = test::tiny_config();
  ModelState state = init_model<float>(config, 4, 11);
  Batch batch = make_batch(config, 2, 6);
  LoraAdapters adapters = init_lora_adapters<float>(config, 4, 4.0f, 21);

  SUBCASE("zero-initialized up-projection gives bit-identical outputs") {
    ForwardOutput<float> base = forward(state, batch);
    ForwardOutput<float> adapted = forward(state, batch, &adapters);
    for (size_t i = 0; i < base.items.size(); ++i) {
      for (size_t s = 0; s < base.items[i].steps.size(); ++s) {
        const Mat<float>& lhs = base.items[i].steps[s].logits;
        const Mat<float>& rhs = adapted.items[i].steps[s].logits;
        REQUIRE(lhs.size() == rhs.size());
        CHECK(std::memcmp(lhs.data(), rhs.data(),
                          sizeof(float) * static_cast<size_t>(lhs.size())) == 0);
      }
    }
    CHECK(std::memcmp(base.halt_logits.data(), adapted.halt_logits.data(),
                      sizeof(float) * static_cast<size_t>(base.halt_logits.size())) == 0);
  }
  SUBCASE("nonzero adapters change outputs without touching the trunk") {
    adapters.layers[0].q.up.setConstant(0.05f);
    ModelState before = state;
    ForwardOutput<float> base = forward(state, batch);
    ForwardOutput<float> adapted = forward(state, batch, &adapters);
    bool differs = !(base.items[0].steps[0].logits == adapted.items[0].steps[0].logits);
    CHECK(differs);
    CHECK(states_bit_identical(before, state));
  }
  SUBCASE("rank must be positive") {
    CHECK_THROWS_WITH_AS(init_lora_adapters<float>(config, 0, 1.0f, 1),
                         doctest::Contains("StrategyConfigError"), Error);
  }
  SUBCASE("adapter visitor names every pair") {
    int tensors = 0;
    visit_lora_params(adapters, [&](const std::string& name, Mat<float>&, ParamGroup g) {
      CHECK(g == ParamGroup::Lora);
      CHECK(name.find("lora") != std::string::npos);
      ++tensors;
    });
    CHECK(tensors == config.n_trunk_layers * 6 * 2);
  }
}

TEST_CASE("explicit augmentation encoding") {
  ModelConfig config = test::tiny_config();
  config.embedding_mode = EmbeddingMode::ExplicitEncoded;
  ModelState state = init_model<float>(config, 3, 31);
  REQUIRE(state.aug_encoder.has_value());

  SUBCASE("identity augmentation encodes to zero at init") {
    Mat<float> v = encode_explicit_augmentation(state, Augmentation::identity());
    CHECK((v.array() == 0.0f).all());
  }
  SUBCASE("per-variant mode rejects the call") {
    ModelState pv = init_model<float>(test::tiny_config(), 3, 31);
    CHECK_THROWS_WITH_AS(encode_explicit_augmentation(pv, Augmentation::identity()),
                         doctest::Contains("ModeMismatch"), Error);
  }
  SUBCASE("randomized encoder distinguishes augmentations") {
    Rng rng(5);
    for (auto* table : {&state.aug_encoder->dihedral_table, &state.aug_encoder->color_pair_table,
                        &state.aug_encoder->offset_x_table, &state.aug_encoder->offset_y_table}) {
      for (Eigen::Index i = 0; i < table->size(); ++i) {
        table->data()[i] = static_cast<float>(rng.next_normal());
      }
    }
    Augmentation rot;
    rot.dihedral = DihedralElement::Rot90;
    Augmentation moved;
    moved.offset = {2, 1};
    Mat<float> v0 = encode_explicit_augmentation(state, Augmentation::identity());
    Mat<float> v1 = encode_explicit_augmentation(state, rot);
    Mat<float> v2 = encode_explicit_augmentation(state, moved);
    bool d01 = !(v0 == v1);
    bool d02 = !(v0 == v2);
    CHECK(d01);
    CHECK(d02);
    SUBCASE("forward consumes the encoding (different augs, different logits)") {
      Batch batch = make_batch(config, 1, 9);
      Batch rotated = batch;
      rotated.items[0].augmentation = rot;  // same canvases, different encoding input
      ForwardOutput<float> a = forward(state, batch);
      ForwardOutput<float> b = forward(state, rotated);
      bool logits_differ = !(a.items[0].steps[0].logits == b.items[0].steps[0].logits);
      CHECK(logits_differ);
    }
  }
  SUBCASE("explicit rows = task count, encoder tables are trunk params") {
    uint64_t embed_rows = 0;
    visit_params(state, [&](const std::string& name, Mat<float>& m, ParamGroup g) {
      if (g == ParamGroup::Embedding) embed_rows += static_cast<uint64_t>(m.rows());
      if (name.rfind("aug.", 0) == 0) CHECK(g == ParamGroup::Trunk);
    });
    CHECK(embed_rows == 3);
  }
}

TEST_CASE("init_new_task_embeddings") {
  SUBCASE("mean mode: {(1,1),(3,3)} -> rows of (2,2)") {
    Mat<float> pretrained(2, 2);
    pretrained << 1, 1, 3, 3;
    Mat<float> out = init_new_task_embeddings(pretrained, 2, EmbeddingInit::Mean, 0);
    REQUIRE(out.rows() == 2);
    CHECK(out(0, 0) == 2.0f);
    CHECK(out(0, 1) == 2.0f);
    CHECK(out(1, 0) == 2.0f);
    CHECK(out(1, 1) == 2.0f);
  }
  SUBCASE("gaussian mode: deterministic and statistically faithful") {
    Mat<float> pretrained(4, 2);
    pretrained << 1, -2, 3, 0, 5, 2, 7, 4;  // col means 4,1; pop variances 5,5
    Mat<float> a = init_new_task_embeddings(pretrained, 10000, EmbeddingInit::Gaussian, 9);
    Mat<float> b = init_new_task_embeddings(pretrained, 10000, EmbeddingInit::Gaussian, 9);
    CHECK(a == b);
    for (int c = 0; c < 2; ++c) {
      const double mean = a.col(c).cast<double>().mean();
      const double var =
          (a.col(c).cast<double>().array() - mean).square().sum() / static_cast<double>(a.rows());
      const double target_mean = c == 0 ? 4.0 : 1.0;
      CHECK(std::abs(mean - target_mean) < 0.05 * 5.0);  // 5% of the sd scale
      CHECK(std::abs(var - 5.0) < 0.05 * 5.0);
    }
  }
  SUBCASE("empty table rejected") {
    Mat<float> empty(0, 4);
    CHECK_THROWS_WITH_AS(init_new_task_embeddings(empty, 1, EmbeddingInit::Mean, 0),
                         doctest::Contains("EmptyPretrainedTable"), Error);
  }
}

TEST_CASE("checkpoint save/load round trip") {
  test::TempDir dir("ckpt");
  ModelConfig config = test::tiny_config();
  SUBCASE("per-variant state, no adapters") {
    ModelState state = init_model<float>(config, 6, 17);
    save_checkpoint(dir.str("m.bin"), state, 0xDEADBEEFULL);
    Checkpoint loaded = load_checkpoint(dir.str("m.bin"));
    CHECK(loaded.registry_digest == 0xDEADBEEFULL);
    CHECK_FALSE(loaded.adapters.has_value());
    CHECK(states_bit_identical(loaded.state, state));
    CHECK(loaded.state.config.hidden_dim == config.hidden_dim);
    CHECK(loaded.state.config.canvas_side == config.canvas_side);
  }
  SUBCASE("explicit mode with adapters") {
    ModelConfig explicit_cfg = config;
    explicit_cfg.embedding_mode = EmbeddingMode::ExplicitEncoded;
    ModelState state = init_model<float>(explicit_cfg, 3, 19);
    LoraAdapters adapters = init_lora_adapters<float>(explicit_cfg, 2, 8.0f, 23);
    adapters.layers[0].v.up.setConstant(0.25f);
    save_checkpoint(dir.str("e.bin"), state, 7, &adapters);
    Checkpoint loaded = load_checkpoint(dir.str("e.bin"));
    REQUIRE(loaded.adapters.has_value());
    CHECK(loaded.adapters->rank == 2);
    CHECK(loaded.adapters->alpha == 8.0f);
    CHECK(loaded.adapters->layers[0].v.up == adapters.layers[0].v.up);
    CHECK(states_bit_identical(loaded.state, state));
    REQUIRE(loaded.state.aug_encoder.has_value());
  }
  SUBCASE("truncated file raises IoError") {
    ModelState state = init_model<float>(config, 2, 29);
    save_checkpoint(dir.str("t.bin"), state, 1);
    // chop the file in half
    std::string path = dir.str("t.bin");
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<long>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("IoError"), Error);
  }
  SUBCASE("missing file raises") { CHECK_THROWS_AS(load_checkpoint(dir.str("no.bin")), Error); }
}

TEST_CASE("precision casts walk every tensor") {
  ModelConfig config = test::tiny_config();
  config.embed_dim = 8;  // exercise the projection path
  ModelState state = init_model<float>(config, 5, 37);
  ModelStateT<double> wide = cast_model<double>(state);
  ModelState back = cast_model<float>(wide);
  CHECK(states_bit_identical(back, state));
  CHECK(wide.embed_proj.rows() == state.embed_proj.rows());

  LoraAdapters adapters = init_lora_adapters<float>(config, 3, 6.0f, 41);
  LoraAdaptersT<double> wide_adapters = cast_lora<double>(adapters);
  LoraAdapters back_adapters = cast_lora<float>(wide_adapters);
  CHECK(back_adapters.rank == adapters.rank);
  CHECK(back_adapters.layers[0].q.down == adapters.layers[0].q.down);
}

TEST_CASE("item_prediction_matches handles translated targets") {
  // Build an item whose augmentation translates the grid; the raw target
  // canvas decodes to [[0]] in the un-shifted frame, so comparison must go
  // through the inverse augmentation on both sides.
  Grid input = make_grid({{1, 2}});
  Grid output = make_grid({{3, 4}});
  Augmentation aug;
  aug.offset = {1, 1};
  BatchItem item;
  item.embedding_index = 0;
  item.task_ordinal = 0;
  item.augmentation = aug;
  item.input = apply_augmentation(input, aug, 6);
  item.target = apply_augmentation(output, aug, 6);
  CHECK(item_prediction_matches(item.target.tokens, item));

  std::vector<uint8_t> wrong = item.target.tokens;
  wrong[1 * 6 + 1] = 6;  // corrupt a content cell inside the offset rectangle
  CHECK_FALSE(item_prediction_matches(wrong, item));

  // cells above/left of the offset window are clipped by the inverse shift
  std::vector<uint8_t> forgiven = item.target.tokens;
  forgiven[0] = 5;
  CHECK(item_prediction_matches(forgiven, item));
}
