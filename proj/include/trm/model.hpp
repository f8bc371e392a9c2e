#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trm/augmentation.hpp"
#include "trm/dataset.hpp"
#include "trm/errors.hpp"
#include "trm/grid.hpp"
#include "trm/rng.hpp"
#include "trm/tensor.hpp"

namespace trm {

enum class EmbeddingMode : uint8_t {
  PerVariant = 0,       // one embedding row per (task, augmentation) registry entry
  ExplicitEncoded = 1,  // one row per task + learned augmentation encoders
};

struct ModelConfig {
  int hidden_dim = 512;
  int embed_dim = 0;  // 0 means "same as hidden_dim"
  int n_trunk_layers = 2;
  int n_heads = 8;
  int lower_cycles = 4;       // L: z-updates per higher cycle
  int higher_cycles = 3;      // H: higher cycles per supervision step
  int supervision_steps = 4;  // N_sup
  int canvas_side = kMaxGridSide;
  int ffn_multiplier = 4;
  EmbeddingMode embedding_mode = EmbeddingMode::PerVariant;

  int vocab() const { return kVocabSize; }
  int seq_len() const { return canvas_side * canvas_side; }
  int resolved_embed_dim() const { return embed_dim > 0 ? embed_dim : hidden_dim; }
  void validate() const;
  // Trunk-layer applications one forward performs per item.
  long expected_layer_applications() const {
    return static_cast<long>(n_trunk_layers) * supervision_steps *
           (static_cast<long>(higher_cycles) * lower_cycles + 1);
  }
};

enum class ParamGroup : uint8_t { Trunk, Embedding, Lora };

// Which parameter groups receive gradients / optimizer updates.
struct TrainableFilter {
  bool trunk = true;
  bool embedding = true;
  bool lora = true;
  bool allows(ParamGroup g) const {
    switch (g) {
      case ParamGroup::Trunk: return trunk;
      case ParamGroup::Embedding: return embedding;
      case ParamGroup::Lora: return lora;
    }
    return false;
  }
};

template <class S>
struct TrunkLayerT {
  Mat<S> attn_q, attn_k, attn_v, attn_out;  // D x D each
  Mat<S> ffn_in;                            // D x (mult*D)
  Mat<S> ffn_out;                           // (mult*D) x D
  Mat<S> norm_attn, norm_ffn;               // 1 x D gains
};

// Explicit-augmentation-mode encoders. All tables start at zero so the
// identity augmentation contributes nothing until trained.
template <class S>
struct AugEncoderT {
  Mat<S> dihedral_table;    // 8 x E
  Mat<S> color_pair_table;  // 100 x E, row 10*i+j encodes "color i maps to j"
  Mat<S> offset_x_table;    // kMaxGridSide x E
  Mat<S> offset_y_table;    // kMaxGridSide x E
};

template <class S>
struct LoraPairT {
  Mat<S> down;  // r x in
  Mat<S> up;    // out x r
};

template <class S>
struct LoraLayerT {
  LoraPairT<S> q, k, v, out, ffn_in, ffn_out;
};

template <class S>
struct LoraAdaptersT {
  int rank = 16;
  S alpha = S(16);
  std::vector<LoraLayerT<S>> layers;
  S scale() const { return alpha / static_cast<S>(rank); }
};

template <class S>
struct ModelStateT {
  ModelConfig config;
  Mat<S> token_embedding;  // vocab x D
  Mat<S> pos_embedding;    // seq x D
  std::vector<TrunkLayerT<S>> layers;
  Mat<S> output_head;  // D x vocab
  Mat<S> halt_weight;  // D x 1
  Mat<S> halt_bias;    // 1 x 1
  Mat<S> embed_proj;   // E x D, present only when E != D
  std::optional<AugEncoderT<S>> aug_encoder;  // explicit mode only
  Mat<S> task_embeddings;  // rows x E; kept last in parameter order

  int64_t embedding_rows() const { return task_embeddings.rows(); }
};

using ModelState = ModelStateT<float>;
using LoraAdapters = LoraAdaptersT<float>;

// Fixed parameter order shared by the optimizer, checkpoints, and tests.
// The task-embedding table always comes last.
template <class State, class F>
void visit_params(State& state, F&& f) {
  f("token_embedding", state.token_embedding, ParamGroup::Trunk);
  f("pos_embedding", state.pos_embedding, ParamGroup::Trunk);
  for (size_t i = 0; i < state.layers.size(); ++i) {
    auto& layer = state.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    f(p + "attn_q", layer.attn_q, ParamGroup::Trunk);
    f(p + "attn_k", layer.attn_k, ParamGroup::Trunk);
    f(p + "attn_v", layer.attn_v, ParamGroup::Trunk);
    f(p + "attn_out", layer.attn_out, ParamGroup::Trunk);
    f(p + "norm_attn", layer.norm_attn, ParamGroup::Trunk);
    f(p + "ffn_in", layer.ffn_in, ParamGroup::Trunk);
    f(p + "ffn_out", layer.ffn_out, ParamGroup::Trunk);
    f(p + "norm_ffn", layer.norm_ffn, ParamGroup::Trunk);
  }
  f("output_head", state.output_head, ParamGroup::Trunk);
  f("halt_weight", state.halt_weight, ParamGroup::Trunk);
  f("halt_bias", state.halt_bias, ParamGroup::Trunk);
  if (state.embed_proj.size() > 0) f("embed_proj", state.embed_proj, ParamGroup::Trunk);
  if (state.aug_encoder.has_value()) {
    auto& enc = *state.aug_encoder;
    f("aug.dihedral_table", enc.dihedral_table, ParamGroup::Trunk);
    f("aug.color_pair_table", enc.color_pair_table, ParamGroup::Trunk);
    f("aug.offset_x_table", enc.offset_x_table, ParamGroup::Trunk);
    f("aug.offset_y_table", enc.offset_y_table, ParamGroup::Trunk);
  }
  f("task_embeddings", state.task_embeddings, ParamGroup::Embedding);
}

template <class Adapters, class F>
void visit_lora_params(Adapters& adapters, F&& f) {
  for (size_t i = 0; i < adapters.layers.size(); ++i) {
    auto& layer = adapters.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".lora_";
    auto pair = [&](const std::string& name, auto& lp) {
      f(p + name + ".down", lp.down, ParamGroup::Lora);
      f(p + name + ".up", lp.up, ParamGroup::Lora);
    };
    pair("q", layer.q);
    pair("k", layer.k);
    pair("v", layer.v);
    pair("out", layer.out);
    pair("ffn_in", layer.ffn_in);
    pair("ffn_out", layer.ffn_out);
  }
}

struct ParamCounts {
  uint64_t trunk_params = 0;
  uint64_t embedding_params = 0;
  uint64_t total() const { return trunk_params + embedding_params; }
};

// Closed-form count; see the formula in src/model.cpp. Must equal the sum of
// tensor sizes visited by visit_params.
ParamCounts count_parameters(const ModelConfig& config, uint64_t n_embedding_rows);

namespace detail {

template <class S>
void fill_trunc_normal(Mat<S>& m, Rng& rng, S std_dev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<S>(rng.next_trunc_normal(static_cast<double>(std_dev)));
  }
}

}  // namespace detail

// Deterministic initialization: truncated normal (std 0.02, clipped at 2
// sigma) for weight matrices, gains at 1, halt bias 0 (initial halt
// probability 0.5), augmentation encoders at zero, latents start at zero.
template <class S>
ModelStateT<S> init_model(const ModelConfig& config, uint64_t n_embedding_rows, uint64_t seed) {
  config.validate();
  const int d = config.hidden_dim;
  const int e = config.resolved_embed_dim();
  const S std_dev = S(0.02);
  Rng rng(mix_seed(seed, fnv1a64("model-init")));

  ModelStateT<S> state;
  state.config = config;
  state.token_embedding.resize(config.vocab(), d);
  state.pos_embedding.resize(config.seq_len(), d);
  state.layers.resize(static_cast<size_t>(config.n_trunk_layers));
  for (auto& layer : state.layers) {
    layer.attn_q.resize(d, d);
    layer.attn_k.resize(d, d);
    layer.attn_v.resize(d, d);
    layer.attn_out.resize(d, d);
    layer.ffn_in.resize(d, config.ffn_multiplier * d);
    layer.ffn_out.resize(config.ffn_multiplier * d, d);
    layer.norm_attn = Mat<S>::Ones(1, d);
    layer.norm_ffn = Mat<S>::Ones(1, d);
  }
  state.output_head.resize(d, config.vocab());
  state.halt_weight.resize(d, 1);
  state.halt_bias = Mat<S>::Zero(1, 1);
  if (e != d) state.embed_proj.resize(e, d);
  if (config.embedding_mode == EmbeddingMode::ExplicitEncoded) {
    AugEncoderT<S> enc;
    enc.dihedral_table = Mat<S>::Zero(kDihedralCount, e);
    enc.color_pair_table = Mat<S>::Zero(kNumColors * kNumColors, e);
    enc.offset_x_table = Mat<S>::Zero(kMaxGridSide, e);
    enc.offset_y_table = Mat<S>::Zero(kMaxGridSide, e);
    state.aug_encoder = std::move(enc);
  }
  state.task_embeddings.resize(static_cast<Eigen::Index>(n_embedding_rows), e);

  visit_params(state, [&](const std::string& name, Mat<S>& m, ParamGroup) {
    if (name.rfind("norm_") != std::string::npos || name == "halt_bias" ||
        name.rfind("aug.", 0) == 0) {
      return;  // gains, bias, and augmentation tables keep their fixed init
    }
    detail::fill_trunc_normal(m, rng, std_dev);
  });
  return state;
}

// LoRA pairs: down is truncated-normal, up is zero, so the initial delta is
// exactly zero and adapted outputs equal the base model bit-for-bit.
template <class S>
LoraAdaptersT<S> init_lora_adapters(const ModelConfig& config, int rank, S alpha, uint64_t seed) {
  config.validate();
  if (rank < 1) raise(ErrorCode::StrategyConfigError, "lora rank must be >= 1");
  const int d = config.hidden_dim;
  const int f = config.ffn_multiplier * d;
  Rng rng(mix_seed(seed, fnv1a64("lora-init")));
  LoraAdaptersT<S> adapters;
  adapters.rank = rank;
  adapters.alpha = alpha;
  adapters.layers.resize(static_cast<size_t>(config.n_trunk_layers));
  auto make_pair = [&](LoraPairT<S>& pair, int in, int out) {
    pair.down.resize(rank, in);
    detail::fill_trunc_normal(pair.down, rng, S(0.02));
    pair.up = Mat<S>::Zero(out, rank);
  };
  for (auto& layer : adapters.layers) {
    make_pair(layer.q, d, d);
    make_pair(layer.k, d, d);
    make_pair(layer.v, d, d);
    make_pair(layer.out, d, d);
    make_pair(layer.ffn_in, d, f);
    make_pair(layer.ffn_out, f, d);
  }
  return adapters;
}

template <class To, class From>
ModelStateT<To> cast_model(const ModelStateT<From>& src) {
  ModelStateT<To> dst;
  dst.config = src.config;
  dst.layers.resize(src.layers.size());
  if (src.aug_encoder.has_value()) dst.aug_encoder.emplace();
  // visit_params skips an empty embed_proj, so size it before the paired walk.
  if (src.embed_proj.size() > 0) dst.embed_proj.resize(src.embed_proj.rows(), src.embed_proj.cols());
  std::vector<const Mat<From>*> srcs;
  visit_params(src, [&](const std::string&, const Mat<From>& m, ParamGroup) { srcs.push_back(&m); });
  size_t i = 0;
  visit_params(dst, [&](const std::string&, Mat<To>& m, ParamGroup) {
    m = srcs[i++]->template cast<To>();
  });
  return dst;
}

template <class To, class From>
LoraAdaptersT<To> cast_lora(const LoraAdaptersT<From>& src) {
  LoraAdaptersT<To> dst;
  dst.rank = src.rank;
  dst.alpha = static_cast<To>(src.alpha);
  dst.layers.resize(src.layers.size());
  std::vector<const Mat<From>*> srcs;
  visit_lora_params(src, [&](const std::string&, const Mat<From>& m, ParamGroup) { srcs.push_back(&m); });
  size_t i = 0;
  visit_lora_params(dst, [&](const std::string&, Mat<To>& m, ParamGroup) {
    m = srcs[i++]->template cast<To>();
  });
  return dst;
}

// Value-level explicit-augmentation encoding (the tape-level twin lives in
// ModelRunner::encode_augmentation): dihedral row + mean of the ten
// color-pair rows + offset rows.
template <class S>
Mat<S> encode_explicit_augmentation(const ModelStateT<S>& state, const Augmentation& aug) {
  if (!state.aug_encoder.has_value()) {
    raise(ErrorCode::ModeMismatch, "explicit augmentation encoding requires explicit mode");
  }
  const AugEncoderT<S>& enc = *state.aug_encoder;
  Mat<S> v = enc.dihedral_table.row(static_cast<int>(aug.dihedral));
  Mat<S> color_mean = Mat<S>::Zero(1, v.cols());
  for (int i = 0; i < kNumColors; ++i) {
    color_mean += enc.color_pair_table.row(kNumColors * i + aug.colors.mapping[static_cast<size_t>(i)]);
  }
  v += color_mean / S(kNumColors);
  v += enc.offset_x_table.row(aug.offset.dx);
  v += enc.offset_y_table.row(aug.offset.dy);
  return v;
}

// New-task embedding rows for post-training: mean mode copies the column-wise
// mean of the pre-trained table; gaussian mode samples with the pre-trained
// per-dimension mean and (population) variance.
enum class EmbeddingInit : uint8_t { Mean = 0, Gaussian = 1 };

template <class S>
Mat<S> init_new_task_embeddings(const Mat<S>& pretrained, uint64_t n_new, EmbeddingInit mode,
                                uint64_t seed) {
  if (pretrained.rows() == 0) {
    raise(ErrorCode::EmptyPretrainedTable, "cannot derive new embeddings from an empty table");
  }
  const Eigen::Index e = pretrained.cols();
  Mat<S> mean = pretrained.colwise().mean();
  Mat<S> out(static_cast<Eigen::Index>(n_new), e);
  if (mode == EmbeddingInit::Mean) {
    for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = mean;
    return out;
  }
  Mat<S> var = (pretrained.rowwise() - mean.row(0)).array().square().colwise().mean();
  Rng rng(mix_seed(seed, fnv1a64("init-new-embeddings")));
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (Eigen::Index c = 0; c < e; ++c) {
      out(r, c) = mean(0, c) + std::sqrt(var(0, c)) * static_cast<S>(rng.next_normal());
    }
  }
  return out;
}

// True when a predicted token canvas and the item's target decode to the same
// grid once both are mapped back through the item's augmentation. Inverse
// augmentation is a bijection on grids, so this equals equality in the
// augmented frame while staying well defined for translated targets.
inline bool item_prediction_matches(const std::vector<uint8_t>& predicted_tokens,
                                    const BatchItem& item) {
  const int side = item.target.side;
  TokenCanvas predicted{side, predicted_tokens};
  InverseAugmentation inverse{item.augmentation};
  return inverse(predicted) == inverse(item.target);
}

template <class S>
struct StepTrace {
  Mat<S> logits;     // seq x vocab; populated when keep_logits is set
  S halt_logit = S(0);
  S cell_loss = S(0);  // mean CE over canvas positions at this step
  S halt_loss = S(0);
  uint8_t halt_target = 0;
  bool exact_match = false;
};

template <class S>
struct ItemResult {
  std::vector<StepTrace<S>> steps;
  long layer_applications = 0;
  const StepTrace<S>& final_step() const { return steps.back(); }
};

template <class S>
struct RunRequest {
  const BatchItem* item = nullptr;
  bool with_loss = false;             // requires item->target; fills losses and halt targets
  bool keep_logits = false;           // store per-step logits values
  GradMap<S>* grad_sink = nullptr;    // backprop per supervision step when set
  S loss_scale = S(1);                // backward seed, typically 1/(N_sup*B)
  const std::vector<uint8_t>* fixed_halt_targets = nullptr;  // gradient-check hook
};

// Drives the recursion for one batch item. Per supervision step: H higher
// cycles of L z-updates each, then a single y-update, output and halting
// heads. Only the final higher cycle of each step runs on a gradient tape;
// earlier cycles run gradient-free and their results enter as constants.
template <class S>
class ModelRunner {
 public:
  ModelRunner(const ModelStateT<S>& state, const LoraAdaptersT<S>* lora,
              const TrainableFilter& filter)
      : state_(state), lora_(lora), filter_(filter) {
    if (lora_ != nullptr && lora_->layers.size() != state_.layers.size()) {
      raise(ErrorCode::StrategyConfigError, "adapter layer count does not match trunk");
    }
  }

  ItemResult<S> run(const RunRequest<S>& req) {
    const ModelConfig& cfg = state_.config;
    const BatchItem& item = *req.item;
    check_item(item);
    const bool want_loss = req.with_loss || req.grad_sink != nullptr;
    if (want_loss && item.target.tokens.empty()) {
      raise(ErrorCode::ConfigError, "loss requested for an item without a target");
    }

    const Mat<S> x_ctx = context_value(item);
    const Eigen::Index seq = cfg.seq_len();
    Mat<S> y = Mat<S>::Zero(seq, cfg.hidden_dim);
    Mat<S> z = Mat<S>::Zero(seq, cfg.hidden_dim);

    ItemResult<S> result;
    result.steps.resize(static_cast<size_t>(cfg.supervision_steps));
    std::vector<int> targets;
    if (want_loss) targets.assign(item.target.tokens.begin(), item.target.tokens.end());

    for (int s = 0; s < cfg.supervision_steps; ++s) {
      // Gradient-free higher cycles 1..H-1: refine z only.
      for (int h = 0; h < cfg.higher_cycles - 1; ++h) {
        Tape<S> tape(false);
        auto xc = tape.constant(x_ctx);
        auto yn = tape.constant(y);
        auto zn = tape.constant(z);
        for (int l = 0; l < cfg.lower_cycles; ++l) zn = trunk(tape, tape.add3(xc, yn, zn));
        z = tape.value(zn);
      }
      // Final higher cycle carries gradients: L z-updates, the step's single
      // y-update, and both heads.
      const bool grad_tape = req.grad_sink != nullptr;
      Tape<S> tape(grad_tape);
      auto xc = grad_tape ? build_context(tape, item) : tape.constant(x_ctx);
      auto yn = tape.constant(y);
      auto zn = tape.constant(z);
      for (int l = 0; l < cfg.lower_cycles; ++l) zn = trunk(tape, tape.add3(xc, yn, zn));
      yn = trunk(tape, tape.add(yn, zn));
      auto logits = tape.matmul(yn, tape.leaf(&state_.output_head, filter_.trunk));
      auto pooled = tape.mean_rows(yn);
      auto halt = tape.add(tape.matmul(pooled, tape.leaf(&state_.halt_weight, filter_.trunk)),
                           tape.leaf(&state_.halt_bias, filter_.trunk));

      const Mat<S>& logits_value = tape.value(logits);
      if (!all_finite(logits_value)) {
        raise(ErrorCode::NonFiniteActivation,
              "non-finite logits at supervision step " + std::to_string(s));
      }
      StepTrace<S>& trace = result.steps[static_cast<size_t>(s)];
      trace.halt_logit = tape.value(halt)(0, 0);
      if (!std::isfinite(static_cast<double>(trace.halt_logit))) {
        raise(ErrorCode::NonFiniteActivation, "non-finite halt logit");
      }
      if (req.keep_logits) trace.logits = logits_value;

      if (want_loss) {
        trace.exact_match = item_prediction_matches(argmax_tokens(logits_value), item);
        trace.halt_target = req.fixed_halt_targets != nullptr
                                ? (*req.fixed_halt_targets)[static_cast<size_t>(s)]
                                : static_cast<uint8_t>(trace.exact_match ? 1 : 0);
        auto cell = tape.softmax_cross_entropy(logits, targets);
        auto halt_loss = tape.bce_with_logit(halt, static_cast<S>(trace.halt_target));
        trace.cell_loss = tape.value(cell)(0, 0);
        trace.halt_loss = tape.value(halt_loss)(0, 0);
        if (req.grad_sink != nullptr) {
          auto loss = tape.add(cell, halt_loss);
          tape.backward(loss, req.loss_scale, *req.grad_sink);
        }
      }

      y = tape.value(yn);
      z = tape.value(zn);
      if (!all_finite(y) || !all_finite(z)) {
        raise(ErrorCode::NonFiniteActivation, "non-finite latent state");
      }
    }
    result.layer_applications = layer_applications_;
    layer_applications_ = 0;
    return result;
  }

  static std::vector<uint8_t> argmax_tokens(const Mat<S>& logits) {
    std::vector<uint8_t> tokens(static_cast<size_t>(logits.rows()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      Eigen::Index best = 0;
      logits.row(r).maxCoeff(&best);
      tokens[static_cast<size_t>(r)] = static_cast<uint8_t>(best);
    }
    return tokens;
  }

 private:
  using Ref = typename Tape<S>::Ref;

  void check_item(const BatchItem& item) const {
    const ModelConfig& cfg = state_.config;
    if (item.input.side != cfg.canvas_side) {
      raise(ErrorCode::ConfigError, "item canvas side does not match model config");
    }
    const int64_t rows = state_.task_embeddings.rows();
    if (cfg.embedding_mode == EmbeddingMode::PerVariant) {
      if (static_cast<int64_t>(item.embedding_index) >= rows) {
        raise(ErrorCode::IndexOutOfRange,
              "embedding row " + std::to_string(item.embedding_index) + " outside table of " +
                  std::to_string(rows));
      }
    } else if (static_cast<int64_t>(item.task_ordinal) >= rows) {
      raise(ErrorCode::IndexOutOfRange,
            "task ordinal " + std::to_string(item.task_ordinal) + " outside table of " +
                std::to_string(rows));
    }
  }

  // x_ctx = token embedding rows + positional embeddings + a broadcast task
  // vector (task-variant row, or task row + encoded augmentation in explicit
  // mode), projected from E to D when the dims differ.
  Ref build_context(Tape<S>& tape, const BatchItem& item) {
    auto tokens = tape.gather_rows(tape.leaf(&state_.token_embedding, filter_.trunk),
                                   std::vector<int>(item.input.tokens.begin(), item.input.tokens.end()));
    auto x = tape.add(tokens, tape.leaf(&state_.pos_embedding, filter_.trunk));
    Ref task_vec;
    if (state_.config.embedding_mode == EmbeddingMode::PerVariant) {
      task_vec = tape.gather_rows(tape.leaf(&state_.task_embeddings, filter_.embedding),
                                  {static_cast<int>(item.embedding_index)});
    } else {
      auto base = tape.gather_rows(tape.leaf(&state_.task_embeddings, filter_.embedding),
                                   {static_cast<int>(item.task_ordinal)});
      task_vec = tape.add(base, encode_augmentation(tape, item.augmentation));
    }
    if (state_.embed_proj.size() > 0) {
      task_vec = tape.matmul(task_vec, tape.leaf(&state_.embed_proj, filter_.trunk));
    }
    return tape.add_row(x, task_vec);
  }

  Ref encode_augmentation(Tape<S>& tape, const Augmentation& aug) {
    const AugEncoderT<S>& enc = *state_.aug_encoder;
    auto dih = tape.gather_rows(tape.leaf(&enc.dihedral_table, filter_.trunk),
                                {static_cast<int>(aug.dihedral)});
    std::vector<int> pair_rows(kNumColors);
    for (int i = 0; i < kNumColors; ++i) {
      pair_rows[static_cast<size_t>(i)] = kNumColors * i + aug.colors.mapping[static_cast<size_t>(i)];
    }
    auto colors = tape.mean_rows(
        tape.gather_rows(tape.leaf(&enc.color_pair_table, filter_.trunk), std::move(pair_rows)));
    auto tx = tape.gather_rows(tape.leaf(&enc.offset_x_table, filter_.trunk), {aug.offset.dx});
    auto ty = tape.gather_rows(tape.leaf(&enc.offset_y_table, filter_.trunk), {aug.offset.dy});
    return tape.add(tape.add3(dih, colors, tx), ty);
  }

  Mat<S> context_value(const BatchItem& item) {
    Tape<S> tape(false);
    return tape.value(build_context(tape, item));
  }

  Ref linear(Tape<S>& tape, Ref x, const Mat<S>& w, const LoraPairT<S>* pair) {
    Ref out = tape.matmul(x, tape.leaf(&w, filter_.trunk));
    if (pair != nullptr) {
      auto down = tape.matmul_nt(x, tape.leaf(&pair->down, filter_.lora));
      auto delta = tape.matmul_nt(down, tape.leaf(&pair->up, filter_.lora));
      out = tape.axpy(out, delta, lora_->scale());
    }
    return out;
  }

  Ref layer_apply(Tape<S>& tape, size_t li, Ref x) {
    const TrunkLayerT<S>& layer = state_.layers[li];
    const LoraLayerT<S>* adapters = lora_ != nullptr ? &lora_->layers[li] : nullptr;
    auto q = linear(tape, x, layer.attn_q, adapters ? &adapters->q : nullptr);
    auto k = linear(tape, x, layer.attn_k, adapters ? &adapters->k : nullptr);
    auto v = linear(tape, x, layer.attn_v, adapters ? &adapters->v : nullptr);
    auto attn = tape.attention(q, k, v, state_.config.n_heads);
    auto o = linear(tape, attn, layer.attn_out, adapters ? &adapters->out : nullptr);
    x = tape.rmsnorm(tape.add(x, o), tape.leaf(&layer.norm_attn, filter_.trunk));
    auto hidden = tape.silu(linear(tape, x, layer.ffn_in, adapters ? &adapters->ffn_in : nullptr));
    auto f = linear(tape, hidden, layer.ffn_out, adapters ? &adapters->ffn_out : nullptr);
    x = tape.rmsnorm(tape.add(x, f), tape.leaf(&layer.norm_ffn, filter_.trunk));
    ++layer_applications_;
    return x;
  }

  Ref trunk(Tape<S>& tape, Ref x) {
    for (size_t li = 0; li < state_.layers.size(); ++li) x = layer_apply(tape, li, x);
    return x;
  }

  const ModelStateT<S>& state_;
  const LoraAdaptersT<S>* lora_;
  TrainableFilter filter_;
  long layer_applications_ = 0;
};

template <class S>
struct ForwardOutput {
  std::vector<ItemResult<S>> items;  // per-step logits and halt logits per item
  long layer_applications_per_item = 0;
  Mat<S> halt_logits;  // items x N_sup, for convenience
};

// Whole-batch forward with per-step outputs; no loss, no gradients.
template <class S>
ForwardOutput<S> forward(const ModelStateT<S>& state, const Batch& batch,
                         const LoraAdaptersT<S>* adapters = nullptr) {
  ForwardOutput<S> out;
  out.halt_logits.resize(static_cast<Eigen::Index>(batch.size()), state.config.supervision_steps);
  ModelRunner<S> runner(state, adapters, TrainableFilter{});
  for (size_t i = 0; i < batch.size(); ++i) {
    RunRequest<S> req;
    req.item = &batch.items[i];
    req.keep_logits = true;
    out.items.push_back(runner.run(req));
    for (int s = 0; s < state.config.supervision_steps; ++s) {
      out.halt_logits(static_cast<Eigen::Index>(i), s) =
          out.items.back().steps[static_cast<size_t>(s)].halt_logit;
    }
    out.layer_applications_per_item = out.items.back().layer_applications;
  }
  return out;
}

// Checkpoint: versioned header (config, embedding rows, registry digest,
// adapter metadata) followed by raw little-endian f32 tensors in
// visit_params order, then adapter tensors. Digest 0 means "no registry
// recorded"; continued pre-training refuses such checkpoints.
struct Checkpoint {
  ModelState state;
  std::optional<LoraAdapters> adapters;
  uint64_t registry_digest = 0;
};

void save_checkpoint(const std::string& path, const ModelState& state, uint64_t registry_digest,
                     const LoraAdapters* adapters = nullptr);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace trm
