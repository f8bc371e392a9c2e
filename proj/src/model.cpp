#include "trm/model.hpp"

#include <fstream>

#include "trm/serial.hpp"

namespace trm {

void ModelConfig::validate() const {
  if (hidden_dim < 1) raise(ErrorCode::ConfigError, "hidden_dim must be positive");
  if (embed_dim < 0) raise(ErrorCode::ConfigError, "embed_dim must be nonnegative");
  if (n_trunk_layers < 1) raise(ErrorCode::ConfigError, "n_trunk_layers must be >= 1");
  if (n_heads < 1 || hidden_dim % n_heads != 0) {
    raise(ErrorCode::ConfigError, "n_heads must be >= 1 and divide hidden_dim");
  }
  if (lower_cycles < 1) raise(ErrorCode::ConfigError, "lower_cycles must be >= 1");
  if (higher_cycles < 1) raise(ErrorCode::ConfigError, "higher_cycles must be >= 1");
  if (supervision_steps < 1) raise(ErrorCode::ConfigError, "supervision_steps must be >= 1");
  if (canvas_side < 1 || canvas_side > kMaxGridSide) {
    raise(ErrorCode::ConfigError, "canvas_side must be in [1, 30]");
  }
  if (ffn_multiplier < 1) raise(ErrorCode::ConfigError, "ffn_multiplier must be >= 1");
}

// Closed-form parameter count. With D = hidden_dim, E = embed dim,
// m = ffn_multiplier, V = vocab (11), S = seq_len:
//   per trunk layer: 4*D^2 (attention) + 2*m*D^2 (feed-forward) + 2*D (gains)
//   trunk = V*D (token table) + S*D (positions) + layers*(above)
//         + D*V (output head) + D + 1 (halting head)
//         + E*D if E != D (task-vector projection)
//         + (8 + 100 + 30 + 30)*E in explicit mode (augmentation tables)
//   embedding = rows * E  (the task-variant table, exactly)
ParamCounts count_parameters(const ModelConfig& config, uint64_t n_embedding_rows) {
  config.validate();
  const uint64_t d = static_cast<uint64_t>(config.hidden_dim);
  const uint64_t e = static_cast<uint64_t>(config.resolved_embed_dim());
  const uint64_t m = static_cast<uint64_t>(config.ffn_multiplier);
  const uint64_t v = static_cast<uint64_t>(config.vocab());
  const uint64_t s = static_cast<uint64_t>(config.seq_len());

  ParamCounts counts;
  const uint64_t per_layer = 4 * d * d + 2 * m * d * d + 2 * d;
  counts.trunk_params = v * d + s * d + static_cast<uint64_t>(config.n_trunk_layers) * per_layer +
                        d * v + d + 1;
  if (e != d) counts.trunk_params += e * d;
  if (config.embedding_mode == EmbeddingMode::ExplicitEncoded) {
    counts.trunk_params += static_cast<uint64_t>(kDihedralCount + kNumColors * kNumColors +
                                                 2 * kMaxGridSide) * e;
  }
  counts.embedding_params = n_embedding_rows * e;
  return counts;
}

namespace {

constexpr char kMagic[8] = {'T', 'R', 'M', 'C', 'K', 'P', 'T', '1'};

void write_tensor(std::ostream& out, const Mat<float>& m) {
  put_u32(out, static_cast<uint32_t>(m.rows()));
  put_u32(out, static_cast<uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) put_f32(out, m.data()[i]);
}

void read_tensor(std::istream& in, Mat<float>& m, const std::string& name) {
  const uint32_t rows = get_u32(in);
  const uint32_t cols = get_u32(in);
  if (rows != static_cast<uint32_t>(m.rows()) || cols != static_cast<uint32_t>(m.cols())) {
    raise(ErrorCode::IoError, "checkpoint tensor " + name + " has shape " + std::to_string(rows) +
                                  "x" + std::to_string(cols) + ", expected " +
                                  std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_f32(in);
}

void write_config(std::ostream& out, const ModelConfig& config) {
  put_i32(out, config.hidden_dim);
  put_i32(out, config.resolved_embed_dim());
  put_i32(out, config.n_trunk_layers);
  put_i32(out, config.n_heads);
  put_i32(out, config.lower_cycles);
  put_i32(out, config.higher_cycles);
  put_i32(out, config.supervision_steps);
  put_i32(out, config.canvas_side);
  put_i32(out, config.ffn_multiplier);
  put_u8(out, static_cast<uint8_t>(config.embedding_mode));
}

ModelConfig read_config(std::istream& in) {
  ModelConfig config;
  config.hidden_dim = get_i32(in);
  config.embed_dim = get_i32(in);
  config.n_trunk_layers = get_i32(in);
  config.n_heads = get_i32(in);
  config.lower_cycles = get_i32(in);
  config.higher_cycles = get_i32(in);
  config.supervision_steps = get_i32(in);
  config.canvas_side = get_i32(in);
  config.ffn_multiplier = get_i32(in);
  const uint8_t mode = get_u8(in);
  if (mode > 1) raise(ErrorCode::IoError, "checkpoint has unknown embedding mode");
  config.embedding_mode = static_cast<EmbeddingMode>(mode);
  config.validate();
  return config;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelState& state, uint64_t registry_digest,
                     const LoraAdapters* adapters) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::IoError, "cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_config(out, state.config);
  put_u64(out, static_cast<uint64_t>(state.embedding_rows()));
  put_u64(out, registry_digest);
  put_u8(out, adapters != nullptr ? 1 : 0);
  if (adapters != nullptr) {
    put_i32(out, adapters->rank);
    put_f32(out, adapters->alpha);
  }
  visit_params(state, [&](const std::string&, const Mat<float>& m, ParamGroup) {
    write_tensor(out, m);
  });
  if (adapters != nullptr) {
    visit_lora_params(*adapters, [&](const std::string&, const Mat<float>& m, ParamGroup) {
      write_tensor(out, m);
    });
  }
  if (!out) raise(ErrorCode::IoError, "checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::IoError, "cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    raise(ErrorCode::IoError, "not a checkpoint file: " + path);
  }
  const ModelConfig config = read_config(in);
  const uint64_t rows = get_u64(in);

  Checkpoint ckpt;
  ckpt.registry_digest = get_u64(in);
  const uint8_t has_adapters = get_u8(in);
  int rank = 0;
  float alpha = 0.0f;
  if (has_adapters != 0) {
    rank = get_i32(in);
    alpha = get_f32(in);
  }
  ckpt.state = init_model<float>(config, rows, 0);
  visit_params(ckpt.state, [&](const std::string& name, Mat<float>& m, ParamGroup) {
    read_tensor(in, m, name);
  });
  if (has_adapters != 0) {
    ckpt.adapters = init_lora_adapters<float>(config, rank, alpha, 0);
    visit_lora_params(*ckpt.adapters, [&](const std::string& name, Mat<float>& m, ParamGroup) {
      read_tensor(in, m, name);
    });
  }
  if (!in) raise(ErrorCode::IoError, "checkpoint truncated: " + path);
  return ckpt;
}

}  // namespace trm
