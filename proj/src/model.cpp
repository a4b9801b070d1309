#include "mpt/model.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace mpt {

namespace fs = std::filesystem;
using nlohmann::json;

void ModelConfig::validate() const {
  if (D < 2 || D % 2 != 0) throw ConfigError("embedding width D must be even, got " + std::to_string(D));
  if (heads < 1 || D % heads != 0)
    throw ConfigError("D=" + std::to_string(D) + " is not divisible by heads=" + std::to_string(heads));
  if (enc_layers < 0 || dec_blocks < 1 || mem_layers < 1) throw ConfigError("layer counts out of range");
  if (patch_hop < 1 || patch_hop > P || P > T)
    throw ConfigError("patch geometry requires 1 <= patch_hop <= P <= T (P=" + std::to_string(P) + ", hop=" +
                      std::to_string(patch_hop) + ", T=" + std::to_string(T) + ")");
  if (T_ctx < P) throw ConfigError("context length T_ctx must be >= patch length P");
  if (C < 1) throw ConfigError("channel count must be >= 1");
  if (K_total < 1) throw ConfigError("state count must be >= 1");
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0, 1)");
  if (n_neg_max < 0) throw ConfigError("n_neg_max must be non-negative");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"D", c.D},         {"heads", c.heads}, {"enc_layers", c.enc_layers}, {"dec_blocks", c.dec_blocks},
           {"mem_layers", c.mem_layers}, {"P", c.P}, {"patch_hop", c.patch_hop}, {"T", c.T},
           {"C", c.C},         {"K_total", c.K_total}, {"T_ctx", c.T_ctx}, {"dropout", c.dropout},
           {"n_neg_max", c.n_neg_max}};
}

void from_json(const json& j, ModelConfig& c) {
  const auto opt = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("D", c.D);
  opt("heads", c.heads);
  opt("enc_layers", c.enc_layers);
  opt("dec_blocks", c.dec_blocks);
  opt("mem_layers", c.mem_layers);
  opt("P", c.P);
  opt("patch_hop", c.patch_hop);
  opt("T", c.T);
  opt("C", c.C);
  opt("K_total", c.K_total);
  opt("T_ctx", c.T_ctx);
  opt("dropout", c.dropout);
  opt("n_neg_max", c.n_neg_max);
}

// ---------------------------------------------------------------------------
// Patching

Index PatchLayout::coverage(Index t) const {
  Index n = 0;
  for (Index s : starts) n += (t >= s && t < s + P) ? 1 : 0;
  return n;
}

PatchLayout patch_layout(Index T, Index P, Index hop) {
  if (P < 1 || hop < 1 || hop > P) throw ConfigError("patch geometry requires 1 <= hop <= P");
  if (T < P)
    throw ConfigError("sequence length " + std::to_string(T) + " is shorter than the patch length " + std::to_string(P));
  PatchLayout layout{T, P, hop, {}};
  const Index regular = (T - P) / hop + 1;
  for (Index i = 0; i < regular; ++i) layout.starts.push_back(i * hop);
  if ((T - P) % hop != 0) layout.starts.push_back(T - P);
  return layout;
}

template <typename Scalar>
Matrix<Scalar> patchify(const Matrix<Scalar>& window, const PatchLayout& layout) {
  if (window.rows() != layout.T)
    throw ShapeError("window " + shape_str(window) + " does not match patch layout for T=" + std::to_string(layout.T));
  const Index C = window.cols();
  Matrix<Scalar> out(layout.count(), C * layout.P);
  for (Index i = 0; i < layout.count(); ++i)
    for (Index r = 0; r < layout.P; ++r)
      for (Index c = 0; c < C; ++c) out(i, r * C + c) = window(layout.starts[static_cast<std::size_t>(i)] + r, c);
  return out;
}

template <typename Scalar>
Matrix<Scalar> depatchify_matrix(const PatchLayout& layout) {
  Matrix<Scalar> a = Matrix<Scalar>::Zero(layout.T, layout.count());
  for (Index i = 0; i < layout.count(); ++i)
    a.block(layout.starts[static_cast<std::size_t>(i)], i, layout.P, 1).setOnes();
  for (Index t = 0; t < layout.T; ++t) {
    const Scalar n = a.row(t).sum();
    if (n == 0) throw Error("internal error: timestep " + std::to_string(t) + " is not covered by any patch", 3);
    a.row(t) /= n;
  }
  return a;
}

template <typename Scalar>
Matrix<Scalar> depatchify(const Matrix<Scalar>& patch_logits, const PatchLayout& layout) {
  if (patch_logits.rows() != layout.count())
    throw ShapeError("patch logits " + shape_str(patch_logits) + " for " + std::to_string(layout.count()) + " patches");
  return depatchify_matrix<Scalar>(layout) * patch_logits;
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
  Matrix<Scalar> p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const auto e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

Eigen::VectorXd label_prompt_vector(const Prompt& prompt, int K) {
  if (prompt.kind != PromptKind::Label) throw DataError("only label prompts have a class vector");
  if (prompt.correct_state < 0 || prompt.correct_state >= K)
    throw DataError("prompt correct state " + std::to_string(prompt.correct_state) + " outside [0, " +
                    std::to_string(K) + ")");
  Eigen::VectorXd v = Eigen::VectorXd::Zero(2 * K);
  v(prompt.correct_state) = 1;
  for (int s : prompt.incorrect_states) {
    if (s < 0 || s >= K || s == prompt.correct_state)
      throw DataError("prompt incorrect state " + std::to_string(s) + " is invalid");
    v(K + s) = 1;
  }
  return v;
}

Context extract_context(const MatrixXd& subseq, Index t_c, Index T_ctx) {
  if (t_c < 0 || t_c >= subseq.rows())
    throw DataError("context anchor " + std::to_string(t_c) + " outside [0, " + std::to_string(subseq.rows()) + ")");
  if (T_ctx < 1) throw ConfigError("context length must be >= 1");
  Context ctx;
  ctx.start = t_c - T_ctx / 2;
  ctx.values = MatrixXd::Zero(T_ctx, subseq.cols());
  ctx.valid.assign(static_cast<std::size_t>(T_ctx), false);
  for (Index i = 0; i < T_ctx; ++i) {
    const Index t = ctx.start + i;
    if (t >= 0 && t < subseq.rows()) {
      ctx.values.row(i) = subseq.row(t);
      ctx.valid[static_cast<std::size_t>(i)] = true;
    }
  }
  return ctx;
}

// ---------------------------------------------------------------------------
// Model

template <typename Scalar>
Model<Scalar>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build(rng);
}

template <typename Scalar>
Model<Scalar>::Model(const ModelConfig& config, ParamSet<Scalar> params, std::uint64_t seed)
    : config_(config), seed_(seed) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build(rng);
  if (params.size() != params_.size())
    throw ShapeError("parameter count " + std::to_string(params.size()) + " does not match the architecture (" +
                     std::to_string(params_.size()) + ")");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& dst = params_[i];
    const auto& src = params.at(dst.name);
    if (src.value.rows() != dst.value.rows() || src.value.cols() != dst.value.cols())
      throw ShapeError("parameter '" + dst.name + "' has shape " + shape_str(src.value) + ", expected " +
                       shape_str(dst.value));
    dst.value = src.value;
  }
}

template <typename Scalar>
void Model<Scalar>::build(std::mt19937_64& rng) {
  const Index D = config_.D;
  const int K = config_.K_total;
  auto& p = params_;

  patch_proj_ = make_linear(p, "encoder.patch_proj", config_.C * config_.P, D, rng);
  for (int l = 0; l < config_.enc_layers; ++l) {
    const std::string n = "encoder.block" + std::to_string(l);
    EncoderBlock b;
    b.norm_attn = make_layer_norm(p, n + ".norm_attn", D);
    b.attn = make_attention(p, n + ".attn", D, config_.heads, rng);
    b.norm_ff = make_layer_norm(p, n + ".norm_ff", D);
    b.ff = make_feed_forward(p, n + ".ff", D, rng);
    encoder_.push_back(b);
  }
  encoder_norm_ = make_layer_norm(p, "encoder.norm", D);

  label_pos_ = make_linear(p, "prompt.label_pos", K, D, rng);
  label_neg_ = make_linear(p, "prompt.label_neg", K, D, rng);
  boundary_table_ = make_embedding(p, "prompt.boundary_table", 2, D, rng);
  type_table_ = make_embedding(p, "prompt.type_table", 2, D, rng);
  aspect_table_ = make_embedding(p, "prompt.aspect_table", 2, D, rng);

  for (int l = 0; l < config_.mem_layers; ++l) {
    const std::string n = "memory.block" + std::to_string(l);
    MemoryBlock b;
    b.norm_query = make_layer_norm(p, n + ".norm_query", D);
    b.cross = make_attention(p, n + ".cross", D, config_.heads, rng);
    b.norm_ff = make_layer_norm(p, n + ".norm_ff", D);
    b.ff = make_feed_forward(p, n + ".ff", D, rng);
    memory_encoder_.push_back(b);
  }

  null_token_ = make_embedding(p, "decoder.null_token", 1, D, rng);
  for (int l = 0; l < config_.dec_blocks; ++l) {
    const std::string n = "decoder.block" + std::to_string(l);
    TwoWayBlock b;
    b.norm_time_self = make_layer_norm(p, n + ".norm_time_self", D);
    b.time_self = make_attention(p, n + ".time_self", D, config_.heads, rng);
    b.norm_time_cross = make_layer_norm(p, n + ".norm_time_cross", D);
    b.norm_mem_kv = make_layer_norm(p, n + ".norm_mem_kv", D);
    b.time_to_mem = make_attention(p, n + ".time_to_mem", D, config_.heads, rng);
    b.norm_mem_self = make_layer_norm(p, n + ".norm_mem_self", D);
    b.mem_self = make_attention(p, n + ".mem_self", D, config_.heads, rng);
    b.norm_mem_cross = make_layer_norm(p, n + ".norm_mem_cross", D);
    b.norm_time_kv = make_layer_norm(p, n + ".norm_time_kv", D);
    b.mem_to_time = make_attention(p, n + ".mem_to_time", D, config_.heads, rng);
    b.norm_time_ff = make_layer_norm(p, n + ".norm_time_ff", D);
    b.time_ff = make_feed_forward(p, n + ".time_ff", D, rng);
    b.norm_mem_ff = make_layer_norm(p, n + ".norm_mem_ff", D);
    b.mem_ff = make_feed_forward(p, n + ".mem_ff", D, rng);
    decoder_.push_back(b);
  }
  decoder_norm_ = make_layer_norm(p, "decoder.norm", D);
  head_ = make_linear(p, "decoder.head", D, K, rng);
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::residual_dropout(Var<Scalar> x) const {
  return dropout(x, static_cast<Scalar>(config_.dropout));
}

template <typename Scalar>
std::vector<bool> Model<Scalar>::patch_validity(const std::vector<bool>& timestep_valid) const {
  const PatchLayout layout = patch_layout(static_cast<Index>(timestep_valid.size()), config_.P, config_.patch_hop);
  std::vector<bool> out;
  for (Index s : layout.starts) {
    bool any = false;
    for (Index t = s; t < s + layout.P; ++t) any = any || timestep_valid[static_cast<std::size_t>(t)];
    out.push_back(any);
  }
  return out;
}

namespace {

BoolMatrix key_mask(Index queries, const std::vector<bool>& valid) {
  BoolMatrix m(queries, static_cast<Index>(valid.size()));
  for (Index j = 0; j < m.cols(); ++j) m.col(j).setConstant(valid[static_cast<std::size_t>(j)]);
  return m;
}

}  // namespace

template <typename Scalar>
Var<Scalar> Model<Scalar>::encode_series(Tape<Scalar>& tape, const Matrix<Scalar>& window, double position_offset,
                                         const std::vector<bool>* valid_patches) const {
  if (window.cols() != config_.C)
    throw ShapeError("window has " + std::to_string(window.cols()) + " channels, model expects " +
                     std::to_string(config_.C));
  const PatchLayout layout = patch_layout(window.rows(), config_.P, config_.patch_hop);
  std::vector<double> centers;
  for (Index s : layout.starts)
    centers.push_back(position_offset + static_cast<double>(s) + 0.5 * static_cast<double>(config_.P - 1));

  Var<Scalar> x = apply(tape, params_, patch_proj_, tape.constant(patchify(window, layout)));
  x = x + tape.constant(position_encoding<Scalar>(centers, config_.D));

  std::optional<BoolMatrix> mask;
  if (valid_patches != nullptr) {
    if (static_cast<Index>(valid_patches->size()) != layout.count())
      throw ShapeError("patch mask length does not match the patch count");
    mask = key_mask(layout.count(), *valid_patches);
  }
  const BoolMatrix* mask_ptr = mask ? &*mask : nullptr;
  for (const auto& b : encoder_) {
    Var<Scalar> h = apply(tape, params_, b.norm_attn, x);
    x = x + residual_dropout(multi_head_attention(tape, params_, b.attn, h, h, mask_ptr));
    x = x + residual_dropout(apply(tape, params_, b.ff, apply(tape, params_, b.norm_ff, x)));
  }
  return encoder_.empty() ? x : apply(tape, params_, encoder_norm_, x);
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::encode_prompt(Tape<Scalar>& tape, const Prompt& prompt) const {
  const int K = config_.K_total;
  const Index D = config_.D;
  const auto row_selector = [](Index rows, Index which) {
    Matrix<Scalar> s = Matrix<Scalar>::Zero(1, rows);
    s(0, which) = Scalar(1);
    return s;
  };
  Var<Scalar> z;
  if (prompt.kind == PromptKind::Label) {
    if (prompt.correct_state < 0 || prompt.correct_state >= K)
      throw DataError("prompt correct state " + std::to_string(prompt.correct_state) + " outside [0, " +
                      std::to_string(K) + ")");
    if (static_cast<int>(prompt.incorrect_states.size()) > config_.n_neg_max)
      throw DataError("prompt lists " + std::to_string(prompt.incorrect_states.size()) +
                      " incorrect states; at most " + std::to_string(config_.n_neg_max) + " are encodable");
    const Eigen::VectorXd pl = label_prompt_vector(prompt, K);
    const Matrix<Scalar> pos = pl.head(K).transpose().template cast<Scalar>();
    const Matrix<Scalar> neg = pl.tail(K).transpose().template cast<Scalar>();
    Var<Scalar> aspects = param(tape, aspect_table_);
    Var<Scalar> positive = apply(tape, params_, label_pos_, tape.constant(pos)) +
                           matmul(tape.constant(row_selector(2, 0)), aspects);
    Var<Scalar> negative = apply(tape, params_, label_neg_, tape.constant(neg)) +
                           matmul(tape.constant(row_selector(2, 1)), aspects);
    z = positive + negative + matmul(tape.constant(row_selector(2, 0)), param(tape, type_table_));
  } else {
    const Index which = prompt.present ? 0 : 1;
    z = matmul(tape.constant(row_selector(2, prompt.present ? 1 : 0)), param(tape, boundary_table_)) +
        matmul(tape.constant(row_selector(2, which)), param(tape, aspect_table_)) +
        matmul(tape.constant(row_selector(2, 1)), param(tape, type_table_));
  }
  return z + tape.constant(position_encoding<Scalar>({static_cast<double>(prompt.t_c)}, D));
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::encode_memory(Tape<Scalar>& tape, Var<Scalar> prompt_embedding, Var<Scalar> context_tokens,
                                         const std::vector<bool>& valid_patches) const {
  if (prompt_embedding.rows() != 1) throw ShapeError("memory encoder expects a single prompt embedding");
  if (static_cast<Index>(valid_patches.size()) != context_tokens.rows())
    throw ShapeError("context mask length does not match the context tokens");
  const BoolMatrix mask = key_mask(1, valid_patches);
  Var<Scalar> m = prompt_embedding;
  for (const auto& b : memory_encoder_) {
    m = m + residual_dropout(
                multi_head_attention(tape, params_, b.cross, apply(tape, params_, b.norm_query, m), context_tokens, &mask));
    m = m + residual_dropout(apply(tape, params_, b.ff, apply(tape, params_, b.norm_ff, m)));
  }
  return m;
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::memory_token(Tape<Scalar>& tape, const MatrixXd& subseq, const Prompt& prompt) const {
  const Context ctx = extract_context(subseq, prompt.t_c, config_.T_ctx);
  const std::vector<bool> valid = patch_validity(ctx.valid);
  Var<Scalar> tokens = encode_series(tape, ctx.values.template cast<Scalar>(), static_cast<double>(ctx.start), &valid);
  return encode_memory(tape, encode_prompt(tape, prompt), tokens, valid);
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::decode_states(Tape<Scalar>& tape, Var<Scalar> series_tokens,
                                         std::optional<Var<Scalar>> memory) const {
  if (series_tokens.cols() != config_.D) throw ShapeError("series tokens " + shape_str(series_tokens.value()));
  Var<Scalar> t = series_tokens;
  Var<Scalar> m = (memory && memory->rows() > 0) ? *memory : param(tape, null_token_);
  if (m.cols() != config_.D) throw ShapeError("memory tokens " + shape_str(m.value()));
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& b = decoder_[i];
    const bool last = i + 1 == decoder_.size();
    Var<Scalar> h = apply(tape, params_, b.norm_time_self, t);
    t = t + residual_dropout(multi_head_attention(tape, params_, b.time_self, h, h));
    t = t + residual_dropout(multi_head_attention(tape, params_, b.time_to_mem, apply(tape, params_, b.norm_time_cross, t),
                                                  apply(tape, params_, b.norm_mem_kv, m)));
    if (!last) {
      // The memory stream only feeds later blocks, so the last block skips it.
      Var<Scalar> g = apply(tape, params_, b.norm_mem_self, m);
      m = m + residual_dropout(multi_head_attention(tape, params_, b.mem_self, g, g));
      m = m + residual_dropout(multi_head_attention(tape, params_, b.mem_to_time, apply(tape, params_, b.norm_mem_cross, m),
                                                    apply(tape, params_, b.norm_time_kv, t)));
    }
    t = t + residual_dropout(apply(tape, params_, b.time_ff, apply(tape, params_, b.norm_time_ff, t)));
    if (!last) m = m + residual_dropout(apply(tape, params_, b.mem_ff, apply(tape, params_, b.norm_mem_ff, m)));
  }
  return apply(tape, params_, head_, apply(tape, params_, decoder_norm_, t));
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::depatchify(Tape<Scalar>& tape, Var<Scalar> patch_logits) const {
  const PatchLayout layout = window_layout();
  if (patch_logits.rows() != layout.count())
    throw ShapeError("patch logits " + shape_str(patch_logits.value()) + " for " + std::to_string(layout.count()) +
                     " patches");
  return matmul(tape.constant(depatchify_matrix<Scalar>(layout)), patch_logits);
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::window_logits(Tape<Scalar>& tape, const Matrix<Scalar>& window, Index window_start,
                                         std::optional<Var<Scalar>> memory) const {
  if (window.rows() != config_.T)
    throw ShapeError("window " + shape_str(window) + " but the model expects T=" + std::to_string(config_.T));
  Var<Scalar> z = encode_series(tape, window, static_cast<double>(window_start));
  return depatchify(tape, decode_states(tape, z, memory));
}

template <typename Scalar>
Prediction<Scalar> Model<Scalar>::predict_window(const Matrix<Scalar>& window, Index window_start,
                                                 const Matrix<Scalar>& memory) const {
  Tape<Scalar> tape(false);
  std::optional<Var<Scalar>> mem;
  if (memory.rows() > 0) mem = tape.constant(memory);
  Prediction<Scalar> out;
  out.logits = window_logits(tape, window, window_start, mem).value();
  out.probabilities = softmax_rows(out.logits);
  return out;
}

template class Model<float>;
template class Model<double>;
template Matrix<float> patchify(const Matrix<float>&, const PatchLayout&);
template Matrix<double> patchify(const Matrix<double>&, const PatchLayout&);
template Matrix<float> depatchify_matrix<float>(const PatchLayout&);
template Matrix<double> depatchify_matrix<double>(const PatchLayout&);
template Matrix<float> depatchify(const Matrix<float>&, const PatchLayout&);
template Matrix<double> depatchify(const Matrix<double>&, const PatchLayout&);
template Matrix<float> softmax_rows(const Matrix<float>&);
template Matrix<double> softmax_rows(const Matrix<double>&);

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_le_floats(const MatrixXf& m, const fs::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) {
      const auto bits = std::bit_cast<std::uint32_t>(m(r, c));
      const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
      out.write(bytes, 4);
    }
}

MatrixXf read_le_floats(const fs::path& file, Index rows, Index cols) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("missing parameter file " + file.string());
  MatrixXf m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      unsigned char b[4];
      if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError(file.string() + " is truncated");
      const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                 (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      m(r, c) = std::bit_cast<float>(bits);
    }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(file.string() + " has trailing bytes");
  return m;
}

}  // namespace

void save_checkpoint(const Model<float>& model, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = 1;
  manifest["seed"] = model.seed();
  manifest["config"] = model.config();
  manifest["params"] = json::array();
  for (const auto& p : model.params()) {
    const std::string file = p.name + ".bin";
    write_le_floats(p.value, dir / file);
    manifest["params"].push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"file", file}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

Model<float> load_checkpoint(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw DataError("missing checkpoint manifest: " + manifest_path.string());
  json manifest;
  try {
    std::ifstream(manifest_path) >> manifest;
    if (manifest.at("format_version").get<int>() != 1) throw DataError("unsupported checkpoint format version");
    const ModelConfig config = manifest.at("config").get<ModelConfig>();
    ParamSet<float> params;
    for (const auto& entry : manifest.at("params")) {
      const auto shape = entry.at("shape").get<std::vector<Index>>();
      if (shape.size() != 2) throw DataError("parameter shape must be 2-D");
      params.add(entry.at("name").get<std::string>(),
                 read_le_floats(dir / entry.at("file").get<std::string>(), shape[0], shape[1]));
    }
    return Model<float>(config, std::move(params), manifest.at("seed").get<std::uint64_t>());
  } catch (const json::exception& e) {
    throw DataError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
}

}  // namespace mpt
