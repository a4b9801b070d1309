#pragma once

// Prompt-guided segmentation network: patch encoder for windows, prompt
// encoder, memory encoder fusing prompts with their local context, and a
// two-way decoder reading the memory bank.

#include "mpt/dataio.hpp"
#include "mpt/layers.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace mpt {

struct ModelConfig {
  Index D = 128;
  int heads = 2;
  int enc_layers = 3;
  int dec_blocks = 6;
  /// Cross-attention blocks inside the memory encoder.
  int mem_layers = 1;
  Index P = 16;
  Index patch_hop = 8;
  Index T = 256;
  Index C = 3;
  int K_total = 2;
  Index T_ctx = 256;
  double dropout = 0.1;
  int n_neg_max = 3;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Patch start offsets for a length-T sequence. Regular patches start at
/// multiples of `hop`; when (T - P) is not a multiple of hop, one more patch
/// is right-aligned to end at T.
struct PatchLayout {
  Index T = 0;
  Index P = 0;
  Index hop = 0;
  std::vector<Index> starts;

  Index count() const { return static_cast<Index>(starts.size()); }
  /// Number of patches covering timestep t.
  Index coverage(Index t) const;
};

PatchLayout patch_layout(Index T, Index P, Index hop);

/// T_p x (C*P); patch i is rows [start_i, start_i + P) flattened row-major.
template <typename Scalar>
Matrix<Scalar> patchify(const Matrix<Scalar>& window, const PatchLayout& layout);

/// T x T_p matrix whose row t averages the patches covering t.
template <typename Scalar>
Matrix<Scalar> depatchify_matrix(const PatchLayout& layout);

/// Per-timestep logits from patch logits (mean over covering patches).
template <typename Scalar>
Matrix<Scalar> depatchify(const Matrix<Scalar>& patch_logits, const PatchLayout& layout);

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits);

/// Label prompt as a 2K vector: one-hot correct class, then multi-hot
/// incorrect classes.
Eigen::VectorXd label_prompt_vector(const Prompt& prompt, int K);

/// A length-T_ctx slice centred on t_c; positions outside the subsequence
/// are zero-filled and marked invalid.
struct Context {
  MatrixXd values;
  std::vector<bool> valid;
  /// Subsequence-relative timestep of row 0 (may be negative).
  Index start = 0;
};

Context extract_context(const MatrixXd& subseq, Index t_c, Index T_ctx);

template <typename Scalar>
struct Prediction {
  Matrix<Scalar> logits;
  Matrix<Scalar> probabilities;
};

template <typename Scalar>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const ModelConfig& config, ParamSet<Scalar> params, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  ParamSet<Scalar>& params() { return params_; }
  const ParamSet<Scalar>& params() const { return params_; }
  PatchLayout window_layout() const { return patch_layout(config_.T, config_.P, config_.patch_hop); }

  /// Encodes a window (or context) into T_p x D tokens. `position_offset`
  /// is the subsequence-relative timestep of row 0; `valid_patches`, when
  /// given, masks invalid patches as attention keys.
  Var<Scalar> encode_series(Tape<Scalar>& tape, const Matrix<Scalar>& window, double position_offset = 0,
                            const std::vector<bool>* valid_patches = nullptr) const;

  /// 1 x D prompt embedding.
  Var<Scalar> encode_prompt(Tape<Scalar>& tape, const Prompt& prompt) const;

  /// Fuses a prompt embedding with encoded context tokens (1 x D).
  Var<Scalar> encode_memory(Tape<Scalar>& tape, Var<Scalar> prompt_embedding, Var<Scalar> context_tokens,
                            const std::vector<bool>& valid_patches) const;

  /// Full write path for one prompt: context extraction, context encoding,
  /// prompt encoding and memory fusion.
  Var<Scalar> memory_token(Tape<Scalar>& tape, const MatrixXd& subseq, const Prompt& prompt) const;

  /// Patch logits T_p x K_total. An absent or empty memory uses the learned
  /// null token.
  Var<Scalar> decode_states(Tape<Scalar>& tape, Var<Scalar> series_tokens,
                            std::optional<Var<Scalar>> memory) const;

  /// Per-timestep logits T x K_total.
  Var<Scalar> depatchify(Tape<Scalar>& tape, Var<Scalar> patch_logits) const;

  /// encode_series -> decode_states -> depatchify, returning T x K logits.
  Var<Scalar> window_logits(Tape<Scalar>& tape, const Matrix<Scalar>& window, Index window_start,
                            std::optional<Var<Scalar>> memory) const;

  /// Evaluation-mode prediction against a fixed memory matrix (N x D,
  /// possibly empty).
  Prediction<Scalar> predict_window(const Matrix<Scalar>& window, Index window_start,
                                    const Matrix<Scalar>& memory) const;

  /// Validity of context patches: a patch is valid iff any covered
  /// timestep is.
  std::vector<bool> patch_validity(const std::vector<bool>& timestep_valid) const;

 private:
  struct EncoderBlock {
    LayerNormLayer norm_attn, norm_ff;
    AttentionLayer attn;
    FeedForwardLayer ff;
  };
  struct MemoryBlock {
    LayerNormLayer norm_query, norm_ff;
    AttentionLayer cross;
    FeedForwardLayer ff;
  };
  struct TwoWayBlock {
    LayerNormLayer norm_time_self, norm_time_cross, norm_mem_kv, norm_mem_self, norm_mem_cross, norm_time_kv,
        norm_time_ff, norm_mem_ff;
    AttentionLayer time_self, time_to_mem, mem_self, mem_to_time;
    FeedForwardLayer time_ff, mem_ff;
  };

  void build(std::mt19937_64& rng);
  Var<Scalar> residual_dropout(Var<Scalar> x) const;
  Var<Scalar> param(Tape<Scalar>& tape, std::size_t index) const { return tape.param(params_, index); }

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  // Recording tapes write gradients into these buffers during backward.
  mutable ParamSet<Scalar> params_;

  LinearLayer patch_proj_;
  std::vector<EncoderBlock> encoder_;
  LayerNormLayer encoder_norm_;

  LinearLayer label_pos_, label_neg_;
  std::size_t boundary_table_ = 0, type_table_ = 0, aspect_table_ = 0;

  std::vector<MemoryBlock> memory_encoder_;

  std::size_t null_token_ = 0;
  std::vector<TwoWayBlock> decoder_;
  LayerNormLayer decoder_norm_;
  LinearLayer head_;
};

/// Checkpoint directory: manifest.json plus one little-endian float32
/// row-major file per parameter.
void save_checkpoint(const Model<float>& model, const std::filesystem::path& dir);
Model<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace mpt
