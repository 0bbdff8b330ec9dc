#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "rpt/graph.hpp"
#include "rpt/tensor.hpp"

namespace rpt {

using Token = int;
using TokenSeq = std::vector<Token>;
using Rng = std::mt19937_64;

/// Reserved vocabulary ids. Label tokens follow at kFirstLabel.
namespace vocab {
inline constexpr Token kPad = 0;
inline constexpr Token kCls = 1;
inline constexpr Token kAns = 2;
inline constexpr Token kUnk = 3;
inline constexpr Token kFirstLabel = 4;
}  // namespace vocab

class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int num_layers = 4;
  int hidden_dim = 64;
  int num_heads = 4;
  int vocab_size = 256;
  int max_seq_len = 64;
  int prefix_len = 10;

  void validate() const;
  int head_dim() const { return hidden_dim / num_heads; }
  /// Longest non-prefix stream (including [CLS] and [ANS]).
  int max_stream_len() const { return max_seq_len - prefix_len; }
  bool operator==(const ModelConfig&) const = default;
};

/// One classification sample in the context / question / [ANS] scheme.
///
/// The model input stream is [CLS] context question [ANS]; the label is the
/// next token after [ANS]. Stream index 0 holds [CLS], so the output position
/// o = |context| + |question| + 1.
struct SampleFrame {
  TokenSeq context;
  TokenSeq question;
  Token label = vocab::kPad;

  TokenSeq input() const;
  int output_position() const { return static_cast<int>(context.size() + question.size()) + 1; }
  int stream_len() const { return output_position() + 1; }
  static constexpr int context_begin() { return 1; }
};

SampleFrame frame_sample(const ModelConfig& cfg, TokenSeq context, TokenSeq question, Token label);

struct BlockParameters {
  Tensor ln1_gamma, ln1_beta;
  Tensor w_qkv, b_qkv;  // d x 3d
  Tensor w_out, b_out;  // d x d
  Tensor ln2_gamma, ln2_beta;
  Tensor w_fc, b_fc;      // d x 4d
  Tensor w_proj, b_proj;  // 4d x d
};

/// Frozen language-model weights. The output head is untied from the embedding.
struct LMParameters {
  Tensor token_embedding;     // |V| x d
  Tensor position_embedding;  // max_seq_len x d
  std::vector<BlockParameters> blocks;
  Tensor lnf_gamma, lnf_beta;
  Tensor w_head, b_head;  // d x |V|

  static LMParameters init(const ModelConfig& cfg, std::uint64_t seed);
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  std::uint64_t checksum() const;
};

/// Trainable layerwise prefix: P = MLP(P_core), one hidden tanh layer.
struct PrefixParameters {
  Tensor core;        // prefix_len x d_small
  Tensor w_in, b_in;  // d_small x 2 d_small
  Tensor w_out, b_out;  // 2 d_small x (L d)
  Tensor expansion;   // prefix_len x (L d), cached MLP(core)

  static PrefixParameters init(const ModelConfig& cfg, const LMParameters& lm, std::uint64_t seed);
  /// Recomputes the cached expansion; call after every update to the trainables.
  void refresh();
  std::vector<Tensor*> trainables();
  std::vector<const Tensor*> trainables() const;
  std::uint64_t checksum() const;
};

/// Additive per-batch prefix tuned at inference; never reparameterized.
struct RobustPrefix {
  Tensor offset;  // prefix_len x (L d)
  std::vector<int> trainable_layers;

  static RobustPrefix zeros(const ModelConfig& cfg, std::vector<int> trainable_layers = {});
  bool layer_trainable(int layer) const;
  /// Zeroes every slice outside the trainable mask.
  void enforce_mask(int hidden_dim);
  bool is_zero() const;
};

/// Hidden states per layer (h^(0) = embeddings, h^(L) feeds the head) and
/// final-layer attention probabilities per head over [prefix, stream] keys.
struct ActivationRecord {
  std::vector<Tensor> hidden;          // L+1 tensors, stream_len x d
  std::vector<Tensor> final_attention;  // num_heads tensors, stream_len x (prefix_len + stream_len)

  std::span<const float> at(int layer, int position) const { return hidden[layer].row(position); }
};

struct ForwardOutput {
  Tensor logits;  // stream_len x |V|
  ActivationRecord record;
};

// ---------------------------------------------------------------------------
// Graph-level interface, used by training, defense and analysis.

struct BlockBinding {
  Var ln1_gamma, ln1_beta, w_qkv, b_qkv, w_out, b_out, ln2_gamma, ln2_beta, w_fc, b_fc, w_proj, b_proj;
};

struct LMBinding {
  Var token_embedding, position_embedding;
  std::vector<BlockBinding> blocks;
  Var lnf_gamma, lnf_beta, w_head, b_head;
};

/// Records the LM weights in `g` (borrowed, so `lm` must outlive the graph).
LMBinding bind_lm(Graph& g, const LMParameters& lm, bool trainable = false);

/// Per-layer prefix keys and values, shared by every sequence in a graph.
struct PrefixKV {
  std::vector<Var> keys;    // per layer: prefix_len x d
  std::vector<Var> values;  // per layer: prefix_len x d
};

/// Prefix parameters recorded in a graph; `matrix` = MLP(core), prefix_len x L d.
struct PrefixBinding {
  Var core, w_in, b_in, w_out, b_out;
  Var matrix;

  std::vector<Var> trainables() const { return {core, w_in, b_in, w_out, b_out}; }
};

PrefixBinding bind_prefix(Graph& g, const PrefixParameters& prefix, bool trainable);
/// Layerwise prefix keys/values from a prefix matrix (prefix_len x L d).
PrefixKV prefix_kv(const ModelConfig& cfg, const LMBinding& lm, Var prefix_matrix);

struct TraceOptions {
  /// Added to the input embeddings (stream_len x d).
  std::optional<Var> embedding_offset;
  /// When false only the row at the output position gets logits.
  bool all_step_logits = false;
};

struct SequenceTrace {
  Var embeddings;                   // token + position embeddings (+ offset)
  std::vector<Var> hidden;          // L+1 entries, stream_len x d
  std::vector<Var> final_attention;  // per head, stream_len x (prefix_len + stream_len)
  Var logits;                       // stream_len x |V| or 1 x |V|
};

SequenceTrace trace_sequence(const ModelConfig& cfg, const LMBinding& lm, const PrefixKV& prefix,
                             std::span<const Token> stream, const TraceOptions& opts = {});

// ---------------------------------------------------------------------------
// Value-level interface.

class MicroLM {
 public:
  MicroLM(ModelConfig cfg, LMParameters params);

  const ModelConfig& config() const { return cfg_; }
  const LMParameters& params() const { return params_; }
  LMParameters& mutable_params() { return params_; }

  /// Full forward with optional robust prefix added to the cached expansion.
  ForwardOutput forward(const SampleFrame& frame, const PrefixParameters& prefix,
                        const RobustPrefix* robust = nullptr) const;

  /// Argmax over `labels` of the logits at the output position; ties go to the lowest id.
  Token predict_label(const SampleFrame& frame, const PrefixParameters& prefix, std::span<const Token> labels,
                      const RobustPrefix* robust = nullptr) const;

  /// Final-layer attention with prefix columns dropped and rows renormalized,
  /// averaged over heads: stream_len x stream_len, lower triangular.
  Tensor final_attention(const SampleFrame& frame, const PrefixParameters& prefix,
                         const RobustPrefix* robust = nullptr) const;

 private:
  ModelConfig cfg_;
  LMParameters params_;
};

void check_prefix_shape(const ModelConfig& cfg, const Tensor& prefix_matrix, const char* what);

/// Argmax of `logits_row` restricted to `labels`; ties go to the lowest token id.
Token argmax_label(std::span<const float> logits_row, std::span<const Token> labels);

/// Drops the first `prefix_len` columns of an attention map and renormalizes each row.
Tensor drop_prefix_and_renormalize(const Tensor& attention, int prefix_len);

}  // namespace rpt
