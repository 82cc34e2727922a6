#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rave/attention.hpp"
#include "rave/config.hpp"
#include "rave/gate.hpp"
#include "rave/matrix.hpp"
#include "rave/segments.hpp"
#include "rave/task.hpp"
#include "rave/trace.hpp"

namespace rave {

// Decoder-only toy transformer: token embeddings, pre-norm residual blocks
// (RMS norm, causal attention with RoPE and optional RAVE gating, SiLU
// feed-forward), final norm and an untied LM head. No biases anywhere.
struct ToyModelSpec {
  int vocab_size = 0;
  int d_model = 0;
  int d_ff = 0;
  int max_seq_len = 0;
  AttentionVariant variant = AttentionVariant::kStandard;
  AttentionConfig attention;

  // Fills the dependent attention dimensions: d_k = d_v = d_model / H_q.
  static ToyModelSpec make(int vocab_size, int d_model, int d_ff, int max_seq_len,
                           int num_layers, int num_query_heads, int num_kv_heads);

  void validate() const;
};

struct LayerParams {
  Matrix ln1;    // 1 x d_model gains
  Matrix w_q;    // d_model x (H_q * d_k)
  Matrix w_k;    // d_model x (H_kv * d_k)
  Matrix w_v;    // d_model x (H_kv * d_v)
  Matrix w_o;    // (H_q * d_v) x d_model
  Matrix ln2;    // 1 x d_model gains
  Matrix w_ff1;  // d_model x d_ff
  Matrix w_ff2;  // d_ff x d_model
};

// All learnable state. named_tensors() exposes every tensor in a fixed
// documented order (embedding, per-layer block weights, final norm, LM head,
// then the per-layer gate vectors); the checkpoint format, the optimizer and
// the finite-difference checks all iterate in that order.
struct ModelParams {
  Matrix embedding;   // vocab x d_model
  std::vector<LayerParams> layers;
  Matrix final_norm;  // 1 x d_model gains
  Matrix lm_head;     // d_model x vocab
  GateParams gate;

  static ModelParams zeros(const ToyModelSpec& spec);

  std::vector<std::pair<std::string, Matrix*>> named_tensors();
  std::vector<std::pair<std::string, const Matrix*>> named_tensors() const;
};

struct LayerForward {
  Matrix x_in;
  Matrix ln1_out;
  std::vector<double> ln1_rms;
  Matrix q_pre;
  Matrix k_pre;
  Matrix v;
  std::vector<HeadCache> heads;
  Matrix attn_concat;
  Matrix x_mid;
  Matrix ln2_out;
  std::vector<double> ln2_rms;
  Matrix ff_pre;
  Matrix ff_act;
};

struct ForwardCache {
  Matrix x0;
  std::vector<LayerForward> layers;
  Matrix x_final;
  Matrix final_out;
  std::vector<double> final_rms;
};

struct DecodeResult {
  std::vector<int> generated;
  std::vector<int> sequence;  // prompt followed by the generated tokens
  SegmentMap map;
  Matrix step_logits;  // one row per generated token
};

// Numerically stable -log softmax(logits)[target].
double cross_entropy_row(std::span<const double> logits, int target);

class ToyModel {
 public:
  explicit ToyModel(const ToyModelSpec& spec);

  // Deterministic parameter draw; the stream is independent of the attention
  // variant, so standard and RAVE models share initial weights on a seed.
  void init_params(std::uint64_t seed);

  const ToyModelSpec& spec() const { return spec_; }
  const HeadPartition& partition() const { return partition_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  // Teacher-forced pass; logits row t scores the token at t+1. When trace is
  // given, attention rows of every answer position are recorded.
  Matrix forward(const std::vector<int>& tokens, const SegmentMap& map,
                 ForwardCache* cache = nullptr, AttentionTrace* trace = nullptr) const;

  // Mean cross-entropy over positions whose next token is an answer token.
  double batch_loss(const ToyBatch& batch) const;

  // Same loss; parameter gradients are accumulated into grads, which must be
  // shaped like params (ModelParams::zeros).
  double loss_and_gradients(const ToyBatch& batch, ModelParams& grads) const;

  // Greedy argmax decoding from a prompt whose map has an empty answer set.
  // The incremental path reuses cached key/value projections and matches the
  // full re-forward path bitwise; incremental=false forces the re-forward.
  DecodeResult greedy_decode(const std::vector<int>& prompt, const SegmentMap& prompt_map,
                             int max_new_tokens, AttentionTrace* trace = nullptr,
                             bool incremental = true) const;

 private:
  void check_tokens(const std::vector<int>& tokens, const SegmentMap& map) const;
  double sequence_loss_and_gradients(const ToySequence& seq, double inv_count,
                                     ModelParams& grads) const;

  ToyModelSpec spec_;
  HeadPartition partition_;
  ModelParams params_;
};

}  // namespace rave
