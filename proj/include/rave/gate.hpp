#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "rave/attention.hpp"
#include "rave/config.hpp"
#include "rave/matrix.hpp"
#include "rave/segments.hpp"

namespace rave {

// Per-layer gate projections: one query-side and one key-side weight vector
// of length d_k per layer, shared across all query heads of that layer.
// 2 * L * d_k learnable scalars in total; initialized to exactly zero so the
// gated path reproduces standard attention bit for bit until training moves
// the weights.
struct GateParams {
  int num_layers = 0;
  int head_dim = 0;
  std::vector<Matrix> w_gq;  // per layer, 1 x d_k
  std::vector<Matrix> w_gk;  // per layer, 1 x d_k

  static GateParams zeros(int num_layers, int head_dim);

  std::span<const double> query_weights(int layer) const { return w_gq[layer].row(0); }
  std::span<const double> key_weights(int layer) const { return w_gk[layer].row(0); }

  int scalar_count() const { return 2 * num_layers * head_dim; }
};

// Which query heads run the gated path. Each GQA group of r = H_q/H_kv query
// heads contributes its round(p*r) lowest-index heads; the same partition is
// used at every layer.
struct HeadPartition {
  int num_query_heads = 0;
  int num_kv_heads = 0;
  int gated_per_group = 0;
  std::vector<std::uint8_t> gated;  // per query head

  bool is_gated(int head) const { return gated[head] != 0; }
  int gated_count() const { return gated_per_group * num_kv_heads; }
};

HeadPartition select_heads(int num_query_heads, int num_kv_heads, double head_ratio);

// Per-token scalar scores from pre-rotary features: s_q = Qbar w_gq,
// s_k = Kbar w_gk. No positional dependence enters here.
std::vector<double> gate_score(const Matrix& features, std::span<const double> weights);

std::pair<std::vector<double>, std::vector<double>> gate_scores(const Matrix& q_pre,
                                                                const Matrix& k_pre,
                                                                const GateParams& params,
                                                                int layer);

// G_ij = tanh(s_q[i] * s_k[j]); every entry lies strictly inside (-1, 1).
Matrix pair_gate(std::span<const double> s_q, std::span<const double> s_k);

// Pre-softmax recalibration on visual-key columns. Additive form adds
// gamma*G; multiplicative form scales by (1 + gamma*G). Non-visual columns
// and zero-contribution entries are copied bit for bit.
Matrix recalibrate_logits(const Matrix& logits, const Matrix& gate, double gamma,
                          const VisualKeyMask& vmask, GateForm form);

// Post-softmax variant: bias visual columns of a row-stochastic matrix by
// gamma*G, clamp at zero, renormalize each biased row. When a mask is given
// the bias skips masked columns so causality is preserved; rows receiving no
// bias are returned unchanged. A biased row whose clamped mass is zero is a
// degenerate-row error.
Matrix post_softmax_recalibrate(const Matrix& probs, const Matrix& gate, double gamma,
                                const VisualKeyMask& vmask, const CausalMask* mask = nullptr);

// Query rows that receive recalibration: every row for prefill_and_decode,
// answer rows only for decode_only.
std::vector<std::uint8_t> gated_query_rows(const SegmentMap& map, GateStage stage);

struct GateSettings {
  double gamma = 1.0;
  GateLocation location = GateLocation::kPreSoftmax;
  GateForm form = GateForm::kAdditive;
};

// Single gated head. gated_rows selects the query rows that receive
// recalibration; ungated callers should use standard_attention_forward,
// which this reduces to when the gate weights are zero.
AttentionResult gated_attention_forward(const Matrix& q_pre, const Matrix& k_pre, const Matrix& v,
                                        std::span<const int> positions, const CausalMask& mask,
                                        double rope_base, std::span<const double> w_gq,
                                        std::span<const double> w_gk, const GateSettings& settings,
                                        const VisualKeyMask& vmask,
                                        std::span<const std::uint8_t> gated_rows,
                                        HeadCache* cache = nullptr);

// Reverse pass through the gated head: exact adjoints of the score, gate,
// recalibration and softmax steps. Accumulates into the d_* arguments;
// d_w_gq / d_w_gk have length d_k.
void gated_attention_backward(const Matrix& d_output, const HeadCache& cache, const Matrix& q_pre,
                              const Matrix& k_pre, const Matrix& v,
                              std::span<const int> positions, const CausalMask& mask,
                              double rope_base, std::span<const double> w_gq,
                              std::span<const double> w_gk, const GateSettings& settings,
                              const VisualKeyMask& vmask,
                              std::span<const std::uint8_t> gated_rows, Matrix& d_q_pre,
                              Matrix& d_k_pre, Matrix& d_v, std::span<double> d_w_gq,
                              std::span<double> d_w_gk);

struct MultiHeadAttentionResult {
  Matrix output;               // N x (H_q * d_v)
  std::vector<Matrix> probs;   // per query head, N x N
};

// All heads of one layer. q_pre is N x (H_q*d_k); k_pre / v are
// N x (H_kv*d_k) / N x (H_kv*d_v) and are shared within each GQA group.
// Heads outside the partition take the standard path unchanged.
MultiHeadAttentionResult multi_head_attention_forward(
    const Matrix& q_pre, const Matrix& k_pre, const Matrix& v, std::span<const int> positions,
    const CausalMask& mask, const GateParams& params, int layer, const HeadPartition& partition,
    const AttentionConfig& config, const SegmentMap& map, AttentionVariant variant,
    std::vector<HeadCache>* caches = nullptr);

// Reverse pass over all heads; mirrors multi_head_attention_forward.
void multi_head_attention_backward(const Matrix& d_output, const std::vector<HeadCache>& caches,
                                   const Matrix& q_pre, const Matrix& k_pre, const Matrix& v,
                                   std::span<const int> positions, const CausalMask& mask,
                                   const GateParams& params, int layer,
                                   const HeadPartition& partition, const AttentionConfig& config,
                                   const SegmentMap& map, AttentionVariant variant,
                                   Matrix& d_q_pre, Matrix& d_k_pre, Matrix& d_v,
                                   GateParams& d_params);

}  // namespace rave
