#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rave/matrix.hpp"

namespace rave {

// Causal mask over an N x N score matrix: column j is visible to row i iff
// j <= i. Masked entries are excluded from the softmax reduction outright
// rather than carrying an infinite float.
struct CausalMask {
  explicit CausalMask(int n) : n(n) {}
  bool masked(int i, int j) const { return j > i; }
  int size() const { return n; }
  int n = 0;
};

// L_ij = <Q_i, K_j> / sqrt(d_k).
Matrix attention_logits(const Matrix& q, const Matrix& k);

// Row softmax over the allowed columns, stabilized by row-max subtraction.
// Disallowed columns come out exactly 0. Throws if no column is allowed
// (impossible under a causal mask, where column i is visible to row i).
void masked_softmax_row(std::span<const double> logits, std::span<const std::uint8_t> allowed,
                        std::span<double> out);

Matrix masked_softmax_rows(const Matrix& logits, const CausalMask& mask);

// Grouped-query attention index mapping: query head h reads key/value head
// floor(h / r) with r = H_q / H_kv. Pure index arithmetic, no data copies.
int kv_head_for_query_head(int query_head, int num_query_heads, int num_kv_heads);

struct AttentionResult {
  Matrix output;  // N x d_v
  Matrix probs;   // N x N attention distribution (returned for tracing)
};

// Per-head forward state kept for the reverse pass. Standard heads fill only
// q/k/probs; gated heads additionally fill the gate-side fields.
struct HeadCache {
  Matrix q;       // post-rotary queries
  Matrix k;       // post-rotary keys
  Matrix probs;   // final attention distribution
  bool gated = false;

  Matrix logits;                    // scores before recalibration
  Matrix gate;                      // G = phi(s_q s_k^T)
  std::vector<double> s_q;
  std::vector<double> s_k;
  Matrix base_probs;                // post-softmax variant: distribution before biasing
  std::vector<double> renorm;       // post-softmax variant: row sums after clamping
  std::vector<std::uint8_t> row_biased;
};

// Single-head causal attention with rotary embedding:
// O = softmax(rope(Q) rope(K)^T / sqrt(d_k) + M) V.
AttentionResult standard_attention_forward(const Matrix& q_pre, const Matrix& k_pre,
                                           const Matrix& v, std::span<const int> positions,
                                           const CausalMask& mask, double rope_base,
                                           HeadCache* cache = nullptr);

// Reverse pass of standard_attention_forward. Gradients are accumulated into
// d_q_pre / d_k_pre / d_v.
void standard_attention_backward(const Matrix& d_output, const HeadCache& cache, const Matrix& v,
                                 std::span<const int> positions, const CausalMask& mask,
                                 double rope_base, Matrix& d_q_pre, Matrix& d_k_pre, Matrix& d_v);

// Softmax adjoint for one row: d_logit_j = p_j * (d_p_j - sum_k d_p_k p_k)
// over allowed columns; disallowed columns stay zero.
void softmax_row_backward(std::span<const double> probs, std::span<const double> d_probs,
                          std::span<const std::uint8_t> allowed, std::span<double> d_logits);

}  // namespace rave
