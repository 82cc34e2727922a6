#include "rave/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "rave/rope.hpp"

namespace rave {

Matrix attention_logits(const Matrix& q, const Matrix& k) {
  if (q.cols() != k.cols()) {
    throw std::invalid_argument("attention_logits: head dimensions do not match");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix out(q.rows(), k.rows());
  for (int i = 0; i < q.rows(); ++i) {
    for (int j = 0; j < k.rows(); ++j) {
      out(i, j) = dot(q.row(i), k.row(j)) * scale;
    }
  }
  return out;
}

void masked_softmax_row(std::span<const double> logits, std::span<const std::uint8_t> allowed,
                        std::span<double> out) {
  if (logits.size() != allowed.size() || logits.size() != out.size()) {
    throw std::invalid_argument("masked_softmax_row: length mismatch");
  }
  const std::size_t n = logits.size();
  double max_logit = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed[j]) {
      any = true;
      if (logits[j] > max_logit) {
        max_logit = logits[j];
      }
    }
  }
  if (!any) {
    throw std::logic_error("masked_softmax_row: fully masked row");
  }
  double denom = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed[j]) {
      out[j] = std::exp(logits[j] - max_logit);
      denom += out[j];
    } else {
      out[j] = 0.0;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed[j]) {
      out[j] /= denom;
    }
  }
}

Matrix masked_softmax_rows(const Matrix& logits, const CausalMask& mask) {
  if (logits.rows() != logits.cols() || logits.rows() != mask.size()) {
    throw std::invalid_argument("masked_softmax_rows: mask and logits sizes do not match");
  }
  const int n = logits.rows();
  Matrix out(n, n);
  std::vector<std::uint8_t> allowed(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      allowed[j] = mask.masked(i, j) ? 0 : 1;
    }
    masked_softmax_row(logits.row(i), allowed, out.row(i));
  }
  return out;
}

int kv_head_for_query_head(int query_head, int num_query_heads, int num_kv_heads) {
  if (num_query_heads <= 0 || num_kv_heads <= 0 || num_query_heads % num_kv_heads != 0) {
    throw std::invalid_argument("gqa: H_q must be a positive multiple of H_kv");
  }
  if (query_head < 0 || query_head >= num_query_heads) {
    throw std::invalid_argument("gqa: query head out of range");
  }
  return query_head / (num_query_heads / num_kv_heads);
}

AttentionResult standard_attention_forward(const Matrix& q_pre, const Matrix& k_pre,
                                           const Matrix& v, std::span<const int> positions,
                                           const CausalMask& mask, double rope_base,
                                           HeadCache* cache) {
  if (q_pre.rows() != k_pre.rows() || k_pre.rows() != v.rows()) {
    throw std::invalid_argument("attention: sequence lengths do not match");
  }
  if (q_pre.rows() != mask.size()) {
    throw std::invalid_argument("attention: mask size does not match sequence length");
  }
  Matrix q = rope_apply(q_pre, positions, rope_base);
  Matrix k = rope_apply(k_pre, positions, rope_base);
  Matrix probs = masked_softmax_rows(attention_logits(q, k), mask);
  AttentionResult result{matmul(probs, v), probs};
  if (cache != nullptr) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->probs = result.probs;
    cache->gated = false;
  }
  return result;
}

void softmax_row_backward(std::span<const double> probs, std::span<const double> d_probs,
                          std::span<const std::uint8_t> allowed, std::span<double> d_logits) {
  double inner = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (allowed[j]) {
      inner += d_probs[j] * probs[j];
    }
  }
  for (std::size_t j = 0; j < probs.size(); ++j) {
    d_logits[j] = allowed[j] ? probs[j] * (d_probs[j] - inner) : 0.0;
  }
}

void standard_attention_backward(const Matrix& d_output, const HeadCache& cache, const Matrix& v,
                                 std::span<const int> positions, const CausalMask& mask,
                                 double rope_base, Matrix& d_q_pre, Matrix& d_k_pre,
                                 Matrix& d_v) {
  const int n = cache.probs.rows();
  const int d_k = cache.q.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));

  // O = probs * V
  Matrix d_probs = matmul(d_output, transpose(v));
  matmul_accumulate(transpose(cache.probs), d_output, d_v);

  Matrix d_logits(n, n);
  std::vector<std::uint8_t> allowed(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      allowed[j] = mask.masked(i, j) ? 0 : 1;
    }
    softmax_row_backward(cache.probs.row(i), d_probs.row(i), allowed, d_logits.row(i));
  }

  // L = Q K^T * scale
  Matrix d_q(n, d_k);
  Matrix d_kk(n, d_k);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double g = d_logits(i, j) * scale;
      if (g == 0.0) {
        continue;
      }
      for (int t = 0; t < d_k; ++t) {
        d_q(i, t) += g * cache.k(j, t);
        d_kk(j, t) += g * cache.q(i, t);
      }
    }
  }
  add_in_place(d_q_pre, rope_backward(d_q, positions, rope_base));
  add_in_place(d_k_pre, rope_backward(d_kk, positions, rope_base));
}

}  // namespace rave
