#include "rave/gate.hpp"

#include <cmath>
#include <stdexcept>

#include "rave/rope.hpp"

namespace rave {

GateParams GateParams::zeros(int num_layers, int head_dim) {
  GateParams params;
  params.num_layers = num_layers;
  params.head_dim = head_dim;
  params.w_gq.assign(num_layers, Matrix(1, head_dim));
  params.w_gk.assign(num_layers, Matrix(1, head_dim));
  return params;
}

HeadPartition select_heads(int num_query_heads, int num_kv_heads, double head_ratio) {
  if (num_query_heads <= 0 || num_kv_heads <= 0 || num_query_heads % num_kv_heads != 0) {
    throw std::invalid_argument("select_heads: H_q must be a positive multiple of H_kv");
  }
  if (head_ratio < 0.0 || head_ratio > 1.0) {
    throw std::invalid_argument("select_heads: head ratio must lie in [0,1]");
  }
  const int group = num_query_heads / num_kv_heads;
  HeadPartition partition;
  partition.num_query_heads = num_query_heads;
  partition.num_kv_heads = num_kv_heads;
  partition.gated_per_group = static_cast<int>(std::lround(head_ratio * group));
  partition.gated.assign(num_query_heads, 0);
  // Lowest-index heads of each group; identical at every layer.
  for (int g = 0; g < num_kv_heads; ++g) {
    for (int i = 0; i < partition.gated_per_group; ++i) {
      partition.gated[g * group + i] = 1;
    }
  }
  return partition;
}

std::vector<double> gate_score(const Matrix& features, std::span<const double> weights) {
  if (static_cast<std::size_t>(features.cols()) != weights.size()) {
    throw std::invalid_argument("gate_score: weight length must equal the feature dimension");
  }
  std::vector<double> scores(features.rows());
  for (int i = 0; i < features.rows(); ++i) {
    scores[i] = dot(features.row(i), weights);
  }
  return scores;
}

std::pair<std::vector<double>, std::vector<double>> gate_scores(const Matrix& q_pre,
                                                                const Matrix& k_pre,
                                                                const GateParams& params,
                                                                int layer) {
  if (layer < 0 || layer >= params.num_layers) {
    throw std::invalid_argument("gate_scores: no parameters for this layer");
  }
  return {gate_score(q_pre, params.query_weights(layer)),
          gate_score(k_pre, params.key_weights(layer))};
}

Matrix pair_gate(std::span<const double> s_q, std::span<const double> s_k) {
  Matrix gate(static_cast<int>(s_q.size()), static_cast<int>(s_k.size()));
  for (std::size_t i = 0; i < s_q.size(); ++i) {
    for (std::size_t j = 0; j < s_k.size(); ++j) {
      gate(static_cast<int>(i), static_cast<int>(j)) = std::tanh(s_q[i] * s_k[j]);
    }
  }
  return gate;
}

namespace {

// In-place injection on visual columns of the selected rows. Entries whose
// contribution is exactly zero are left untouched so the zero-gate path keeps
// the original bit patterns.
void inject_pre_softmax(Matrix& logits, const Matrix& gate, double gamma,
                        const VisualKeyMask& vmask, GateForm form,
                        std::span<const std::uint8_t> rows) {
  for (int i = 0; i < logits.rows(); ++i) {
    if (!rows[i]) {
      continue;
    }
    for (int j = 0; j < logits.cols(); ++j) {
      if (!vmask[j]) {
        continue;
      }
      if (form == GateForm::kAdditive) {
        const double delta = gamma * gate(i, j);
        if (delta != 0.0) {
          logits(i, j) += delta;
        }
      } else {
        const double factor = 1.0 + gamma * gate(i, j);
        if (factor != 1.0) {
          logits(i, j) *= factor;
        }
      }
    }
  }
}

// Post-softmax bias: add gamma*G on unmasked visual columns, clamp at zero,
// renormalize rows that were actually biased. Untouched rows keep their bits.
void apply_post_softmax_bias(Matrix& probs, const Matrix& gate, double gamma,
                             const VisualKeyMask& vmask, const CausalMask* mask,
                             std::span<const std::uint8_t> rows, std::vector<double>* renorm,
                             std::vector<std::uint8_t>* row_biased) {
  const int n = probs.rows();
  if (renorm != nullptr) {
    renorm->assign(n, 0.0);
  }
  if (row_biased != nullptr) {
    row_biased->assign(n, 0);
  }
  for (int i = 0; i < n; ++i) {
    if (!rows[i]) {
      continue;
    }
    bool biased = false;
    for (int j = 0; j < probs.cols(); ++j) {
      if (!vmask[j] || (mask != nullptr && mask->masked(i, j))) {
        continue;
      }
      const double delta = gamma * gate(i, j);
      if (delta != 0.0) {
        probs(i, j) = std::max(probs(i, j) + delta, 0.0);
        biased = true;
      }
    }
    if (!biased) {
      continue;
    }
    double total = 0.0;
    for (int j = 0; j < probs.cols(); ++j) {
      total += probs(i, j);
    }
    if (total <= 0.0) {
      throw std::runtime_error("post_softmax_recalibrate: degenerate row with zero mass");
    }
    for (int j = 0; j < probs.cols(); ++j) {
      probs(i, j) /= total;
    }
    if (renorm != nullptr) {
      (*renorm)[i] = total;
    }
    if (row_biased != nullptr) {
      (*row_biased)[i] = 1;
    }
  }
}

}  // namespace

Matrix recalibrate_logits(const Matrix& logits, const Matrix& gate, double gamma,
                          const VisualKeyMask& vmask, GateForm form) {
  if (!logits.same_shape(gate)) {
    throw std::invalid_argument("recalibrate_logits: gate and logits shapes differ");
  }
  if (static_cast<int>(vmask.size()) != logits.cols()) {
    throw std::invalid_argument("recalibrate_logits: visual mask length mismatch");
  }
  Matrix out = logits;
  std::vector<std::uint8_t> all_rows(logits.rows(), 1);
  inject_pre_softmax(out, gate, gamma, vmask, form, all_rows);
  return out;
}

Matrix post_softmax_recalibrate(const Matrix& probs, const Matrix& gate, double gamma,
                                const VisualKeyMask& vmask, const CausalMask* mask) {
  if (!probs.same_shape(gate)) {
    throw std::invalid_argument("post_softmax_recalibrate: gate and probs shapes differ");
  }
  if (static_cast<int>(vmask.size()) != probs.cols()) {
    throw std::invalid_argument("post_softmax_recalibrate: visual mask length mismatch");
  }
  Matrix out = probs;
  std::vector<std::uint8_t> all_rows(probs.rows(), 1);
  apply_post_softmax_bias(out, gate, gamma, vmask, mask, all_rows, nullptr, nullptr);
  return out;
}

std::vector<std::uint8_t> gated_query_rows(const SegmentMap& map, GateStage stage) {
  std::vector<std::uint8_t> rows(map.size(), 1);
  if (stage == GateStage::kDecodeOnly) {
    for (int i = 0; i < map.size(); ++i) {
      rows[i] = map.is_answer(i) ? 1 : 0;
    }
  }
  return rows;
}

AttentionResult gated_attention_forward(const Matrix& q_pre, const Matrix& k_pre, const Matrix& v,
                                        std::span<const int> positions, const CausalMask& mask,
                                        double rope_base, std::span<const double> w_gq,
                                        std::span<const double> w_gk, const GateSettings& settings,
                                        const VisualKeyMask& vmask,
                                        std::span<const std::uint8_t> gated_rows,
                                        HeadCache* cache) {
  if (q_pre.rows() != k_pre.rows() || k_pre.rows() != v.rows()) {
    throw std::invalid_argument("gated attention: sequence lengths do not match");
  }
  const int n = q_pre.rows();
  if (static_cast<int>(vmask.size()) != n || static_cast<int>(gated_rows.size()) != n ||
      mask.size() != n) {
    throw std::invalid_argument("gated attention: mask lengths do not match the sequence");
  }

  Matrix q = rope_apply(q_pre, positions, rope_base);
  Matrix k = rope_apply(k_pre, positions, rope_base);
  Matrix logits = attention_logits(q, k);

  // Gate scores come from the pre-rotary features only.
  std::vector<double> s_q = gate_score(q_pre, w_gq);
  std::vector<double> s_k = gate_score(k_pre, w_gk);
  Matrix gate = pair_gate(s_q, s_k);

  Matrix probs;
  Matrix base_probs;
  std::vector<double> renorm;
  std::vector<std::uint8_t> row_biased;
  if (settings.location == GateLocation::kPreSoftmax) {
    Matrix recal = logits;
    inject_pre_softmax(recal, gate, settings.gamma, vmask, settings.form, gated_rows);
    probs = masked_softmax_rows(recal, mask);
  } else {
    base_probs = masked_softmax_rows(logits, mask);
    probs = base_probs;
    apply_post_softmax_bias(probs, gate, settings.gamma, vmask, &mask, gated_rows, &renorm,
                            &row_biased);
  }

  AttentionResult result{matmul(probs, v), probs};
  if (cache != nullptr) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->logits = std::move(logits);
    cache->gate = std::move(gate);
    cache->s_q = std::move(s_q);
    cache->s_k = std::move(s_k);
    cache->probs = result.probs;
    cache->base_probs = std::move(base_probs);
    cache->renorm = std::move(renorm);
    cache->row_biased = std::move(row_biased);
    cache->gated = true;
  }
  return result;
}

void gated_attention_backward(const Matrix& d_output, const HeadCache& cache, const Matrix& q_pre,
                              const Matrix& k_pre, const Matrix& v,
                              std::span<const int> positions, const CausalMask& mask,
                              double rope_base, std::span<const double> w_gq,
                              std::span<const double> w_gk, const GateSettings& settings,
                              const VisualKeyMask& vmask,
                              std::span<const std::uint8_t> gated_rows, Matrix& d_q_pre,
                              Matrix& d_k_pre, Matrix& d_v, std::span<double> d_w_gq,
                              std::span<double> d_w_gk) {
  if (!cache.gated) {
    throw std::logic_error("gated_attention_backward: cache was not produced by the gated path");
  }
  const int n = cache.probs.rows();
  const int d_k = cache.q.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));
  const double gamma = settings.gamma;

  // O = probs * V
  Matrix d_probs = matmul(d_output, transpose(v));
  matmul_accumulate(transpose(cache.probs), d_output, d_v);

  Matrix d_logits(n, n);  // adjoint of the pre-recalibration scores
  Matrix d_gate(n, n);
  std::vector<std::uint8_t> allowed(n, 0);

  if (settings.location == GateLocation::kPreSoftmax) {
    Matrix d_recal(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        allowed[j] = mask.masked(i, j) ? 0 : 1;
      }
      softmax_row_backward(cache.probs.row(i), d_probs.row(i), allowed, d_recal.row(i));
    }
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double g = d_recal(i, j);
        if (gated_rows[i] && vmask[j]) {
          if (settings.form == GateForm::kAdditive) {
            d_logits(i, j) = g;
            d_gate(i, j) = gamma * g;
          } else {
            d_logits(i, j) = g * (1.0 + gamma * cache.gate(i, j));
            d_gate(i, j) = g * cache.logits(i, j) * gamma;
          }
        } else {
          d_logits(i, j) = g;
        }
      }
    }
  } else {
    // Renormalized clamp: base -> biased -> clamped -> row-normalized.
    Matrix d_base(n, n);
    for (int i = 0; i < n; ++i) {
      if (cache.row_biased.empty() || !cache.row_biased[i]) {
        for (int j = 0; j < n; ++j) {
          d_base(i, j) = d_probs(i, j);  // identity on this row
        }
        continue;
      }
      const double z = cache.renorm[i];
      double inner = 0.0;
      for (int j = 0; j < n; ++j) {
        inner += d_probs(i, j) * cache.probs(i, j);
      }
      for (int j = 0; j < n; ++j) {
        if (mask.masked(i, j)) {
          d_base(i, j) = 0.0;
          continue;
        }
        const double d_clamped = (d_probs(i, j) - inner) / z;
        // A clamped-to-zero entry (probs == 0 on a biased visual column)
        // blocks the gradient; everywhere else the clamp is pass-through.
        const bool pass = !vmask[j] || cache.probs(i, j) > 0.0;
        d_base(i, j) = pass ? d_clamped : 0.0;
        if (vmask[j] && pass) {
          d_gate(i, j) = gamma * d_clamped;
        }
      }
    }
    const Matrix& base = cache.base_probs;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        allowed[j] = mask.masked(i, j) ? 0 : 1;
      }
      softmax_row_backward(base.row(i), d_base.row(i), allowed, d_logits.row(i));
    }
  }

  // G = tanh(s_q s_k^T)
  std::vector<double> d_s_q(n, 0.0);
  std::vector<double> d_s_k(n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double g = d_gate(i, j);
      if (g == 0.0) {
        continue;
      }
      const double t = cache.gate(i, j);
      const double d_u = g * (1.0 - t * t);
      d_s_q[i] += d_u * cache.s_k[j];
      d_s_k[j] += d_u * cache.s_q[i];
    }
  }
  for (int i = 0; i < n; ++i) {
    if (d_s_q[i] != 0.0) {
      for (int t = 0; t < d_k; ++t) {
        d_w_gq[t] += d_s_q[i] * q_pre(i, t);
        d_q_pre(i, t) += d_s_q[i] * w_gq[t];
      }
    }
    if (d_s_k[i] != 0.0) {
      for (int t = 0; t < d_k; ++t) {
        d_w_gk[t] += d_s_k[i] * k_pre(i, t);
        d_k_pre(i, t) += d_s_k[i] * w_gk[t];
      }
    }
  }

  // L = rope(Q) rope(K)^T * scale
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

MultiHeadAttentionResult multi_head_attention_forward(
    const Matrix& q_pre, const Matrix& k_pre, const Matrix& v, std::span<const int> positions,
    const CausalMask& mask, const GateParams& params, int layer, const HeadPartition& partition,
    const AttentionConfig& config, const SegmentMap& map, AttentionVariant variant,
    std::vector<HeadCache>* caches) {
  const int n = q_pre.rows();
  const int heads = config.num_query_heads;
  if (q_pre.cols() != heads * config.d_k || k_pre.cols() != config.num_kv_heads * config.d_k ||
      v.cols() != config.num_kv_heads * config.d_v) {
    throw std::invalid_argument("multi_head_attention_forward: projection widths do not match");
  }

  const VisualKeyMask vmask = visual_key_mask(map);
  const std::vector<std::uint8_t> rows = gated_query_rows(map, config.stage);
  const GateSettings settings{config.gamma, config.location, config.form};

  MultiHeadAttentionResult result;
  result.output = Matrix(n, heads * config.d_v);
  result.probs.resize(heads);
  if (caches != nullptr) {
    caches->assign(heads, HeadCache{});
  }

  for (int h = 0; h < heads; ++h) {
    const int kv = kv_head_for_query_head(h, heads, config.num_kv_heads);
    Matrix q_h = column_block(q_pre, h * config.d_k, (h + 1) * config.d_k);
    Matrix k_h = column_block(k_pre, kv * config.d_k, (kv + 1) * config.d_k);
    Matrix v_h = column_block(v, kv * config.d_v, (kv + 1) * config.d_v);
    HeadCache* cache = caches != nullptr ? &(*caches)[h] : nullptr;

    AttentionResult head;
    const bool gated = variant == AttentionVariant::kRave && partition.is_gated(h);
    if (gated) {
      head = gated_attention_forward(q_h, k_h, v_h, positions, mask, config.rope_base,
                                     params.query_weights(layer), params.key_weights(layer),
                                     settings, vmask, rows, cache);
    } else {
      head = standard_attention_forward(q_h, k_h, v_h, positions, mask, config.rope_base, cache);
    }
    for (int i = 0; i < n; ++i) {
      for (int t = 0; t < config.d_v; ++t) {
        result.output(i, h * config.d_v + t) = head.output(i, t);
      }
    }
    result.probs[h] = std::move(head.probs);
  }
  return result;
}

void multi_head_attention_backward(const Matrix& d_output, const std::vector<HeadCache>& caches,
                                   const Matrix& q_pre, const Matrix& k_pre, const Matrix& v,
                                   std::span<const int> positions, const CausalMask& mask,
                                   const GateParams& params, int layer,
                                   const HeadPartition& partition, const AttentionConfig& config,
                                   const SegmentMap& map, AttentionVariant variant,
                                   Matrix& d_q_pre, Matrix& d_k_pre, Matrix& d_v,
                                   GateParams& d_params) {
  const int n = q_pre.rows();
  const int heads = config.num_query_heads;
  const VisualKeyMask vmask = visual_key_mask(map);
  const std::vector<std::uint8_t> rows = gated_query_rows(map, config.stage);
  const GateSettings settings{config.gamma, config.location, config.form};

  for (int h = 0; h < heads; ++h) {
    const int kv = kv_head_for_query_head(h, heads, config.num_kv_heads);
    Matrix q_h = column_block(q_pre, h * config.d_k, (h + 1) * config.d_k);
    Matrix k_h = column_block(k_pre, kv * config.d_k, (kv + 1) * config.d_k);
    Matrix v_h = column_block(v, kv * config.d_v, (kv + 1) * config.d_v);
    Matrix d_out_h = column_block(d_output, h * config.d_v, (h + 1) * config.d_v);

    Matrix d_q_h(n, config.d_k);
    Matrix d_k_h(n, config.d_k);
    Matrix d_v_h(n, config.d_v);

    const bool gated = variant == AttentionVariant::kRave && partition.is_gated(h);
    if (gated) {
      gated_attention_backward(d_out_h, caches[h], q_h, k_h, v_h, positions, mask,
                               config.rope_base, params.query_weights(layer),
                               params.key_weights(layer), settings, vmask, rows, d_q_h, d_k_h,
                               d_v_h, d_params.w_gq[layer].row(0), d_params.w_gk[layer].row(0));
    } else {
      standard_attention_backward(d_out_h, caches[h], v_h, positions, mask, config.rope_base,
                                  d_q_h, d_k_h, d_v_h);
    }
    add_column_block(d_q_pre, d_q_h, h * config.d_k);
    add_column_block(d_k_pre, d_k_h, kv * config.d_k);
    add_column_block(d_v, d_v_h, kv * config.d_v);
  }
}

}  // namespace rave
