#include "rave/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "rave/rng.hpp"
#include "rave/rope.hpp"

namespace rave {

namespace {

constexpr double kRmsEps = 1e-6;

void rms_norm_row(std::span<const double> x, std::span<const double> gains,
                  std::span<double> out, double* rms_out) {
  const int d = static_cast<int>(x.size());
  double sum = 0.0;
  for (int j = 0; j < d; ++j) {
    sum += x[j] * x[j];
  }
  const double rms = std::sqrt(sum / d + kRmsEps);
  for (int j = 0; j < d; ++j) {
    out[j] = x[j] * gains[j] / rms;
  }
  if (rms_out != nullptr) {
    *rms_out = rms;
  }
}

void rms_norm_rows(const Matrix& x, const Matrix& gains, Matrix& out, std::vector<double>& rms) {
  out = Matrix(x.rows(), x.cols());
  rms.assign(x.rows(), 0.0);
  for (int i = 0; i < x.rows(); ++i) {
    rms_norm_row(x.row(i), gains.row(0), out.row(i), &rms[i]);
  }
}

// dx_j += dy_j g_j / r - x_j c / (d r^3) with c = sum_t dy_t g_t x_t;
// dg_j += dy_j x_j / r.
void rms_norm_backward_rows(const Matrix& x, const Matrix& gains, const std::vector<double>& rms,
                            const Matrix& d_out, Matrix& d_x, Matrix& d_gains) {
  const int d = x.cols();
  for (int i = 0; i < x.rows(); ++i) {
    const double r = rms[i];
    double c = 0.0;
    for (int j = 0; j < d; ++j) {
      c += d_out(i, j) * gains(0, j) * x(i, j);
    }
    const double r3 = r * r * r;
    for (int j = 0; j < d; ++j) {
      d_x(i, j) += d_out(i, j) * gains(0, j) / r - x(i, j) * c / (d * r3);
      d_gains(0, j) += d_out(i, j) * x(i, j) / r;
    }
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double silu(double x) { return x * sigmoid(x); }

double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

std::vector<double> row_matmul(std::span<const double> x, const Matrix& w) {
  if (static_cast<int>(x.size()) != w.rows()) {
    throw std::invalid_argument("row_matmul: inner dimensions do not match");
  }
  std::vector<double> out(w.cols(), 0.0);
  for (int t = 0; t < w.rows(); ++t) {
    const double xt = x[t];
    std::span<const double> w_row = w.row(t);
    for (int j = 0; j < w.cols(); ++j) {
      out[j] += xt * w_row[j];
    }
  }
  return out;
}

int argmax(std::span<const double> v) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(v.size()); ++j) {
    if (v[j] > v[best]) {
      best = j;
    }
  }
  return best;
}

}  // namespace

ToyModelSpec ToyModelSpec::make(int vocab_size, int d_model, int d_ff, int max_seq_len,
                                int num_layers, int num_query_heads, int num_kv_heads) {
  ToyModelSpec spec;
  spec.vocab_size = vocab_size;
  spec.d_model = d_model;
  spec.d_ff = d_ff;
  spec.max_seq_len = max_seq_len;
  spec.attention.d_model = d_model;
  spec.attention.num_layers = num_layers;
  spec.attention.num_query_heads = num_query_heads;
  spec.attention.num_kv_heads = num_kv_heads;
  if (num_query_heads <= 0 || d_model % num_query_heads != 0) {
    throw std::invalid_argument("ToyModelSpec: d_model must be divisible by H_q");
  }
  spec.attention.d_k = d_model / num_query_heads;
  spec.attention.d_v = spec.attention.d_k;
  spec.validate();
  return spec;
}

void ToyModelSpec::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || d_ff <= 0 || max_seq_len <= 0) {
    throw std::invalid_argument("ToyModelSpec: dimensions must be positive");
  }
  attention.validate();
  if (attention.d_model != d_model) {
    throw std::invalid_argument("ToyModelSpec: attention d_model disagrees");
  }
  if (attention.num_query_heads * attention.d_k != d_model) {
    throw std::invalid_argument("ToyModelSpec: d_model must equal H_q * d_k");
  }
}

ModelParams ModelParams::zeros(const ToyModelSpec& spec) {
  spec.validate();
  const AttentionConfig& a = spec.attention;
  ModelParams p;
  p.embedding = Matrix(spec.vocab_size, spec.d_model);
  p.layers.resize(a.num_layers);
  for (LayerParams& layer : p.layers) {
    layer.ln1 = Matrix(1, spec.d_model);
    layer.w_q = Matrix(spec.d_model, a.num_query_heads * a.d_k);
    layer.w_k = Matrix(spec.d_model, a.num_kv_heads * a.d_k);
    layer.w_v = Matrix(spec.d_model, a.num_kv_heads * a.d_v);
    layer.w_o = Matrix(a.num_query_heads * a.d_v, spec.d_model);
    layer.ln2 = Matrix(1, spec.d_model);
    layer.w_ff1 = Matrix(spec.d_model, spec.d_ff);
    layer.w_ff2 = Matrix(spec.d_ff, spec.d_model);
  }
  p.final_norm = Matrix(1, spec.d_model);
  p.lm_head = Matrix(spec.d_model, spec.vocab_size);
  p.gate = GateParams::zeros(a.num_layers, a.d_k);
  return p;
}

template <typename Params, typename MatrixPtr>
static std::vector<std::pair<std::string, MatrixPtr>> collect_tensors(Params& p) {
  std::vector<std::pair<std::string, MatrixPtr>> out;
  out.emplace_back("embedding", &p.embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    auto& layer = p.layers[l];
    out.emplace_back(prefix + "ln1", &layer.ln1);
    out.emplace_back(prefix + "w_q", &layer.w_q);
    out.emplace_back(prefix + "w_k", &layer.w_k);
    out.emplace_back(prefix + "w_v", &layer.w_v);
    out.emplace_back(prefix + "w_o", &layer.w_o);
    out.emplace_back(prefix + "ln2", &layer.ln2);
    out.emplace_back(prefix + "w_ff1", &layer.w_ff1);
    out.emplace_back(prefix + "w_ff2", &layer.w_ff2);
  }
  out.emplace_back("final_norm", &p.final_norm);
  out.emplace_back("lm_head", &p.lm_head);
  for (std::size_t l = 0; l < p.gate.w_gq.size(); ++l) {
    const std::string prefix = "gate." + std::to_string(l) + ".";
    out.emplace_back(prefix + "w_gq", &p.gate.w_gq[l]);
    out.emplace_back(prefix + "w_gk", &p.gate.w_gk[l]);
  }
  return out;
}

std::vector<std::pair<std::string, Matrix*>> ModelParams::named_tensors() {
  return collect_tensors<ModelParams, Matrix*>(*this);
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::named_tensors() const {
  return collect_tensors<const ModelParams, const Matrix*>(*this);
}

double cross_entropy_row(std::span<const double> logits, int target) {
  if (target < 0 || target >= static_cast<int>(logits.size())) {
    throw std::out_of_range("cross_entropy_row: target outside the vocabulary");
  }
  double m = logits[0];
  for (double z : logits) {
    m = std::max(m, z);
  }
  double sum = 0.0;
  for (double z : logits) {
    sum += std::exp(z - m);
  }
  return m + std::log(sum) - logits[target];
}

ToyModel::ToyModel(const ToyModelSpec& spec) : spec_(spec) {
  spec_.validate();
  partition_ = select_heads(spec_.attention.num_query_heads, spec_.attention.num_kv_heads,
                            spec_.attention.head_ratio);
  params_ = ModelParams::zeros(spec_);
}

void ToyModel::init_params(std::uint64_t seed) {
  Rng rng(seed);
  auto fill = [&rng](Matrix& m, double sigma) {
    for (int i = 0; i < m.rows(); ++i) {
      for (int j = 0; j < m.cols(); ++j) {
        m(i, j) = rng.normal(0.0, sigma);
      }
    }
  };
  const double proj_sigma = 1.0 / std::sqrt(static_cast<double>(spec_.d_model));
  fill(params_.embedding, 0.1);
  for (LayerParams& layer : params_.layers) {
    layer.ln1.fill(1.0);
    fill(layer.w_q, proj_sigma);
    fill(layer.w_k, proj_sigma);
    fill(layer.w_v, proj_sigma);
    fill(layer.w_o, 1.0 / std::sqrt(static_cast<double>(layer.w_o.rows())));
    layer.ln2.fill(1.0);
    fill(layer.w_ff1, proj_sigma);
    fill(layer.w_ff2, 1.0 / std::sqrt(static_cast<double>(spec_.d_ff)));
  }
  params_.final_norm.fill(1.0);
  fill(params_.lm_head, 0.02);
  // Gate weights stay exactly zero; they are never drawn, so the stream (and
  // hence every other tensor) is identical across attention variants.
  for (Matrix& m : params_.gate.w_gq) {
    m.fill(0.0);
  }
  for (Matrix& m : params_.gate.w_gk) {
    m.fill(0.0);
  }
}

void ToyModel::check_tokens(const std::vector<int>& tokens, const SegmentMap& map) const {
  if (tokens.empty()) {
    throw std::invalid_argument("ToyModel: empty token sequence");
  }
  if (static_cast<int>(tokens.size()) > spec_.max_seq_len) {
    throw std::invalid_argument("ToyModel: sequence exceeds max_seq_len");
  }
  if (static_cast<int>(tokens.size()) != map.size()) {
    throw std::invalid_argument("ToyModel: segment map does not cover the sequence");
  }
  for (int t : tokens) {
    if (t < 0 || t >= spec_.vocab_size) {
      throw std::invalid_argument("ToyModel: token id outside the vocabulary");
    }
  }
}

Matrix ToyModel::forward(const std::vector<int>& tokens, const SegmentMap& map,
                         ForwardCache* cache, AttentionTrace* trace) const {
  check_tokens(tokens, map);
  const int n = static_cast<int>(tokens.size());
  const AttentionConfig& a = spec_.attention;

  ForwardCache local;
  ForwardCache* c = cache != nullptr ? cache : (trace != nullptr ? &local : nullptr);

  std::vector<int> positions(n);
  for (int i = 0; i < n; ++i) {
    positions[i] = i;
  }
  CausalMask mask(n);

  Matrix x(n, spec_.d_model);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < spec_.d_model; ++j) {
      x(i, j) = params_.embedding(tokens[i], j);
    }
  }
  if (c != nullptr) {
    c->x0 = x;
    c->layers.assign(a.num_layers, LayerForward{});
  }

  for (int l = 0; l < a.num_layers; ++l) {
    const LayerParams& lp = params_.layers[l];
    LayerForward scratch;
    LayerForward& lf = c != nullptr ? c->layers[l] : scratch;

    lf.x_in = x;
    rms_norm_rows(lf.x_in, lp.ln1, lf.ln1_out, lf.ln1_rms);
    lf.q_pre = matmul(lf.ln1_out, lp.w_q);
    lf.k_pre = matmul(lf.ln1_out, lp.w_k);
    lf.v = matmul(lf.ln1_out, lp.w_v);

    MultiHeadAttentionResult mha = multi_head_attention_forward(
        lf.q_pre, lf.k_pre, lf.v, positions, mask, params_.gate, l, partition_, a, map,
        spec_.variant, c != nullptr ? &lf.heads : nullptr);
    lf.attn_concat = std::move(mha.output);
    Matrix attn_out = matmul(lf.attn_concat, lp.w_o);

    lf.x_mid = lf.x_in;
    add_in_place(lf.x_mid, attn_out);

    rms_norm_rows(lf.x_mid, lp.ln2, lf.ln2_out, lf.ln2_rms);
    lf.ff_pre = matmul(lf.ln2_out, lp.w_ff1);
    lf.ff_act = Matrix(n, spec_.d_ff);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < spec_.d_ff; ++j) {
        lf.ff_act(i, j) = silu(lf.ff_pre(i, j));
      }
    }
    Matrix ff_out = matmul(lf.ff_act, lp.w_ff2);

    x = lf.x_mid;
    add_in_place(x, ff_out);
  }

  Matrix final_out;
  std::vector<double> final_rms;
  rms_norm_rows(x, params_.final_norm, final_out, final_rms);
  Matrix logits = matmul(final_out, params_.lm_head);

  if (c != nullptr) {
    c->x_final = std::move(x);
    c->final_out = final_out;
    c->final_rms = std::move(final_rms);
  }

  if (trace != nullptr) {
    for (int t : map.positions(Segment::kAns)) {
      for (int l = 0; l < a.num_layers; ++l) {
        for (int h = 0; h < a.num_query_heads; ++h) {
          std::span<const double> row = c->layers[l].heads[h].probs.row(t);
          trace->record(t, l, h, row.subspan(0, static_cast<std::size_t>(t) + 1));
        }
      }
    }
  }
  return logits;
}

double ToyModel::batch_loss(const ToyBatch& batch) const {
  double loss_sum = 0.0;
  int count = 0;
  for (const ToySequence& seq : batch.sequences) {
    Matrix logits = forward(seq.tokens, seq.map);
    const int n = static_cast<int>(seq.tokens.size());
    for (int t = 0; t + 1 < n; ++t) {
      if (seq.map.is_answer(t + 1)) {
        loss_sum += cross_entropy_row(logits.row(t), seq.tokens[t + 1]);
        ++count;
      }
    }
  }
  if (count == 0) {
    throw std::invalid_argument("batch_loss: no supervised answer positions");
  }
  return loss_sum / count;
}

double ToyModel::sequence_loss_and_gradients(const ToySequence& seq, double inv_count,
                                             ModelParams& grads) const {
  ForwardCache cache;
  Matrix logits = forward(seq.tokens, seq.map, &cache);
  const int n = static_cast<int>(seq.tokens.size());
  const AttentionConfig& a = spec_.attention;

  double loss_sum = 0.0;
  Matrix d_logits(n, spec_.vocab_size);
  for (int t = 0; t + 1 < n; ++t) {
    if (!seq.map.is_answer(t + 1)) {
      continue;
    }
    std::span<const double> z = logits.row(t);
    const int target = seq.tokens[t + 1];
    loss_sum += cross_entropy_row(z, target);
    double m = z[0];
    for (double v : z) {
      m = std::max(m, v);
    }
    double sum = 0.0;
    for (double v : z) {
      sum += std::exp(v - m);
    }
    for (int j = 0; j < spec_.vocab_size; ++j) {
      const double p = std::exp(z[j] - m) / sum;
      d_logits(t, j) = (p - (j == target ? 1.0 : 0.0)) * inv_count;
    }
  }

  std::vector<int> positions(n);
  for (int i = 0; i < n; ++i) {
    positions[i] = i;
  }
  CausalMask mask(n);

  Matrix d_final_out = matmul(d_logits, transpose(params_.lm_head));
  matmul_accumulate(transpose(cache.final_out), d_logits, grads.lm_head);

  Matrix g(n, spec_.d_model);
  rms_norm_backward_rows(cache.x_final, params_.final_norm, cache.final_rms, d_final_out, g,
                         grads.final_norm);

  for (int l = a.num_layers - 1; l >= 0; --l) {
    const LayerParams& lp = params_.layers[l];
    LayerParams& gl = grads.layers[l];
    const LayerForward& lf = cache.layers[l];

    // x_out = x_mid + silu(ln2(x_mid) W_ff1) W_ff2
    Matrix d_ff_act = matmul(g, transpose(lp.w_ff2));
    matmul_accumulate(transpose(lf.ff_act), g, gl.w_ff2);
    Matrix d_ff_pre(n, spec_.d_ff);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < spec_.d_ff; ++j) {
        d_ff_pre(i, j) = d_ff_act(i, j) * silu_grad(lf.ff_pre(i, j));
      }
    }
    Matrix d_ln2_out = matmul(d_ff_pre, transpose(lp.w_ff1));
    matmul_accumulate(transpose(lf.ln2_out), d_ff_pre, gl.w_ff1);
    Matrix g_mid = g;
    rms_norm_backward_rows(lf.x_mid, lp.ln2, lf.ln2_rms, d_ln2_out, g_mid, gl.ln2);

    // x_mid = x_in + attn_concat W_o
    Matrix d_concat = matmul(g_mid, transpose(lp.w_o));
    matmul_accumulate(transpose(lf.attn_concat), g_mid, gl.w_o);

    Matrix d_q_pre(n, a.num_query_heads * a.d_k);
    Matrix d_k_pre(n, a.num_kv_heads * a.d_k);
    Matrix d_v(n, a.num_kv_heads * a.d_v);
    multi_head_attention_backward(d_concat, lf.heads, lf.q_pre, lf.k_pre, lf.v, positions, mask,
                                  params_.gate, l, partition_, a, seq.map, spec_.variant, d_q_pre,
                                  d_k_pre, d_v, grads.gate);

    Matrix d_ln1_out = matmul(d_q_pre, transpose(lp.w_q));
    matmul_accumulate(d_k_pre, transpose(lp.w_k), d_ln1_out);
    matmul_accumulate(d_v, transpose(lp.w_v), d_ln1_out);
    matmul_accumulate(transpose(lf.ln1_out), d_q_pre, gl.w_q);
    matmul_accumulate(transpose(lf.ln1_out), d_k_pre, gl.w_k);
    matmul_accumulate(transpose(lf.ln1_out), d_v, gl.w_v);

    Matrix g_in = g_mid;
    rms_norm_backward_rows(lf.x_in, lp.ln1, lf.ln1_rms, d_ln1_out, g_in, gl.ln1);
    g = std::move(g_in);
  }

  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < spec_.d_model; ++j) {
      grads.embedding(seq.tokens[i], j) += g(i, j);
    }
  }
  return loss_sum;
}

double ToyModel::loss_and_gradients(const ToyBatch& batch, ModelParams& grads) const {
  int count = 0;
  for (const ToySequence& seq : batch.sequences) {
    const int n = static_cast<int>(seq.tokens.size());
    for (int t = 0; t + 1 < n; ++t) {
      if (seq.map.is_answer(t + 1)) {
        ++count;
      }
    }
  }
  if (count == 0) {
    throw std::invalid_argument("loss_and_gradients: no supervised answer positions");
  }
  const double inv_count = 1.0 / count;
  double loss_sum = 0.0;
  for (const ToySequence& seq : batch.sequences) {
    loss_sum += sequence_loss_and_gradients(seq, inv_count, grads);
  }
  return loss_sum / count;
}

namespace {

struct DecodeState {
  std::vector<Matrix> k_cache;  // per layer, rows filled up to len
  std::vector<Matrix> v_cache;
  int len = 0;
};

// Processes one input token at position pos against the cached keys/values,
// appending this position's projections. Mirrors the full forward pass row
// for row; every reduction runs in the same ascending order, so the results
// are bitwise identical to the corresponding row of ToyModel::forward.
std::vector<double> decode_step(const ToyModelSpec& spec, const ModelParams& params,
                                const HeadPartition& partition, DecodeState& state, int token,
                                int pos, const SegmentMap& map, bool want_logits,
                                AttentionTrace* trace) {
  const AttentionConfig& a = spec.attention;
  if (state.len != pos) {
    throw std::logic_error("decode_step: cache length does not match the position");
  }
  const bool record = trace != nullptr && map.is_answer(pos);
  const double scale = 1.0 / std::sqrt(static_cast<double>(a.d_k));

  std::vector<double> x(spec.d_model);
  for (int j = 0; j < spec.d_model; ++j) {
    x[j] = params.embedding(token, j);
  }

  std::vector<double> ln_row(spec.d_model);
  std::vector<std::vector<std::vector<double>>> trace_rows;
  if (record) {
    trace_rows.assign(a.num_layers, {});
  }

  for (int l = 0; l < a.num_layers; ++l) {
    const LayerParams& lp = params.layers[l];
    rms_norm_row(x, lp.ln1.row(0), ln_row, nullptr);
    std::vector<double> q_row = row_matmul(ln_row, lp.w_q);
    std::vector<double> k_row = row_matmul(ln_row, lp.w_k);
    std::vector<double> v_row = row_matmul(ln_row, lp.w_v);
    std::span<double> k_dst = state.k_cache[l].row(pos);
    std::span<double> v_dst = state.v_cache[l].row(pos);
    std::copy(k_row.begin(), k_row.end(), k_dst.begin());
    std::copy(v_row.begin(), v_row.end(), v_dst.begin());

    std::vector<double> concat(static_cast<std::size_t>(a.num_query_heads) * a.d_v, 0.0);
    if (record) {
      trace_rows[l].assign(a.num_query_heads, {});
    }
    for (int h = 0; h < a.num_query_heads; ++h) {
      const int kv = kv_head_for_query_head(h, a.num_query_heads, a.num_kv_heads);

      std::vector<double> q_pre_h(q_row.begin() + static_cast<std::size_t>(h) * a.d_k,
                                  q_row.begin() + static_cast<std::size_t>(h + 1) * a.d_k);
      std::vector<double> q_roped = q_pre_h;
      rope_apply_row(q_roped, pos, a.rope_base);

      std::vector<double> logits_row(pos + 1);
      std::vector<double> k_roped(a.d_k);
      for (int j = 0; j <= pos; ++j) {
        std::span<const double> k_full = state.k_cache[l].row(j);
        for (int t = 0; t < a.d_k; ++t) {
          k_roped[t] = k_full[static_cast<std::size_t>(kv) * a.d_k + t];
        }
        rope_apply_row(k_roped, j, a.rope_base);
        logits_row[j] = dot(q_roped, k_roped) * scale;
      }

      const bool head_gated = spec.variant == AttentionVariant::kRave && partition.is_gated(h);
      const bool row_gated =
          head_gated && (a.stage == GateStage::kPrefillAndDecode || map.is_answer(pos));

      std::vector<std::uint8_t> allowed(pos + 1, 1);
      std::vector<double> probs(pos + 1);
      if (row_gated) {
        const double s_q = dot(q_pre_h, params.gate.query_weights(l));
        std::vector<double> delta(pos + 1, 0.0);
        std::span<const double> w_gk = params.gate.key_weights(l);
        for (int j = 0; j <= pos; ++j) {
          if (!map.is_visual(j)) {
            continue;
          }
          std::span<const double> k_full = state.k_cache[l].row(j);
          const double s_k =
              dot(k_full.subspan(static_cast<std::size_t>(kv) * a.d_k, a.d_k), w_gk);
          delta[j] = a.gamma * std::tanh(s_q * s_k);
        }
        if (a.location == GateLocation::kPreSoftmax) {
          for (int j = 0; j <= pos; ++j) {
            if (!map.is_visual(j)) {
              continue;
            }
            if (a.form == GateForm::kAdditive) {
              if (delta[j] != 0.0) {
                logits_row[j] += delta[j];
              }
            } else {
              const double factor = 1.0 + delta[j];
              if (factor != 1.0) {
                logits_row[j] *= factor;
              }
            }
          }
          masked_softmax_row(logits_row, allowed, probs);
        } else {
          masked_softmax_row(logits_row, allowed, probs);
          bool biased = false;
          for (int j = 0; j <= pos; ++j) {
            if (map.is_visual(j) && delta[j] != 0.0) {
              probs[j] = std::max(probs[j] + delta[j], 0.0);
              biased = true;
            }
          }
          if (biased) {
            double total = 0.0;
            for (int j = 0; j <= pos; ++j) {
              total += probs[j];
            }
            if (total <= 0.0) {
              throw std::runtime_error(
                  "post_softmax_recalibrate: degenerate row with zero mass");
            }
            for (int j = 0; j <= pos; ++j) {
              probs[j] /= total;
            }
          }
        }
      } else {
        masked_softmax_row(logits_row, allowed, probs);
      }

      for (int j = 0; j <= pos; ++j) {
        const double p = probs[j];
        std::span<const double> v_full = state.v_cache[l].row(j);
        for (int t = 0; t < a.d_v; ++t) {
          concat[static_cast<std::size_t>(h) * a.d_v + t] +=
              p * v_full[static_cast<std::size_t>(kv) * a.d_v + t];
        }
      }
      if (record) {
        trace_rows[l][h] = std::move(probs);
      }
    }

    std::vector<double> attn_out = row_matmul(concat, lp.w_o);
    std::vector<double> x_mid(spec.d_model);
    for (int j = 0; j < spec.d_model; ++j) {
      x_mid[j] = x[j] + attn_out[j];
    }
    rms_norm_row(x_mid, lp.ln2.row(0), ln_row, nullptr);
    std::vector<double> ff_pre = row_matmul(ln_row, lp.w_ff1);
    for (double& vpre : ff_pre) {
      vpre = silu(vpre);
    }
    std::vector<double> ff_out = row_matmul(ff_pre, lp.w_ff2);
    for (int j = 0; j < spec.d_model; ++j) {
      x[j] = x_mid[j] + ff_out[j];
    }
  }
  state.len = pos + 1;

  if (record) {
    for (int l = 0; l < a.num_layers; ++l) {
      for (int h = 0; h < a.num_query_heads; ++h) {
        trace->record(pos, l, h, trace_rows[l][h]);
      }
    }
  }

  if (!want_logits) {
    return {};
  }
  rms_norm_row(x, params.final_norm.row(0), ln_row, nullptr);
  return row_matmul(ln_row, params.lm_head);
}

}  // namespace

DecodeResult ToyModel::greedy_decode(const std::vector<int>& prompt, const SegmentMap& prompt_map,
                                     int max_new_tokens, AttentionTrace* trace,
                                     bool incremental) const {
  check_tokens(prompt, prompt_map);
  if (!prompt_map.positions(Segment::kAns).empty()) {
    throw std::invalid_argument("greedy_decode: prompt must end at the answer boundary");
  }
  if (max_new_tokens < 0) {
    throw std::invalid_argument("greedy_decode: negative token budget");
  }
  const int p_len = static_cast<int>(prompt.size());
  if (p_len + max_new_tokens > spec_.max_seq_len) {
    throw std::invalid_argument("greedy_decode: generation would exceed max_seq_len");
  }

  DecodeResult res;
  res.sequence = prompt;
  res.map = prompt_map;
  res.step_logits = Matrix(max_new_tokens, spec_.vocab_size);
  if (max_new_tokens == 0) {
    return res;
  }

  if (!incremental) {
    for (int s = 0; s < max_new_tokens; ++s) {
      Matrix logits = forward(res.sequence, res.map);
      std::span<const double> row = logits.row(static_cast<int>(res.sequence.size()) - 1);
      std::copy(row.begin(), row.end(), res.step_logits.row(s).begin());
      const int tok = argmax(row);
      res.generated.push_back(tok);
      res.sequence.push_back(tok);
      res.map.append_answer();
    }
    if (trace != nullptr) {
      forward(res.sequence, res.map, nullptr, trace);
    }
    return res;
  }

  const AttentionConfig& a = spec_.attention;
  DecodeState state;
  const int total = p_len + max_new_tokens;
  state.k_cache.assign(a.num_layers, Matrix(total, a.num_kv_heads * a.d_k));
  state.v_cache.assign(a.num_layers, Matrix(total, a.num_kv_heads * a.d_v));

  for (int i = 0; i + 1 < p_len; ++i) {
    decode_step(spec_, params_, partition_, state, prompt[i], i, res.map, false, trace);
  }
  for (int s = 0; s < max_new_tokens; ++s) {
    const int pos = p_len - 1 + s;
    std::vector<double> logits = decode_step(spec_, params_, partition_, state,
                                             res.sequence[pos], pos, res.map, true, trace);
    std::copy(logits.begin(), logits.end(), res.step_logits.row(s).begin());
    const int tok = argmax(logits);
    res.generated.push_back(tok);
    res.sequence.push_back(tok);
    res.map.append_answer();
  }
  if (trace != nullptr) {
    decode_step(spec_, params_, partition_, state, res.sequence.back(), total - 1, res.map, false,
                trace);
  }
  return res;
}

}  // namespace rave
