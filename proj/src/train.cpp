#include "rave/train.hpp"

#include <cmath>
#include <stdexcept>

#include "rave/rng.hpp"

namespace rave {

std::string to_string(OptimizerKind k) {
  return k == OptimizerKind::kSgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") {
    return OptimizerKind::kSgd;
  }
  if (s == "adam") {
    return OptimizerKind::kAdam;
  }
  throw std::invalid_argument("unknown optimizer: " + s);
}

TrainResult train(ToyModel& model, const TaskParams& task, const TrainConfig& cfg) {
  task.validate();
  if (cfg.steps < 0 || cfg.batch_size < 1) {
    throw std::invalid_argument("train: invalid step or batch settings");
  }
  if (task.seq_len() > model.spec().max_seq_len) {
    throw std::invalid_argument("train: task sequences exceed max_seq_len");
  }

  if (cfg.gate_init_sigma > 0.0) {
    Rng gate_rng(cfg.data_seed ^ 0x9E3779B97F4A7C15ull);
    for (std::vector<Matrix>* group : {&model.params().gate.w_gq, &model.params().gate.w_gk}) {
      for (Matrix& tensor : *group) {
        for (int i = 0; i < tensor.rows(); ++i) {
          for (int j = 0; j < tensor.cols(); ++j) {
            tensor(i, j) = gate_rng.normal(0.0, cfg.gate_init_sigma);
          }
        }
      }
    }
  }

  const bool adam = cfg.optimizer == OptimizerKind::kAdam;
  ModelParams m_state = ModelParams::zeros(model.spec());
  ModelParams v_state = ModelParams::zeros(model.spec());

  TrainResult result;
  result.losses.reserve(cfg.steps);
  Rng batch_seeds(cfg.data_seed);

  for (int step = 1; step <= cfg.steps; ++step) {
    ToyBatch batch = generate_task(task, batch_seeds.next_u64(), cfg.batch_size);
    ModelParams grads = ModelParams::zeros(model.spec());
    const double loss = model.loss_and_gradients(batch, grads);
    if (!std::isfinite(loss)) {
      throw std::runtime_error("train: diverged, non-finite loss at step " +
                               std::to_string(step));
    }
    result.losses.push_back(loss);

    auto params = model.params().named_tensors();
    auto g = grads.named_tensors();
    if (adam) {
      auto ms = m_state.named_tensors();
      auto vs = v_state.named_tensors();
      const double bc1 = 1.0 - std::pow(cfg.beta1, step);
      const double bc2 = 1.0 - std::pow(cfg.beta2, step);
      for (std::size_t t = 0; t < params.size(); ++t) {
        Matrix& p = *params[t].second;
        const Matrix& grad = *g[t].second;
        Matrix& m = *ms[t].second;
        Matrix& v = *vs[t].second;
        for (int i = 0; i < p.rows(); ++i) {
          for (int j = 0; j < p.cols(); ++j) {
            const double gij = grad(i, j);
            m(i, j) = cfg.beta1 * m(i, j) + (1.0 - cfg.beta1) * gij;
            v(i, j) = cfg.beta2 * v(i, j) + (1.0 - cfg.beta2) * gij * gij;
            p(i, j) -= cfg.lr * (m(i, j) / bc1) / (std::sqrt(v(i, j) / bc2) + cfg.eps);
          }
        }
      }
    } else {
      for (std::size_t t = 0; t < params.size(); ++t) {
        Matrix& p = *params[t].second;
        const Matrix& grad = *g[t].second;
        for (int i = 0; i < p.rows(); ++i) {
          for (int j = 0; j < p.cols(); ++j) {
            p(i, j) -= cfg.lr * grad(i, j);
          }
        }
      }
    }
  }
  result.final_loss = result.losses.empty() ? 0.0 : result.losses.back();
  return result;
}

double eval_accuracy(const ToyModel& model, const TaskParams& task, std::uint64_t seed,
                     int num_sequences) {
  if (num_sequences < 1) {
    throw std::invalid_argument("eval_accuracy: need at least one sequence");
  }
  ToyBatch batch = generate_task(task, seed, num_sequences);
  int correct = 0;
  for (const ToySequence& seq : batch.sequences) {
    std::vector<int> prompt(seq.tokens.begin(), seq.tokens.begin() + seq.prompt_len);
    SegmentMap prompt_map =
        SegmentMap::from_spans(task.sys_len, 2 * task.num_pairs, 1, 0);
    DecodeResult res = model.greedy_decode(prompt, prompt_map, task.ans_len);
    bool ok = true;
    for (int j = 0; j < task.ans_len; ++j) {
      if (res.generated[j] != seq.tokens[seq.prompt_len + j]) {
        ok = false;
        break;
      }
    }
    correct += ok ? 1 : 0;
  }
  return static_cast<double>(correct) / num_sequences;
}

}  // namespace rave
