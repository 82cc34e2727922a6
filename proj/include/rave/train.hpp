#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rave/model.hpp"
#include "rave/task.hpp"

namespace rave {

enum class OptimizerKind { kSgd, kAdam };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  int steps = 500;
  int batch_size = 16;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t data_seed = 1;
  // Exactly-zero gate weights are a stationary point of the pair gate (both
  // scalar scores vanish, so the product rule kills every gate gradient).
  // A positive sigma re-draws them from N(0, sigma) before the first step,
  // the near-zero initialization that lets the gate train.
  double gate_init_sigma = 0.0;
};

struct TrainResult {
  std::vector<double> losses;  // pre-update loss of each step
  double final_loss = 0.0;
};

// Deterministic training loop: per-step batches come from one seeded stream,
// updates are applied in the fixed named-tensor order. Throws on non-finite
// loss.
TrainResult train(ToyModel& model, const TaskParams& task, const TrainConfig& cfg);

// Fraction of freshly generated sequences whose full answer is reproduced by
// greedy decoding from the prompt.
double eval_accuracy(const ToyModel& model, const TaskParams& task, std::uint64_t seed,
                     int num_sequences);

}  // namespace rave
