#pragma once

#include <span>
#include <vector>

namespace rave {

// Attention rows recorded while decoding: for each generated position t, one
// row per (layer, head) holding the distribution the new token placed over
// positions 0..t. Rows are stored in single precision; consumers accumulate
// in double. A stored row must be row-stochastic within 1e-6 and reference
// only positions <= t.
class AttentionTrace {
 public:
  AttentionTrace() = default;
  AttentionTrace(int num_layers, int num_heads);

  int num_layers() const { return num_layers_; }
  int num_heads() const { return num_heads_; }
  int num_steps() const { return static_cast<int>(steps_.size()); }
  const std::vector<int>& steps() const { return steps_; }

  // Records the attention row of position `step` for one (layer, head).
  // Steps must arrive in increasing order; each (layer, head) slot of a step
  // is filled exactly once and the row length must be step + 1.
  void record(int step, int layer, int head, std::span<const double> row);

  bool has_step(int step) const;

  // Throws if any (layer, head) slot of the step is missing.
  std::span<const float> row(int step, int layer, int head) const;

  // Checks completeness and row-stochasticity of everything recorded.
  void validate() const;

 private:
  int step_index(int step) const;

  int num_layers_ = 0;
  int num_heads_ = 0;
  std::vector<int> steps_;
  std::vector<std::vector<float>> rows_;  // (step_idx * L + layer) * H + head
};

}  // namespace rave
