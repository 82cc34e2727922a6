#include "rave/trace.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rave {

AttentionTrace::AttentionTrace(int num_layers, int num_heads)
    : num_layers_(num_layers), num_heads_(num_heads) {
  if (num_layers <= 0 || num_heads <= 0) {
    throw std::invalid_argument("AttentionTrace: layer and head counts must be positive");
  }
}

void AttentionTrace::record(int step, int layer, int head, std::span<const double> row) {
  if (layer < 0 || layer >= num_layers_ || head < 0 || head >= num_heads_) {
    throw std::out_of_range("AttentionTrace::record: layer or head out of range");
  }
  if (static_cast<int>(row.size()) != step + 1) {
    throw std::invalid_argument("AttentionTrace::record: row must cover positions 0..step");
  }
  if (steps_.empty() || steps_.back() < step) {
    steps_.push_back(step);
    rows_.resize(rows_.size() + static_cast<std::size_t>(num_layers_) * num_heads_);
  } else if (steps_.back() != step) {
    throw std::invalid_argument("AttentionTrace::record: steps must arrive in increasing order");
  }
  const std::size_t idx =
      (static_cast<std::size_t>(steps_.size() - 1) * num_layers_ + layer) * num_heads_ + head;
  if (!rows_[idx].empty()) {
    throw std::invalid_argument("AttentionTrace::record: slot already recorded");
  }
  double total = 0.0;
  std::vector<float> stored(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    stored[j] = static_cast<float>(row[j]);
    total += stored[j];
  }
  if (!std::isfinite(total) || std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("AttentionTrace::record: row is not stochastic within 1e-6");
  }
  rows_[idx] = std::move(stored);
}

bool AttentionTrace::has_step(int step) const {
  return std::binary_search(steps_.begin(), steps_.end(), step);
}

int AttentionTrace::step_index(int step) const {
  auto it = std::lower_bound(steps_.begin(), steps_.end(), step);
  if (it == steps_.end() || *it != step) {
    throw std::out_of_range("AttentionTrace: step " + std::to_string(step) + " not recorded");
  }
  return static_cast<int>(it - steps_.begin());
}

std::span<const float> AttentionTrace::row(int step, int layer, int head) const {
  if (layer < 0 || layer >= num_layers_ || head < 0 || head >= num_heads_) {
    throw std::out_of_range("AttentionTrace::row: layer or head out of range");
  }
  const std::size_t idx =
      (static_cast<std::size_t>(step_index(step)) * num_layers_ + layer) * num_heads_ + head;
  const std::vector<float>& r = rows_[idx];
  if (r.empty()) {
    throw std::logic_error("AttentionTrace: incomplete trace at step " + std::to_string(step));
  }
  return r;
}

void AttentionTrace::validate() const {
  for (int step : steps_) {
    for (int l = 0; l < num_layers_; ++l) {
      for (int h = 0; h < num_heads_; ++h) {
        row(step, l, h);  // throws on missing slots; stochasticity checked on record
      }
    }
  }
}

}  // namespace rave
