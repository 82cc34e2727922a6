#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rave/matrix.hpp"
#include "rave/model.hpp"

namespace rave {

// Flat named-tensor container, little-endian, versioned header, lossless
// float64 payload. The spec echo is an opaque string the loader can compare
// against its own configuration.
struct Checkpoint {
  std::uint64_t step = 0;
  std::string spec_json;
  std::vector<std::pair<std::string, Matrix>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint checkpoint_from_model(const ToyModel& model, std::uint64_t step,
                                 const std::string& spec_json);

// Strict name/shape match in both directions.
void load_params_from_checkpoint(const Checkpoint& ckpt, ModelParams& params);

}  // namespace rave
