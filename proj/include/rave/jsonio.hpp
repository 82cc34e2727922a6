#pragma once

#include <string>

#include <json.hpp>

#include "rave/config.hpp"
#include "rave/model.hpp"
#include "rave/task.hpp"

namespace rave {

nlohmann::json to_json(const AttentionConfig& config);
AttentionConfig attention_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ToyModelSpec& spec);
ToyModelSpec model_spec_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TaskParams& params);
TaskParams task_params_from_json(const nlohmann::json& j);

// Sorted-key single-line dump; equal specs produce equal strings, so the
// checkpoint echo can be compared verbatim.
std::string canonical_spec_json(const ToyModelSpec& spec);

}  // namespace rave
