#include "rave/jsonio.hpp"

namespace rave {

nlohmann::json to_json(const AttentionConfig& config) {
  return nlohmann::json{{"d_model", config.d_model},
                        {"d_k", config.d_k},
                        {"d_v", config.d_v},
                        {"num_layers", config.num_layers},
                        {"num_query_heads", config.num_query_heads},
                        {"num_kv_heads", config.num_kv_heads},
                        {"rope_base", config.rope_base},
                        {"gamma", config.gamma},
                        {"head_ratio", config.head_ratio},
                        {"phi", to_string(config.phi)},
                        {"location", to_string(config.location)},
                        {"form", to_string(config.form)},
                        {"stage", to_string(config.stage)}};
}

AttentionConfig attention_config_from_json(const nlohmann::json& j) {
  AttentionConfig config;
  config.d_model = j.at("d_model").get<int>();
  config.d_k = j.at("d_k").get<int>();
  config.d_v = j.at("d_v").get<int>();
  config.num_layers = j.at("num_layers").get<int>();
  config.num_query_heads = j.at("num_query_heads").get<int>();
  config.num_kv_heads = j.at("num_kv_heads").get<int>();
  config.rope_base = j.at("rope_base").get<double>();
  config.gamma = j.at("gamma").get<double>();
  config.head_ratio = j.at("head_ratio").get<double>();
  if (j.at("phi").get<std::string>() != "tanh") {
    throw std::invalid_argument("attention config: unknown gate nonlinearity");
  }
  config.location = parse_location(j.at("location").get<std::string>());
  config.form = parse_form(j.at("form").get<std::string>());
  config.stage = parse_stage(j.at("stage").get<std::string>());
  return config;
}

nlohmann::json to_json(const ToyModelSpec& spec) {
  return nlohmann::json{{"vocab_size", spec.vocab_size},
                        {"d_model", spec.d_model},
                        {"d_ff", spec.d_ff},
                        {"max_seq_len", spec.max_seq_len},
                        {"variant", to_string(spec.variant)},
                        {"attention", to_json(spec.attention)}};
}

ToyModelSpec model_spec_from_json(const nlohmann::json& j) {
  ToyModelSpec spec;
  spec.vocab_size = j.at("vocab_size").get<int>();
  spec.d_model = j.at("d_model").get<int>();
  spec.d_ff = j.at("d_ff").get<int>();
  spec.max_seq_len = j.at("max_seq_len").get<int>();
  spec.variant = parse_variant(j.at("variant").get<std::string>());
  spec.attention = attention_config_from_json(j.at("attention"));
  spec.validate();
  return spec;
}

nlohmann::json to_json(const TaskParams& params) {
  return nlohmann::json{{"vocab_size", params.vocab_size}, {"num_pairs", params.num_pairs},
                        {"num_keys", params.num_keys},     {"sys_len", params.sys_len},
                        {"ans_len", params.ans_len},       {"ignore_image", params.ignore_image}};
}

TaskParams task_params_from_json(const nlohmann::json& j) {
  TaskParams params;
  params.vocab_size = j.at("vocab_size").get<int>();
  params.num_pairs = j.at("num_pairs").get<int>();
  params.num_keys = j.at("num_keys").get<int>();
  params.sys_len = j.at("sys_len").get<int>();
  params.ans_len = j.at("ans_len").get<int>();
  params.ignore_image = j.at("ignore_image").get<bool>();
  params.validate();
  return params;
}

std::string canonical_spec_json(const ToyModelSpec& spec) { return to_json(spec).dump(); }

}  // namespace rave
