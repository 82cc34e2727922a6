#include "rave/config.hpp"

#include <stdexcept>

namespace rave {

std::string to_string(GateLocation v) {
  return v == GateLocation::kPreSoftmax ? "pre" : "post";
}

std::string to_string(GateForm v) {
  return v == GateForm::kAdditive ? "add" : "mul";
}

std::string to_string(GateStage v) {
  return v == GateStage::kPrefillAndDecode ? "pd" : "dec";
}

std::string to_string(GatePhi v) {
  (void)v;
  return "tanh";
}

std::string to_string(AttentionVariant v) {
  return v == AttentionVariant::kStandard ? "standard" : "rave";
}

GateLocation parse_location(const std::string& s) {
  if (s == "pre") return GateLocation::kPreSoftmax;
  if (s == "post") return GateLocation::kPostSoftmax;
  throw std::invalid_argument("unknown location '" + s + "' (expected pre|post)");
}

GateForm parse_form(const std::string& s) {
  if (s == "add") return GateForm::kAdditive;
  if (s == "mul") return GateForm::kMultiplicative;
  throw std::invalid_argument("unknown form '" + s + "' (expected add|mul)");
}

GateStage parse_stage(const std::string& s) {
  if (s == "pd") return GateStage::kPrefillAndDecode;
  if (s == "dec") return GateStage::kDecodeOnly;
  throw std::invalid_argument("unknown stage '" + s + "' (expected pd|dec)");
}

AttentionVariant parse_variant(const std::string& s) {
  if (s == "standard") return AttentionVariant::kStandard;
  if (s == "rave") return AttentionVariant::kRave;
  throw std::invalid_argument("unknown variant '" + s + "' (expected standard|rave)");
}

void AttentionConfig::validate() const {
  if (d_model <= 0 || d_k <= 0 || d_v <= 0 || num_layers <= 0 || num_query_heads <= 0 ||
      num_kv_heads <= 0) {
    throw std::invalid_argument("AttentionConfig: all dimensions must be positive");
  }
  if (num_query_heads % num_kv_heads != 0) {
    throw std::invalid_argument("AttentionConfig: H_q must be divisible by H_kv");
  }
  if (d_k % 2 != 0) {
    throw std::invalid_argument("AttentionConfig: d_k must be even for rotary pairs");
  }
  if (rope_base <= 0.0) {
    throw std::invalid_argument("AttentionConfig: rope_base must be positive");
  }
  if (head_ratio < 0.0 || head_ratio > 1.0) {
    throw std::invalid_argument("AttentionConfig: head_ratio must lie in [0,1]");
  }
}

}  // namespace rave
