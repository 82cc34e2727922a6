#pragma once

#include <string>

namespace rave {

enum class GateLocation { kPreSoftmax, kPostSoftmax };
enum class GateForm { kAdditive, kMultiplicative };
enum class GateStage { kPrefillAndDecode, kDecodeOnly };
enum class GatePhi { kTanh };
enum class AttentionVariant { kStandard, kRave };

std::string to_string(GateLocation v);
std::string to_string(GateForm v);
std::string to_string(GateStage v);
std::string to_string(GatePhi v);
std::string to_string(AttentionVariant v);

GateLocation parse_location(const std::string& s);
GateForm parse_form(const std::string& s);
GateStage parse_stage(const std::string& s);
AttentionVariant parse_variant(const std::string& s);

// Attention-side hyperparameters: dimensions, head layout, rotary base, and
// the gate's variant switches (strength gamma, gated-head fraction p, where
// and how the recalibration is injected, and at which stage it applies).
struct AttentionConfig {
  int d_model = 0;
  int d_k = 0;
  int d_v = 0;
  int num_layers = 0;
  int num_query_heads = 0;  // H_q
  int num_kv_heads = 0;     // H_kv
  double rope_base = 10000.0;

  double gamma = 1.0;
  double head_ratio = 0.25;  // p, fraction of each GQA group that is gated
  GatePhi phi = GatePhi::kTanh;
  GateLocation location = GateLocation::kPreSoftmax;
  GateForm form = GateForm::kAdditive;
  GateStage stage = GateStage::kPrefillAndDecode;

  // r = H_q / H_kv, the query heads sharing one key/value head.
  int group_size() const { return num_query_heads / num_kv_heads; }

  // Throws std::invalid_argument on any violated invariant:
  // positive dims, H_q divisible by H_kv, even d_k, p in [0,1].
  void validate() const;
};

}  // namespace rave
