#pragma once

#include <cstdint>
#include <vector>

#include "rave/segments.hpp"

namespace rave {

inline constexpr int kReservedTokens = 4;
inline constexpr int kBosToken = 0;
inline constexpr int kSysToken = 1;

// Seeded key-value retrieval task. A sequence is
//   [sys filler] [image: k key-value token pairs] [question: one key] [answer]
// with keys drawn without replacement from a key sub-vocabulary and values
// from a disjoint value sub-vocabulary. In the default mode the answer is the
// value paired with the questioned key (then the following pairs' values in
// image order when the answer is longer than one token). With ignore_image
// set, answer tokens are a fixed function of the questioned key alone, so the
// labels carry no information about the image segment.
struct TaskParams {
  int vocab_size = 64;
  int num_pairs = 4;  // k
  int num_keys = 8;   // size of the key sub-vocabulary
  int sys_len = 2;
  int ans_len = 1;
  bool ignore_image = false;

  int value_base() const { return kReservedTokens + num_keys; }
  int num_values() const { return vocab_size - value_base(); }
  int seq_len() const { return sys_len + 2 * num_pairs + 1 + ans_len; }

  void validate() const;
};

struct ToySequence {
  std::vector<int> tokens;  // full sequence including the answer
  SegmentMap map;
  int prompt_len = 0;  // sys + image + question
};

struct ToyBatch {
  TaskParams params;
  std::uint64_t seed = 0;
  std::vector<ToySequence> sequences;
};

ToyBatch generate_task(const TaskParams& params, std::uint64_t seed, int batch_size);

// Rule-based reference: the answer tokens implied by a sequence's prompt.
std::vector<int> oracle_answer(const TaskParams& params, const ToySequence& seq);

}  // namespace rave
