#include "rave/task.hpp"

#include <stdexcept>
#include <utility>

#include "rave/rng.hpp"

namespace rave {

void TaskParams::validate() const {
  if (num_pairs < 1) {
    throw std::invalid_argument("TaskParams: need at least one key-value pair");
  }
  if (sys_len < 0 || ans_len < 1) {
    throw std::invalid_argument("TaskParams: invalid segment lengths");
  }
  if (num_keys < num_pairs) {
    throw std::invalid_argument("TaskParams: vocabulary exhaustion, fewer keys than pairs");
  }
  if (num_values() < 1) {
    throw std::invalid_argument("TaskParams: vocabulary exhaustion, no value tokens left");
  }
}

ToyBatch generate_task(const TaskParams& params, std::uint64_t seed, int batch_size) {
  params.validate();
  if (batch_size < 1) {
    throw std::invalid_argument("generate_task: batch size must be positive");
  }
  const int k = params.num_pairs;
  ToyBatch batch;
  batch.params = params;
  batch.seed = seed;
  batch.sequences.reserve(batch_size);
  Rng rng(seed);

  std::vector<int> pool(params.num_keys);
  for (int b = 0; b < batch_size; ++b) {
    ToySequence seq;
    seq.tokens.reserve(params.seq_len());
    for (int i = 0; i < params.sys_len; ++i) {
      seq.tokens.push_back(i == 0 ? kBosToken : kSysToken);
    }

    for (int i = 0; i < params.num_keys; ++i) {
      pool[i] = i;
    }
    std::vector<int> keys(k);
    std::vector<int> values(k);
    for (int i = 0; i < k; ++i) {
      const int j = rng.uniform_int(i, params.num_keys - 1);
      std::swap(pool[i], pool[j]);
      keys[i] = pool[i];
      values[i] = rng.uniform_int(0, params.num_values() - 1);
      seq.tokens.push_back(kReservedTokens + keys[i]);
      seq.tokens.push_back(params.value_base() + values[i]);
    }

    const int q = rng.uniform_int(0, k - 1);
    seq.tokens.push_back(kReservedTokens + keys[q]);

    for (int j = 0; j < params.ans_len; ++j) {
      int a;
      if (params.ignore_image) {
        a = (keys[q] * 31 + j * 17) % params.num_values();
      } else {
        a = values[(q + j) % k];
      }
      seq.tokens.push_back(params.value_base() + a);
    }

    seq.map = SegmentMap::from_spans(params.sys_len, 2 * k, 1, params.ans_len);
    seq.prompt_len = params.sys_len + 2 * k + 1;
    batch.sequences.push_back(std::move(seq));
  }
  return batch;
}

std::vector<int> oracle_answer(const TaskParams& params, const ToySequence& seq) {
  const int k = params.num_pairs;
  const int img_begin = params.sys_len;
  const int que_pos = img_begin + 2 * k;
  const int question_key = seq.tokens[que_pos];

  int q = -1;
  std::vector<int> values(k);
  for (int i = 0; i < k; ++i) {
    if (seq.tokens[img_begin + 2 * i] == question_key) {
      q = i;
    }
    values[i] = seq.tokens[img_begin + 2 * i + 1] - params.value_base();
  }
  if (q < 0) {
    throw std::invalid_argument("oracle_answer: questioned key does not appear in the image");
  }

  std::vector<int> answer(params.ans_len);
  for (int j = 0; j < params.ans_len; ++j) {
    if (params.ignore_image) {
      const int key_idx = question_key - kReservedTokens;
      answer[j] = params.value_base() + (key_idx * 31 + j * 17) % params.num_values();
    } else {
      answer[j] = params.value_base() + values[(q + j) % k];
    }
  }
  return answer;
}

}  // namespace rave
