#include "rave/segments.hpp"

#include <algorithm>
#include <stdexcept>

namespace rave {

std::string to_string(Segment s) {
  switch (s) {
    case Segment::kSys: return "sys";
    case Segment::kImg: return "img";
    case Segment::kQue: return "que";
    case Segment::kAns: return "ans";
  }
  return "?";
}

SegmentMap::SegmentMap(std::vector<int> sys, std::vector<int> img, std::vector<int> que,
                       std::vector<int> ans) {
  sets_ = {std::move(sys), std::move(img), std::move(que), std::move(ans)};
  for (auto& set : sets_) {
    std::sort(set.begin(), set.end());
  }
  rebuild_lookup();
}

SegmentMap SegmentMap::from_spans(int sys_len, int img_len, int que_len, int ans_len) {
  if (sys_len < 0 || img_len < 0 || que_len < 0 || ans_len < 0) {
    throw std::invalid_argument("SegmentMap: negative span length");
  }
  std::array<std::vector<int>, kNumSegments> sets;
  int pos = 0;
  const std::array<int, 4> lens = {sys_len, img_len, que_len, ans_len};
  for (int s = 0; s < kNumSegments; ++s) {
    for (int i = 0; i < lens[s]; ++i) {
      sets[s].push_back(pos++);
    }
  }
  return SegmentMap(std::move(sets[0]), std::move(sets[1]), std::move(sets[2]),
                    std::move(sets[3]));
}

void SegmentMap::rebuild_lookup() {
  std::size_t total = 0;
  for (const auto& set : sets_) {
    total += set.size();
  }
  lookup_.assign(total, Segment::kSys);
  std::vector<std::uint8_t> seen(total, 0);
  for (int s = 0; s < kNumSegments; ++s) {
    for (int pos : sets_[s]) {
      if (pos < 0 || pos >= static_cast<int>(total)) {
        throw std::invalid_argument("SegmentMap: position outside 0..N-1");
      }
      if (seen[pos]) {
        throw std::invalid_argument("SegmentMap: segments are not disjoint");
      }
      seen[pos] = 1;
      lookup_[pos] = static_cast<Segment>(s);
    }
  }
  // seen is all-ones here: total == sum of set sizes and no duplicates.
  int max_prefill = -1;
  for (int s = 0; s < kNumSegments - 1; ++s) {
    for (int pos : sets_[s]) {
      max_prefill = std::max(max_prefill, pos);
    }
  }
  for (int pos : sets_[static_cast<int>(Segment::kAns)]) {
    if (pos <= max_prefill) {
      throw std::invalid_argument("SegmentMap: answer positions must follow all prefill positions");
    }
  }
}

Segment SegmentMap::segment_of(int pos) const {
  if (pos < 0 || pos >= size()) {
    throw std::out_of_range("SegmentMap: position out of range");
  }
  return lookup_[pos];
}

const std::vector<int>& SegmentMap::positions(Segment s) const {
  return sets_[static_cast<int>(s)];
}

void SegmentMap::append_answer() {
  sets_[static_cast<int>(Segment::kAns)].push_back(size());
  lookup_.push_back(Segment::kAns);
}

VisualKeyMask visual_key_mask(const SegmentMap& map) {
  VisualKeyMask mask(map.size(), 0);
  for (int pos : map.positions(Segment::kImg)) {
    mask[pos] = 1;
  }
  return mask;
}

}  // namespace rave
