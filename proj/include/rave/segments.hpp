#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace rave {

enum class Segment : int { kSys = 0, kImg = 1, kQue = 2, kAns = 3 };

inline constexpr int kNumSegments = 4;
inline constexpr std::array<Segment, 4> kAllSegments = {Segment::kSys, Segment::kImg,
                                                        Segment::kQue, Segment::kAns};

std::string to_string(Segment s);

// Partition of token positions 0..N-1 into the four input segments. The sets
// are pairwise disjoint, cover the range exactly, and every answer position
// lies after every prefill position (answers are appended during decoding;
// all four sets may be empty, including I_ans before decoding starts).
class SegmentMap {
 public:
  SegmentMap() = default;
  SegmentMap(std::vector<int> sys, std::vector<int> img, std::vector<int> que,
             std::vector<int> ans);

  // Contiguous layout [sys | img | que | ans].
  static SegmentMap from_spans(int sys_len, int img_len, int que_len, int ans_len);

  int size() const { return static_cast<int>(lookup_.size()); }
  Segment segment_of(int pos) const;
  const std::vector<int>& positions(Segment s) const;
  bool is_visual(int pos) const { return segment_of(pos) == Segment::kImg; }
  bool is_answer(int pos) const { return segment_of(pos) == Segment::kAns; }

  // Appends position N to I_ans (a newly decoded token).
  void append_answer();

 private:
  void rebuild_lookup();
  std::array<std::vector<int>, kNumSegments> sets_;
  std::vector<Segment> lookup_;
};

// True at visual-key positions; derived deterministically from the map.
using VisualKeyMask = std::vector<std::uint8_t>;

VisualKeyMask visual_key_mask(const SegmentMap& map);

}  // namespace rave
