#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "rave/segments.hpp"
#include "rave/trace.hpp"

namespace rave {

using SegmentMasses = std::array<double, kNumSegments>;  // indexed by Segment

// Fraction of step t's attention on each segment, averaged over all layers
// and heads. Positions beyond t contribute nothing (the rows end at t), so
// the four values always sum to 1.
SegmentMasses segment_mass_layer_avg(const AttentionTrace& trace, const SegmentMap& map, int step);

// Same statistic for a single layer, averaged over heads only.
SegmentMasses segment_mass_layer_resolved(const AttentionTrace& trace, const SegmentMap& map,
                                          int step, int layer);

// Per-step masses for a decoded sequence: the layer-averaged dilution curve
// plus the layer-resolved values backing the heatmaps.
struct MassProfile {
  int num_layers = 0;
  std::vector<int> steps;
  std::vector<SegmentMasses> layer_avg;                  // per step
  std::vector<std::vector<SegmentMasses>> layer_resolved;  // per step, per layer
};

MassProfile compute_mass_profile(const AttentionTrace& trace, const SegmentMap& map);

// CSV "step,alpha_sys,alpha_img,alpha_que,alpha_ans", one row per decoding
// step, steps numbered from 1.
void export_dilution_curve(const MassProfile& profile, const std::filesystem::path& path);

// Headerless CSV matrix, num_layers rows by num_steps columns, of the
// layer-resolved mass for one segment.
void export_layer_heatmap(const MassProfile& profile, Segment s,
                          const std::filesystem::path& path);

}  // namespace rave
