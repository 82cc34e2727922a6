#include "rave/mass.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace rave {

namespace {

void add_row_masses(const AttentionTrace& trace, const SegmentMap& map, int step, int layer,
                    SegmentMasses& acc) {
  for (int h = 0; h < trace.num_heads(); ++h) {
    std::span<const float> row = trace.row(step, layer, h);
    for (int j = 0; j < static_cast<int>(row.size()); ++j) {
      acc[static_cast<int>(map.segment_of(j))] += static_cast<double>(row[j]);
    }
  }
}

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::ofstream open_sink(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  return out;
}

void finish_sink(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) {
    throw std::runtime_error("write failed for " + path.string());
  }
}

}  // namespace

SegmentMasses segment_mass_layer_avg(const AttentionTrace& trace, const SegmentMap& map,
                                     int step) {
  if (step >= map.size()) {
    throw std::out_of_range("segment_mass_layer_avg: step outside the segment map");
  }
  SegmentMasses acc{};
  for (int l = 0; l < trace.num_layers(); ++l) {
    add_row_masses(trace, map, step, l, acc);
  }
  const double denom = static_cast<double>(trace.num_layers()) * trace.num_heads();
  for (double& v : acc) {
    v /= denom;
  }
  return acc;
}

SegmentMasses segment_mass_layer_resolved(const AttentionTrace& trace, const SegmentMap& map,
                                          int step, int layer) {
  if (step >= map.size()) {
    throw std::out_of_range("segment_mass_layer_resolved: step outside the segment map");
  }
  if (layer < 0 || layer >= trace.num_layers()) {
    throw std::out_of_range("segment_mass_layer_resolved: layer out of range");
  }
  SegmentMasses acc{};
  add_row_masses(trace, map, step, layer, acc);
  for (double& v : acc) {
    v /= static_cast<double>(trace.num_heads());
  }
  return acc;
}

MassProfile compute_mass_profile(const AttentionTrace& trace, const SegmentMap& map) {
  MassProfile profile;
  profile.num_layers = trace.num_layers();
  profile.steps = trace.steps();
  profile.layer_avg.reserve(profile.steps.size());
  profile.layer_resolved.reserve(profile.steps.size());
  for (int step : profile.steps) {
    profile.layer_avg.push_back(segment_mass_layer_avg(trace, map, step));
    std::vector<SegmentMasses> per_layer;
    per_layer.reserve(trace.num_layers());
    for (int l = 0; l < trace.num_layers(); ++l) {
      per_layer.push_back(segment_mass_layer_resolved(trace, map, step, l));
    }
    profile.layer_resolved.push_back(std::move(per_layer));
  }
  return profile;
}

void export_dilution_curve(const MassProfile& profile, const std::filesystem::path& path) {
  if (profile.steps.empty()) {
    throw std::invalid_argument("export_dilution_curve: no decoding steps recorded");
  }
  std::ofstream out = open_sink(path);
  out << "step,alpha_sys,alpha_img,alpha_que,alpha_ans\n";
  for (std::size_t i = 0; i < profile.steps.size(); ++i) {
    out << (i + 1);
    for (int s = 0; s < kNumSegments; ++s) {
      out << ',' << format_value(profile.layer_avg[i][s]);
    }
    out << '\n';
  }
  finish_sink(out, path);
}

void export_layer_heatmap(const MassProfile& profile, Segment s,
                          const std::filesystem::path& path) {
  if (profile.steps.empty()) {
    throw std::invalid_argument("export_layer_heatmap: no decoding steps recorded");
  }
  std::ofstream out = open_sink(path);
  for (int l = 0; l < profile.num_layers; ++l) {
    for (std::size_t i = 0; i < profile.steps.size(); ++i) {
      if (i > 0) {
        out << ',';
      }
      out << format_value(profile.layer_resolved[i][l][static_cast<int>(s)]);
    }
    out << '\n';
  }
  finish_sink(out, path);
}

}  // namespace rave
