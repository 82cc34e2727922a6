#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rave/model.hpp"
#include "rave/task.hpp"
#include "rave/train.hpp"

namespace rave {

// Everything one run needs, serialized verbatim into the run directory as
// run.json; rerunning from that sidecar reproduces every artifact
// byte for byte. Seeds derive from `seed`: model init uses seed, the batch
// stream seed+1, evaluation seed+2 and the traced prompt seed+3.
struct RunConfig {
  std::string command = "train";  // train | trace | ablate
  ToyModelSpec model;
  TaskParams task;
  TrainConfig train;
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  std::string checkpoint;  // trace input
  int eval_sequences = 200;
  int trace_steps = 6;

  // Ablation grid: the cross product of these axes, one row per cell. The
  // defaults cover the full variant table; any axis may be narrowed.
  std::vector<std::string> grid_locations = {"pre", "post"};
  std::vector<std::string> grid_forms = {"add", "mul"};
  std::vector<double> grid_ratios = {0.25, 0.5, 0.75, 1.0};
  std::vector<std::string> grid_stages = {"pd", "dec"};
};

// Desk-scale defaults: vocab 64, d_model 32, 2 layers, 4 query / 2 kv heads.
RunConfig default_run_config();

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
RunConfig run_config_from_file(const std::filesystem::path& path);

// Relative paths land under $RAVE_OUT_ROOT when set, the working directory
// otherwise; absolute paths pass through.
std::filesystem::path resolve_under_out_root(const std::string& path);

void run_train(const RunConfig& cfg);
void run_trace(const RunConfig& cfg);
void run_ablate(const RunConfig& cfg);
void run_command(const RunConfig& cfg);

}  // namespace rave
