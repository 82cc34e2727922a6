#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rave/config.hpp"
#include "rave/driver.hpp"

namespace {

struct CliOptions {
  std::string config_path;

  std::uint64_t seed = 1;
  std::string out_dir;
  std::string checkpoint;
  int eval_sequences = 200;
  int trace_steps = 6;

  int vocab = 64;
  int d_model = 32;
  int d_ff = 64;
  int max_seq_len = 64;
  int layers = 2;
  int heads = 4;
  int kv_heads = 2;

  std::string variant = "standard";
  std::string location = "pre";
  std::string form = "add";
  std::string stage = "pd";
  double head_ratio = 0.25;
  double gamma = 1.0;

  int pairs = 4;
  int num_keys = 8;
  int sys_len = 2;
  int ans_len = 1;
  bool ignore_image = false;

  int steps = 500;
  int batch_size = 16;
  std::string optimizer = "sgd";
  double lr = 1e-3;
  double gate_init_sigma = 0.0;

  std::vector<std::string> grid_locations;
  std::vector<std::string> grid_forms;
  std::vector<double> grid_ratios;
  std::vector<std::string> grid_stages;
};

void add_common_flags(CLI::App* cmd, CliOptions& opt) {
  cmd->add_option("--config", opt.config_path,
                  "Run sidecar (run.json) to load before applying flags");
  cmd->add_option("--seed", opt.seed, "Base seed; derived streams use seed+1..seed+3");
  cmd->add_option("--out", opt.out_dir, "Output directory (relative paths join $RAVE_OUT_ROOT)");
  cmd->add_option("--eval-sequences", opt.eval_sequences, "Held-out sequences for accuracy");
  cmd->add_option("--trace-steps", opt.trace_steps, "Tokens to decode when tracing");

  cmd->add_option("--vocab", opt.vocab, "Vocabulary size");
  cmd->add_option("--d-model", opt.d_model, "Model width");
  cmd->add_option("--d-ff", opt.d_ff, "Feed-forward width");
  cmd->add_option("--max-seq-len", opt.max_seq_len, "Maximum sequence length");
  cmd->add_option("--layers", opt.layers, "Decoder layers");
  cmd->add_option("--heads", opt.heads, "Query heads");
  cmd->add_option("--kv-heads", opt.kv_heads, "Key/value heads");

  cmd->add_option("--variant", opt.variant, "Attention variant: standard|rave");
  cmd->add_option("--location", opt.location, "Gate location: pre|post");
  cmd->add_option("--form", opt.form, "Gate form: add|mul");
  cmd->add_option("--stage", opt.stage, "Gate stage: pd|dec");
  cmd->add_option("--head-ratio", opt.head_ratio, "Gated fraction p of each GQA group");
  cmd->add_option("--gamma", opt.gamma, "Recalibration strength");

  cmd->add_option("--pairs", opt.pairs, "Key-value pairs in the image segment");
  cmd->add_option("--num-keys", opt.num_keys, "Key sub-vocabulary size");
  cmd->add_option("--sys-len", opt.sys_len, "System segment length");
  cmd->add_option("--ans-len", opt.ans_len, "Answer length");
  cmd->add_flag("--ignore-image", opt.ignore_image,
                "Labels depend on the question only, not the image");

  cmd->add_option("--steps", opt.steps, "Training steps");
  cmd->add_option("--batch-size", opt.batch_size, "Sequences per step");
  cmd->add_option("--optimizer", opt.optimizer, "sgd|adam");
  cmd->add_option("--lr", opt.lr, "Learning rate");
  cmd->add_option("--gate-init-sigma", opt.gate_init_sigma,
                  "Re-draw gate weights from N(0, sigma) before training "
                  "(0 keeps the exact-zero initialization)");

  cmd->add_option("--checkpoint", opt.checkpoint, "Checkpoint to trace from");
  cmd->add_option("--grid-locations", opt.grid_locations, "Ablation axis: locations")
      ->delimiter(',');
  cmd->add_option("--grid-forms", opt.grid_forms, "Ablation axis: forms")->delimiter(',');
  cmd->add_option("--grid-ratios", opt.grid_ratios, "Ablation axis: head ratios")
      ->delimiter(',');
  cmd->add_option("--grid-stages", opt.grid_stages, "Ablation axis: stages")->delimiter(',');
}

// Flags the user actually passed override the loaded sidecar; everything else
// keeps the sidecar's values.
rave::RunConfig build_config(const CLI::App* cmd, const CliOptions& opt,
                             const std::string& command) {
  rave::RunConfig cfg;
  if (!opt.config_path.empty()) {
    cfg = rave::run_config_from_file(opt.config_path);
  } else {
    cfg = rave::default_run_config();
  }
  if (!command.empty()) {
    cfg.command = command;
  }

  auto given = [cmd](const std::string& flag) { return cmd->count(flag) > 0; };

  if (given("--seed")) cfg.seed = opt.seed;
  if (given("--out")) cfg.out_dir = opt.out_dir;
  if (given("--eval-sequences")) cfg.eval_sequences = opt.eval_sequences;
  if (given("--trace-steps")) cfg.trace_steps = opt.trace_steps;
  if (given("--checkpoint")) cfg.checkpoint = opt.checkpoint;

  const bool model_touched = given("--vocab") || given("--d-model") || given("--d-ff") ||
                             given("--max-seq-len") || given("--layers") || given("--heads") ||
                             given("--kv-heads");
  if (model_touched) {
    int vocab = given("--vocab") ? opt.vocab : cfg.model.vocab_size;
    int d_model = given("--d-model") ? opt.d_model : cfg.model.d_model;
    int d_ff = given("--d-ff") ? opt.d_ff : cfg.model.d_ff;
    int max_len = given("--max-seq-len") ? opt.max_seq_len : cfg.model.max_seq_len;
    int layers = given("--layers") ? opt.layers : cfg.model.attention.num_layers;
    int heads = given("--heads") ? opt.heads : cfg.model.attention.num_query_heads;
    int kv = given("--kv-heads") ? opt.kv_heads : cfg.model.attention.num_kv_heads;
    const rave::AttentionConfig keep = cfg.model.attention;
    cfg.model = rave::ToyModelSpec::make(vocab, d_model, d_ff, max_len, layers, heads, kv);
    cfg.model.attention.gamma = keep.gamma;
    cfg.model.attention.head_ratio = keep.head_ratio;
    cfg.model.attention.location = keep.location;
    cfg.model.attention.form = keep.form;
    cfg.model.attention.stage = keep.stage;
  }

  if (given("--variant")) cfg.model.variant = rave::parse_variant(opt.variant);
  if (given("--location")) cfg.model.attention.location = rave::parse_location(opt.location);
  if (given("--form")) cfg.model.attention.form = rave::parse_form(opt.form);
  if (given("--stage")) cfg.model.attention.stage = rave::parse_stage(opt.stage);
  if (given("--head-ratio")) cfg.model.attention.head_ratio = opt.head_ratio;
  if (given("--gamma")) cfg.model.attention.gamma = opt.gamma;

  if (given("--pairs")) cfg.task.num_pairs = opt.pairs;
  if (given("--num-keys")) cfg.task.num_keys = opt.num_keys;
  if (given("--sys-len")) cfg.task.sys_len = opt.sys_len;
  if (given("--ans-len")) cfg.task.ans_len = opt.ans_len;
  if (given("--ignore-image")) cfg.task.ignore_image = opt.ignore_image;
  if (given("--vocab")) cfg.task.vocab_size = opt.vocab;

  if (given("--steps")) cfg.train.steps = opt.steps;
  if (given("--batch-size")) cfg.train.batch_size = opt.batch_size;
  if (given("--optimizer")) cfg.train.optimizer = rave::parse_optimizer(opt.optimizer);
  if (given("--lr")) cfg.train.lr = opt.lr;
  if (given("--gate-init-sigma")) cfg.train.gate_init_sigma = opt.gate_init_sigma;

  if (given("--grid-locations")) cfg.grid_locations = opt.grid_locations;
  if (given("--grid-forms")) cfg.grid_forms = opt.grid_forms;
  if (given("--grid-ratios")) cfg.grid_ratios = opt.grid_ratios;
  if (given("--grid-stages")) cfg.grid_stages = opt.grid_stages;

  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pair-gated attention testbed: train, trace and ablate toy models"};
  app.require_subcommand(0, 1);

  CliOptions opt;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  CLI::App* trace_cmd =
      app.add_subcommand("trace", "Decode from a checkpoint and export mass CSVs");
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "Run the variant grid");
  add_common_flags(train_cmd, opt);
  add_common_flags(trace_cmd, opt);
  add_common_flags(ablate_cmd, opt);
  app.add_option("--config", opt.config_path, "Run sidecar to execute as-is");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      rave::run_command(build_config(train_cmd, opt, "train"));
    } else if (trace_cmd->parsed()) {
      rave::run_command(build_config(trace_cmd, opt, "trace"));
    } else if (ablate_cmd->parsed()) {
      rave::run_command(build_config(ablate_cmd, opt, "ablate"));
    } else if (!opt.config_path.empty()) {
      rave::run_command(rave::run_config_from_file(opt.config_path));
    } else {
      std::cerr << app.help();
      return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
