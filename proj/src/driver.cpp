#include "rave/driver.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "rave/checkpoint.hpp"
#include "rave/jsonio.hpp"
#include "rave/mass.hpp"
#include "rave/trace.hpp"

namespace rave {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

nlohmann::json train_config_to_json(const TrainConfig& t) {
  return nlohmann::json{{"steps", t.steps},
                        {"batch_size", t.batch_size},
                        {"optimizer", to_string(t.optimizer)},
                        {"lr", t.lr},
                        {"beta1", t.beta1},
                        {"beta2", t.beta2},
                        {"eps", t.eps},
                        {"data_seed", t.data_seed},
                        {"gate_init_sigma", t.gate_init_sigma}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.steps = j.at("steps").get<int>();
  t.batch_size = j.at("batch_size").get<int>();
  t.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  t.lr = j.at("lr").get<double>();
  t.beta1 = j.at("beta1").get<double>();
  t.beta2 = j.at("beta2").get<double>();
  t.eps = j.at("eps").get<double>();
  t.data_seed = j.at("data_seed").get<std::uint64_t>();
  t.gate_init_sigma = j.at("gate_init_sigma").get<double>();
  return t;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  out << text;
  out.flush();
  if (!out) {
    throw std::runtime_error("write failed for " + path.string());
  }
}

void validate_run(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.task.validate();
  if (cfg.task.vocab_size != cfg.model.vocab_size) {
    throw std::invalid_argument("run config: task and model vocabulary sizes differ");
  }
  if (cfg.task.seq_len() > cfg.model.max_seq_len) {
    throw std::invalid_argument("run config: task sequences exceed max_seq_len");
  }
  if (cfg.eval_sequences < 1 || cfg.trace_steps < 1) {
    throw std::invalid_argument("run config: eval_sequences and trace_steps must be positive");
  }
}

std::filesystem::path prepare_out_dir(const RunConfig& cfg) {
  const std::filesystem::path dir = resolve_under_out_root(cfg.out_dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_sidecar(const std::filesystem::path& dir, const RunConfig& cfg) {
  write_text_file(dir / "run.json", run_config_to_json(cfg) + "\n");
}

struct TraceOutputs {
  MassProfile profile;
  DecodeResult decode;
};

// Greedy-decodes the seeded trace prompt and collects the mass profile.
TraceOutputs trace_decode(const ToyModel& model, const RunConfig& cfg) {
  ToyBatch batch = generate_task(cfg.task, cfg.seed + 3, 1);
  const ToySequence& seq = batch.sequences[0];
  std::vector<int> prompt(seq.tokens.begin(), seq.tokens.begin() + seq.prompt_len);
  SegmentMap prompt_map =
      SegmentMap::from_spans(cfg.task.sys_len, 2 * cfg.task.num_pairs, 1, 0);
  AttentionTrace trace(model.spec().attention.num_layers,
                       model.spec().attention.num_query_heads);
  TraceOutputs out;
  out.decode = model.greedy_decode(prompt, prompt_map, cfg.trace_steps, &trace);
  trace.validate();
  out.profile = compute_mass_profile(trace, out.decode.map);
  return out;
}

double mean_answer_image_mass(const MassProfile& profile) {
  double sum = 0.0;
  for (const SegmentMasses& m : profile.layer_avg) {
    sum += m[static_cast<int>(Segment::kImg)];
  }
  return sum / static_cast<double>(profile.layer_avg.size());
}

std::string sanitize_cell(std::string msg) {
  for (char& c : msg) {
    if (c == ',' || c == '\n' || c == '\r') {
      c = ';';
    }
  }
  return msg;
}

}  // namespace

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.model = ToyModelSpec::make(64, 32, 64, 64, 2, 4, 2);
  cfg.task = TaskParams{};
  cfg.train = TrainConfig{};
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j{{"command", cfg.command},
                   {"model", to_json(cfg.model)},
                   {"task", to_json(cfg.task)},
                   {"train", train_config_to_json(cfg.train)},
                   {"seed", cfg.seed},
                   {"out_dir", cfg.out_dir},
                   {"checkpoint", cfg.checkpoint},
                   {"eval_sequences", cfg.eval_sequences},
                   {"trace_steps", cfg.trace_steps},
                   {"grid_locations", cfg.grid_locations},
                   {"grid_forms", cfg.grid_forms},
                   {"grid_ratios", cfg.grid_ratios},
                   {"grid_stages", cfg.grid_stages}};
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  RunConfig cfg;
  cfg.command = j.at("command").get<std::string>();
  cfg.model = model_spec_from_json(j.at("model"));
  cfg.task = task_params_from_json(j.at("task"));
  cfg.train = train_config_from_json(j.at("train"));
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.out_dir = j.at("out_dir").get<std::string>();
  cfg.checkpoint = j.at("checkpoint").get<std::string>();
  cfg.eval_sequences = j.at("eval_sequences").get<int>();
  cfg.trace_steps = j.at("trace_steps").get<int>();
  cfg.grid_locations = j.at("grid_locations").get<std::vector<std::string>>();
  cfg.grid_forms = j.at("grid_forms").get<std::vector<std::string>>();
  cfg.grid_ratios = j.at("grid_ratios").get<std::vector<double>>();
  cfg.grid_stages = j.at("grid_stages").get<std::vector<std::string>>();
  return cfg;
}

RunConfig run_config_from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open config file " + path.string());
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return run_config_from_json(buf.str());
}

std::filesystem::path resolve_under_out_root(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute()) {
    return p;
  }
  const char* root = std::getenv("RAVE_OUT_ROOT");
  if (root != nullptr && root[0] != '\0') {
    return std::filesystem::path(root) / p;
  }
  return p;
}

void run_train(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.command = "train";
  cfg.train.data_seed = cfg.seed + 1;
  validate_run(cfg);

  const std::filesystem::path dir = prepare_out_dir(cfg);
  write_sidecar(dir, cfg);

  ToyModel model(cfg.model);
  model.init_params(cfg.seed);
  TrainResult result = train(model, cfg.task, cfg.train);

  std::string loss_csv = "step,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i) {
    loss_csv += std::to_string(i + 1) + "," + fmt(result.losses[i]) + "\n";
  }
  write_text_file(dir / "loss.csv", loss_csv);

  const double accuracy = eval_accuracy(model, cfg.task, cfg.seed + 2, cfg.eval_sequences);
  save_checkpoint(dir / "checkpoint.bin",
                  checkpoint_from_model(model, cfg.train.steps, canonical_spec_json(cfg.model)));

  nlohmann::json metrics{{"final_loss", result.final_loss},
                         {"eval_accuracy", accuracy},
                         {"eval_sequences", cfg.eval_sequences}};
  write_text_file(dir / "metrics.json", metrics.dump(2) + "\n");

  std::cout << "out_dir=" << dir.string() << "\n"
            << "final_loss=" << fmt(result.final_loss) << "\n"
            << "eval_accuracy=" << fmt(accuracy) << "\n";
}

void run_trace(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.command = "trace";
  validate_run(cfg);
  if (cfg.checkpoint.empty()) {
    throw std::invalid_argument("trace requires a checkpoint path");
  }
  const Checkpoint ckpt = load_checkpoint(resolve_under_out_root(cfg.checkpoint));
  if (ckpt.spec_json != canonical_spec_json(cfg.model)) {
    throw std::runtime_error("trace: checkpoint was produced by a different model spec");
  }

  ToyModel model(cfg.model);
  load_params_from_checkpoint(ckpt, model.params());

  const std::filesystem::path dir = prepare_out_dir(cfg);
  write_sidecar(dir, cfg);

  const TraceOutputs out = trace_decode(model, cfg);
  export_dilution_curve(out.profile, dir / "dilution.csv");
  export_layer_heatmap(out.profile, Segment::kSys, dir / "heatmap_sys.csv");
  export_layer_heatmap(out.profile, Segment::kImg, dir / "heatmap_img.csv");
  export_layer_heatmap(out.profile, Segment::kQue, dir / "heatmap_que.csv");
  export_layer_heatmap(out.profile, Segment::kAns, dir / "heatmap_ans.csv");

  std::cout << "out_dir=" << dir.string() << "\n"
            << "trace_steps=" << out.profile.steps.size() << "\n"
            << "mean_alpha_img=" << fmt(mean_answer_image_mass(out.profile)) << "\n";
}

void run_ablate(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.command = "ablate";
  cfg.train.data_seed = cfg.seed + 1;
  validate_run(cfg);

  const std::filesystem::path dir = prepare_out_dir(cfg);
  write_sidecar(dir, cfg);

  if (cfg.grid_locations.empty() || cfg.grid_forms.empty() || cfg.grid_ratios.empty() ||
      cfg.grid_stages.empty()) {
    throw std::invalid_argument("ablate: every grid axis needs at least one entry");
  }
  std::vector<GateLocation> locations;
  for (const std::string& s : cfg.grid_locations) {
    locations.push_back(parse_location(s));
  }
  std::vector<GateForm> forms;
  for (const std::string& s : cfg.grid_forms) {
    forms.push_back(parse_form(s));
  }
  std::vector<GateStage> stages;
  for (const std::string& s : cfg.grid_stages) {
    stages.push_back(parse_stage(s));
  }

  int rows = 0;
  std::string csv = "location,form,head_ratio,stage,status,final_loss,accuracy,mean_alpha_img\n";
  for (GateLocation location : locations) {
    for (GateForm form : forms) {
      for (double ratio : cfg.grid_ratios) {
        for (GateStage stage : stages) {
          std::string row = to_string(location) + "," + to_string(form) + "," + fmt(ratio) +
                            "," + to_string(stage) + ",";
          try {
            RunConfig cell = cfg;
            cell.model.variant = AttentionVariant::kRave;
            cell.model.attention.location = location;
            cell.model.attention.form = form;
            cell.model.attention.head_ratio = ratio;
            cell.model.attention.stage = stage;

            ToyModel model(cell.model);
            model.init_params(cell.seed);
            TrainResult result = train(model, cell.task, cell.train);
            const double accuracy =
                eval_accuracy(model, cell.task, cell.seed + 2, cell.eval_sequences);
            const TraceOutputs out = trace_decode(model, cell);
            row += "ok," + fmt(result.final_loss) + "," + fmt(accuracy) + "," +
                   fmt(mean_answer_image_mass(out.profile));
          } catch (const std::exception& e) {
            row += "error: " + sanitize_cell(e.what()) + ",,,";
          }
          csv += row + "\n";
          ++rows;
        }
      }
    }
  }
  write_text_file(dir / "ablation.csv", csv);
  std::cout << "out_dir=" << dir.string() << "\n"
            << "grid_rows=" << rows << "\n";
}

void run_command(const RunConfig& cfg) {
  if (cfg.command == "train") {
    run_train(cfg);
  } else if (cfg.command == "trace") {
    run_trace(cfg);
  } else if (cfg.command == "ablate") {
    run_ablate(cfg);
  } else {
    throw std::invalid_argument("unknown command: " + cfg.command);
  }
}

}  // namespace rave
