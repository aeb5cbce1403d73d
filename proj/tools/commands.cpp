// Copyright 2026 The RandQ Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "experiment_config.hpp"
#include "randq/checkpoint.hpp"
#include "randq/error.hpp"
#include "randq/eval.hpp"
#include "randq/train.hpp"

namespace randq::cli {
namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> sets;
  std::string output_dir;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.sets, "Override one key, e.g. --set train.seed=7 (repeatable, applied in order)")
      ->allow_extra_args(false);
  cmd->add_option("-o,--output-dir", f.output_dir, "Output directory (overrides output_dir)");
}

ExperimentConfig load(const CommonFlags& f) {
  std::vector<std::string> sets = f.sets;
  if (!f.output_dir.empty()) sets.push_back("output_dir=\"" + f.output_dir + "\"");
  std::optional<fs::path> file;
  if (!f.config.empty()) file = f.config;
  return resolve(file, sets, std::getenv("RANDQ_SEED"));
}

// Creates the output directory and records the resolved config and its digest.
fs::path prepare_output(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  std::ofstream(cfg.output_dir / "config.json") << cfg.resolved.dump(2) << "\n";
  std::ofstream(cfg.output_dir / "config.digest") << digest(cfg.resolved) << "\n";
  return cfg.output_dir;
}

std::pair<Dataset, Dataset> load_data(const ExperimentConfig& cfg, const std::string& data_dir) {
  if (data_dir.empty()) return generate_dataset(cfg.task);
  return {read_dataset(fs::path(data_dir) / "train.tsv"), read_dataset(fs::path(data_dir) / "eval.tsv")};
}

bool has_learned_scales(const Checkpoint& ckpt) {
  for (const auto& [name, t] : ckpt.params) {
    if (name.ends_with(".lsc_scale")) return true;
  }
  return false;
}

PtqOptions ptq_options(const ExperimentConfig& cfg, const Checkpoint& ckpt) {
  PtqOptions opt;
  opt.granularity = cfg.eval.granularity;
  opt.use_ema = cfg.eval.use_ema;
  if (has_learned_scales(ckpt)) opt.learned_scale_bit = cfg.qat.bit;
  return opt;
}

void write_assignment(const PrecisionAssignment& a, const fs::path& path) {
  std::ofstream os(path);
  os << "layer,precision\n";
  for (const auto& [layer, p] : a) os << layer << "," << to_string(p) << "\n";
  if (!os) throw Error("cannot write " + path.string());
}

PrecisionAssignment read_assignment(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open assignment file " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "layer,precision") {
    throw ConfigError(path.string() + ": expected header 'layer,precision'");
  }
  PrecisionAssignment out;
  for (int n = 2; std::getline(is, line); ++n) {
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos) throw ConfigError(path.string() + ":" + std::to_string(n) + ": missing comma");
    out[line.substr(0, comma)] = parse_precision(line.substr(comma + 1));
  }
  return out;
}

// "float", "int8" or "int4" when the artifact is uniform, "mixed" otherwise.
std::string precision_label(const Checkpoint& artifact) {
  std::set<int> bits;
  for (const auto& [name, q] : artifact.quantized) bits.insert(q.bit());
  if (bits.empty()) return "float";
  const std::size_t layers = quantizable_layers(artifact.model).size();
  if (bits.size() == 1 && artifact.quantized.size() == layers) return *bits.begin() == 8 ? "int8" : "int4";
  return "mixed";
}

void label_row(ReportRow& row, const ExperimentConfig& cfg) {
  row.outlier_method = cfg.qat.outlier_method;
  row.qat_method = cfg.qat.qat_method;
  row.train_bit = cfg.qat.bit;
  row.granularity = cfg.eval.granularity;
  row.seed = cfg.train.seed;
}

// --- subcommands -------------------------------------------------------------

int run_gen_data(const CommonFlags& f, std::ostream& out) {
  const ExperimentConfig cfg = load(f);
  const fs::path dir = prepare_output(cfg);
  const auto [train_set, eval_set] = generate_dataset(cfg.task);
  write_dataset(train_set, dir / "train.tsv");
  write_dataset(eval_set, dir / "eval.tsv");
  out << "wrote " << train_set.size() << " train and " << eval_set.size() << " eval examples to " << dir.string()
      << "\n";
  return kExitOk;
}

int run_train(const CommonFlags& f, const std::string& data_dir, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = load(f);
  const fs::path dir = prepare_output(cfg);
  const auto [train_set, eval_set] = load_data(cfg, data_dir);
  const long every = std::max(1, cfg.train.steps / 20);
  TrainResult result = train(init_model(cfg.model, cfg.train.seed), train_set, eval_set, cfg.train,
                             [&](long step, double loss) {
                               if (step % every == 0) err << "step " << step << " loss " << loss << "\n";
                             });
  result.checkpoint.config_digest = digest(cfg.resolved);
  save_checkpoint(result.checkpoint, dir / "checkpoint.bin");
  write_trace(result.trace, dir / "trace.csv");

  const EvalMetrics m = evaluate_metrics(model_from_checkpoint(result.checkpoint, cfg.eval.use_ema), eval_set);
  out << "step " << result.checkpoint.step << " eval loss " << m.loss << " sequence error rate "
      << m.sequence_error_rate << "\n";
  return kExitOk;
}

int run_quantize(const CommonFlags& f, const std::string& ckpt_path, const std::string& assignment_path,
                 std::ostream& out) {
  const ExperimentConfig cfg = load(f);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const PrecisionAssignment assignment = assignment_path.empty() ? uniform_assignment(ckpt.model, cfg.eval.precision)
                                                                 : read_assignment(assignment_path);
  const Checkpoint artifact = ptq_checkpoint(ckpt, assignment, ptq_options(cfg, ckpt));
  const fs::path dir = prepare_output(cfg);
  save_checkpoint(artifact, dir / "artifact.bin");
  out << precision_label(artifact) << " artifact, " << model_size_bytes(artifact) << " bytes\n";
  return kExitOk;
}

int run_eval(const CommonFlags& f, const std::string& ckpt_path, const std::string& data_dir, std::ostream& out) {
  const ExperimentConfig cfg = load(f);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset eval_set = load_data(cfg, data_dir).second;

  std::vector<ReportRow> rows;
  if (!ckpt.quantized.empty()) {
    rows.push_back(evaluate(ckpt, eval_set, precision_label(ckpt)));
  } else {
    const PtqOptions opt = ptq_options(cfg, ckpt);
    for (Precision p : {Precision::kFloat, Precision::kInt8, Precision::kInt4}) {
      const Checkpoint artifact = ptq_checkpoint(ckpt, uniform_assignment(ckpt.model, p), opt);
      rows.push_back(evaluate(artifact, eval_set, to_string(p)));
    }
  }
  for (ReportRow& r : rows) label_row(r, cfg);
  const fs::path dir = prepare_output(cfg);
  write_report(rows, dir / "eval.csv");
  for (const ReportRow& r : rows) {
    out << r.eval_precision << ": sequence error rate " << r.sequence_error_rate << ", loss " << r.loss << ", "
        << r.model_size_bytes << " bytes\n";
  }
  return kExitOk;
}

int run_sensitivity(const CommonFlags& f, const std::string& ckpt_path, const std::string& data_dir,
                    std::ostream& out) {
  const ExperimentConfig cfg = load(f);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset eval_set = load_data(cfg, data_dir).second;
  const PtqOptions opt = ptq_options(cfg, ckpt);
  const Sensitivity sens = layer_sensitivity(ckpt, eval_set, cfg.eval.precision, opt);

  const fs::path dir = prepare_output(cfg);
  {
    std::ofstream os(dir / "sensitivity.csv");
    os << "layer,group,loss_delta\n";
    char buf[32];
    for (const LayerInfo& layer : quantizable_layers(ckpt.model)) {
      std::snprintf(buf, sizeof buf, "%.9g", sens.delta.at(layer.name));
      os << layer.name << "," << to_string(layer.group) << "," << buf << "\n";
    }
  }
  out << "float loss " << sens.float_loss << ", whole-model " << to_string(cfg.eval.precision) << " delta "
      << sens.whole_model_delta << "\n";

  if (cfg.eval.budget_bytes > 0) {
    const PrecisionAssignment mixed =
        assign_mixed_precision(ckpt.model, sens.delta, cfg.eval.budget_bytes, cfg.eval.granularity);
    write_assignment(mixed, dir / "assignment.csv");
    std::size_t promoted = 0;
    for (const auto& [layer, p] : mixed) promoted += p == Precision::kInt8;
    out << promoted << " of " << mixed.size() << " layers at int8, "
        << model_size_bytes(ckpt.model, mixed, cfg.eval.granularity) << " of " << cfg.eval.budget_bytes
        << " bytes\n";
  }
  return kExitOk;
}

int run_sweep_cmd(const CommonFlags& f, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = load(f);
  if (cfg.grid.empty()) throw ConfigError("sweep.grid is empty");
  const fs::path dir = prepare_output(cfg);

  SweepOptions opt;
  opt.task = cfg.task;
  opt.model = cfg.model;
  opt.train = cfg.train;
  opt.use_ema = cfg.eval.use_ema;
  opt.workers = cfg.workers;
  std::size_t total = 0;
  for (const SweepCell& c : cfg.grid) total += c.seeds.size();
  std::size_t done = 0;
  opt.on_run = [&](const SweepCell& cell, std::uint64_t seed, bool converged) {
    ++done;
    err << "[" << done << "/" << total << "] " << to_string(cell.qat.outlier_method) << "/"
        << to_string(cell.qat.qat_method) << " int" << cell.qat.bit << " seed " << seed
        << (converged ? "" : " diverged") << "\n";
  };
  const std::vector<ReportRow> rows = run_sweep(cfg.grid, opt);
  write_report(rows, dir / "report.csv");
  out << "wrote " << rows.size() << " rows to " << (dir / "report.csv").string() << "\n";
  return kExitOk;
}

int run_report(const std::string& input, std::ostream& out) {
  const std::vector<ReportRow> rows = read_report(input);
  out << "outlier,qat,train_bit,precision,granularity,runs,failed,sequence_error_rate,loss,model_size_bytes\n";
  for (const AggregateRow& a : aggregate(rows)) {
    out << to_string(a.key.outlier_method) << "," << to_string(a.key.qat_method) << "," << a.key.train_bit << ","
        << a.key.eval_precision << "," << to_string(a.key.granularity) << "," << a.runs << "," << a.failed << ","
        << format_pm(a.mean_error, a.std_error) << "," << format_pm(a.mean_loss, a.std_loss) << ","
        << a.key.model_size_bytes << "\n";
  }
  return kExitOk;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"randq: quantization-aware training experiments on toy seq2seq tasks", "randq"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string checkpoint, assignment, data_dir, input;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate train.tsv and eval.tsv");
  add_common(gen, flags);

  CLI::App* tr = app.add_subcommand("train", "Train a model; writes checkpoint.bin and trace.csv");
  add_common(tr, flags);
  tr->add_option("--data", data_dir, "Directory with train.tsv and eval.tsv (default: generate)")
      ->check(CLI::ExistingDirectory);

  CLI::App* quant = app.add_subcommand("quantize", "Post-training quantization; writes artifact.bin");
  add_common(quant, flags);
  quant->add_option("--checkpoint", checkpoint, "Checkpoint to quantize")->required()->check(CLI::ExistingFile);
  quant->add_option("--assignment", assignment, "Per-layer precision CSV (default: eval.precision everywhere)")
      ->check(CLI::ExistingFile);

  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint or artifact; writes eval.csv");
  add_common(ev, flags);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint or quantized artifact")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "Directory with eval.tsv (default: generate)")->check(CLI::ExistingDirectory);

  CLI::App* sens = app.add_subcommand("sensitivity", "Per-layer quantization sensitivity and mixed precision");
  add_common(sens, flags);
  sens->add_option("--checkpoint", checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  sens->add_option("--data", data_dir, "Directory with eval.tsv (default: generate)")->check(CLI::ExistingDirectory);

  CLI::App* sw = app.add_subcommand("sweep", "Train and evaluate every grid cell; writes report.csv");
  add_common(sw, flags);

  CLI::App* rep = app.add_subcommand("report", "Mean and standard deviation across seeds of a report CSV");
  rep->add_option("--input", input, "report.csv from sweep")->required()->check(CLI::ExistingFile);

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  if (const std::string first = argv[1]; !first.starts_with("-")) {
    bool known = false;
    for (const CLI::App* sub : app.get_subcommands({})) known = known || sub->check_name(first);
    if (!known) {
      err << "randq: unknown subcommand '" << first << "'\n" << app.help();
      return kExitUsage;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "randq: " << e.what() << "\n";
    CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return run_gen_data(flags, out);
    if (tr->parsed()) return run_train(flags, data_dir, out, err);
    if (quant->parsed()) return run_quantize(flags, checkpoint, assignment, out);
    if (ev->parsed()) return run_eval(flags, checkpoint, data_dir, out);
    if (sens->parsed()) return run_sensitivity(flags, checkpoint, data_dir, out);
    if (sw->parsed()) return run_sweep_cmd(flags, out, err);
    if (rep->parsed()) return run_report(input, out);
  } catch (const Error& e) {
    err << "randq: error: " << e.what() << "\n";
    return kExitDomainError;
  } catch (const std::exception& e) {
    err << "randq: error: " << e.what() << "\n";
    return kExitDomainError;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace randq::cli
