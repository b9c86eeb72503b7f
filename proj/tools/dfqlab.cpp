// SPDX-License-Identifier: Apache-2.0
/**
 * @file   dfqlab.cpp
 * @brief  Command-line driver: teacher training, synthesis, quantized
 *         distillation, evaluation and the studies.
 *
 * Every command writes report.json (plus artifacts) under --out. Exit codes:
 * 0 success, 1 runtime failure, 2 malformed configuration, 3 missing
 * checkpoint, 64 bad usage.
 */

#include <dfq/checkpoint.hpp>
#include <dfq/config.hpp>
#include <dfq/log.hpp>
#include <dfq/studies.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>

#ifndef DFQ_VERSION
#define DFQ_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace dfq;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::string> quant, quant_mode, metric;
  std::optional<double> gamma, alpha, beta;
  std::optional<std::size_t> n;
  std::vector<std::string> sets;
  std::string teacher, data, checkpoint, base, mimiq;
  bool real = false;
  bool verbose = false;
};

/// Flags become an INI overlay so they are validated exactly like a file.
std::string overlay(const Options &o, const std::string &command) {
  std::map<std::string, std::map<std::string, std::string>> ini;
  if (o.seed)
    ini["lab"]["seed"] = std::to_string(*o.seed);
  const bool corr = command == "corr-study";
  const std::string qsec = corr ? "corr" : "distill";
  if (o.quant)
    ini[qsec]["quant"] = *o.quant;
  if (o.quant_mode)
    ini[qsec]["quant_mode"] = *o.quant_mode;
  auto num = [](double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  };
  if (o.gamma)
    ini["distill"]["gamma"] = num(*o.gamma);
  if (o.alpha)
    ini["synth"]["alpha"] = num(*o.alpha);
  if (o.beta)
    ini["synth"]["beta"] = num(*o.beta);
  if (o.metric)
    ini["distill"]["metric"] = *o.metric;
  if (o.n)
    ini["corr"]["n_configs"] = std::to_string(*o.n);
  for (const auto &s : o.sets) {
    const auto eq = s.find('=');
    const auto dot = s.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError(s, "--set expects section.key=value");
    ini[s.substr(0, dot)][s.substr(dot + 1, eq - dot - 1)] = s.substr(eq + 1);
  }
  std::string text;
  for (const auto &[section, keys] : ini) {
    text += "[" + section + "]\n";
    for (const auto &[k, v] : keys)
      text += k + " = " + v + "\n";
  }
  return text;
}

LabConfig effective_config(const Options &o, const std::string &command) {
  LabConfig c = o.config_path.empty() ? default_lab_config()
                                      : load_config(o.config_path);
  return parse_config(overlay(o, command), c);
}

/// Sectioned echo as JSON objects of strings (the INI text is also kept).
json config_json(const std::string &ini) {
  json out = json::object();
  std::istringstream in(ini);
  std::string line, section;
  while (std::getline(in, line)) {
    if (line.empty())
      continue;
    if (line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      out[section] = json::object();
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq != std::string::npos)
      out[section][line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

/// Everything that could change the numbers, nothing that varies per run.
json environment() {
  return {{"version", DFQ_VERSION},
          {"compiler", __VERSION__},
          {"cxx_standard", __cplusplus},
          {"compute", "binary64"},
          {"storage", "binary32 little-endian, round to nearest even"},
          {"rng", "mt19937_64; uniform = top 53 bits; normal = Box-Muller"},
          {"threads", 1}};
}

/// Choices the method leaves open, spelled out for every run.
json decisions(const LabConfig &c) {
  return {
      {"quantized_sites", "weights and inputs of every linear layer; softmax, "
                          "attention matmuls, LayerNorm and residuals stay "
                          "full precision"},
      {"coherency_maps", c.synth.post_softmax ? "post-softmax" : "pre-softmax"},
      {"synthetic_pixels", "unclamped, no renormalization during synthesis"},
      {"distill_target", to_string(c.distill.had_target)},
      {"kl_direction", "teacher || student, temperature 1"},
      {"checkpoint_selection", "best accuracy on the held-out selection part; "
                               "accuracies reported on the disjoint remainder"},
  };
}

class Run {
public:
  Run(std::string command, const Options &o, LabConfig cfg)
      : command_(std::move(command)), out_(o.out), cfg_(std::move(cfg)) {
    fs::create_directories(out_);
    const std::string ini = to_ini(cfg_);
    report_["command"] = command_;
    report_["config"] = config_json(ini);
    report_["config_ini"] = ini;
    report_["environment"] = environment();
    report_["decisions"] = decisions(cfg_);
    report_["inputs"] = json::object();
    report_["metrics"] = json::object();
    report_["series"] = json::object();
    report_["artifacts"] = json::array();
    write_text("config.ini", ini);
  }

  const LabConfig &config() const { return cfg_; }
  json &metrics() { return report_["metrics"]; }
  json &series() { return report_["series"]; }
  json &inputs() { return report_["inputs"]; }

  fs::path path(const std::string &name) const { return out_ / name; }

  void write_text(const std::string &name, const std::string &text) {
    std::ofstream f(out_ / name, std::ios::binary | std::ios::trunc);
    if (!f)
      throw std::runtime_error("cannot write " + (out_ / name).string());
    f << text;
    artifact(name);
  }

  void artifact(const std::string &name) {
    if (name == "report.json")
      return;
    auto &a = report_["artifacts"];
    if (std::find(a.begin(), a.end(), name) == a.end())
      a.push_back(name);
  }

  void finish() {
    std::ofstream f(out_ / "report.json", std::ios::binary | std::ios::trunc);
    f << report_.dump(2) << "\n";
    if (!f)
      throw std::runtime_error("cannot write report.json");
  }

private:
  std::string command_;
  fs::path out_;
  LabConfig cfg_;
  json report_;
};

MicroViT load_teacher(const Options &o) {
  if (o.teacher.empty())
    throw CheckpointNotFound("no teacher checkpoint given (--teacher)");
  return model_from_checkpoint(load_checkpoint(o.teacher));
}

EvalSplit eval_split(const LabConfig &c) {
  return split_heldout(make_toy_shapes(c.data).heldout, c.select_images);
}

json distill_log_json(const std::vector<DistillLogEntry> &log) {
  json rows = json::array();
  for (const auto &e : log) {
    json r = {{"epoch", e.epoch},
              {"loss_kl", e.loss_kl},
              {"loss_had", e.loss_had},
              {"loss_total", e.loss_total}};
    if (e.eval_accuracy)
      r["select_accuracy"] = *e.eval_accuracy;
    rows.push_back(r);
  }
  return rows;
}

json synth_json(const SynthDataset &ds) {
  json batches = json::array();
  for (const auto &b : ds.batches)
    batches.push_back({{"seed", b.seed},
                       {"images", b.labels.size()},
                       {"restarts", b.restarts},
                       {"final_ihc", b.final_ihc},
                       {"loss_trace", b.loss_trace}});
  return batches;
}

// ---------------------------------------------------------------- commands

void cmd_train_teacher(Run &run) {
  const LabConfig &c = run.config();
  const ToyShapes ds = make_toy_shapes(c.data);
  const EvalSplit split = split_heldout(ds.heldout, c.select_images);
  TeacherResult r = train_teacher(c.vit, ds.train, split.select, c.teacher);
  round_to_storage(r.model);
  save_checkpoint(run.path("teacher.ck"), model_checkpoint(r.model));
  run.artifact("teacher.ck");
  run.metrics()["report_accuracy"] = accuracy(r.model, split.report);
  run.metrics()["select_accuracy"] = accuracy(r.model, split.select);
  run.metrics()["best_epoch"] = r.best_epoch;
  run.metrics()["pixel_mean"] = ds.pixel_mean;
  run.metrics()["pixel_std"] = ds.pixel_std;
  json log = json::array();
  for (const auto &e : r.log)
    log.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"train_accuracy", e.train_accuracy},
                   {"select_accuracy", e.heldout_accuracy}});
  run.series()["epochs"] = log;
}

void cmd_synth(Run &run, const Options &o) {
  const MicroViT teacher = load_teacher(o);
  run.inputs()["teacher"] = o.teacher;
  const SynthDataset ds = synthesize(teacher, run.config().synth);
  save_synth_dataset(run.path("synth"), ds);
  run.artifact("synth/manifest.json");
  for (std::size_t i = 0; i < ds.batches.size(); ++i)
    run.artifact("synth/shard_" + std::string(i < 10 ? "00" : i < 100 ? "0" : "") +
                 std::to_string(i) + ".ck");
  run.metrics()["samples"] = ds.size();
  run.metrics()["mean_coherency"] = ds.mean_coherency();
  run.series()["batches"] = synth_json(ds);
}

SynthDataset load_data(const std::string &flag, const std::string &dir) {
  if (dir.empty())
    throw CheckpointNotFound("no synthetic set given (" + flag + ")");
  return load_synth_dataset(dir);
}

void cmd_dfq(Run &run, const Options &o) {
  const MicroViT teacher = load_teacher(o);
  const LabConfig &c = run.config();
  run.inputs()["teacher"] = o.teacher;
  // --real: the real-data fine-tuning baseline, same objective, labels unused.
  Tensor images;
  if (o.real) {
    images = make_toy_shapes(c.data).train.images;
    run.inputs()["data"] = "toy training split";
  } else {
    images = load_data("--data", o.data).as_labeled().images;
    run.inputs()["data"] = o.data;
  }
  const EvalSplit split = eval_split(c);
  DistillResult r = run_distillation(
      teacher, images, c.distill,
      split.select.size() ? &split.select : nullptr);
  save_checkpoint(run.path("student.ck"), student_checkpoint(r.student));
  run.artifact("student.ck");
  // Report the stored student, i.e. after 32-bit rounding.
  QuantizedViT stored =
      student_from_checkpoint(load_checkpoint(run.path("student.ck")));
  run.metrics()["report_accuracy"] =
      accuracy(stored.model(), split.report, 128, &stored);
  run.metrics()["teacher_report_accuracy"] = accuracy(teacher, split.report);
  run.metrics()["best_epoch"] = r.best_epoch;
  run.metrics()["steps"] = r.steps;
  run.series()["epochs"] = distill_log_json(r.log);
}

void cmd_eval(Run &run, const Options &o) {
  if (o.checkpoint.empty())
    throw CheckpointNotFound("no checkpoint given (--checkpoint)");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  run.inputs()["checkpoint"] = o.checkpoint;
  const EvalSplit split = eval_split(run.config());
  const bool student = ck.config.find("[quant]") != std::string::npos;
  run.metrics()["kind"] = student ? "student" : "model";
  auto measure = [&](const LabeledImages &d) {
    if (student) {
      QuantizedViT q = student_from_checkpoint(ck);
      return accuracy(q.model(), d, 128, &q);
    }
    return accuracy(model_from_checkpoint(ck), d);
  };
  run.metrics()["report_accuracy"] = measure(split.report);
  if (split.select.size())
    run.metrics()["select_accuracy"] = measure(split.select);
}

void cmd_corr_study(Run &run, const Options &o) {
  const MicroViT teacher = load_teacher(o);
  run.inputs()["teacher"] = o.teacher;
  const EvalSplit split = eval_split(run.config());
  const CorrStudy st = head_quant_corr_study(teacher, split.report, run.config().corr);
  run.write_text("corr_table.csv", st.table_csv());
  run.write_text("corr_scatter.csv", st.scatter_csv());
  for (const auto &row : st.rows) {
    json r = json::object();
    r["spearman_abs"] = row.spearman_abs ? json(*row.spearman_abs) : json("degenerate");
    r["kendall_abs"] = row.kendall_abs ? json(*row.kendall_abs) : json("degenerate");
    run.metrics()[to_string(row.metric)] = r;
  }
}

void cmd_motiv_study(Run &run, const Options &o) {
  const MicroViT teacher = load_teacher(o);
  run.inputs()["teacher"] = o.teacher;
  const LabConfig &c = run.config();
  auto pool = [&](const std::string &dir, bool ihc, std::uint64_t salt) {
    if (!dir.empty())
      return load_synth_dataset(dir);
    SynthConfig sc = c.synth;
    sc.use_ihc = ihc;
    sc.samples_total = c.motiv.pool;
    sc.seed = repeat_seed(c.synth.seed, salt);
    return synthesize(teacher, sc);
  };
  const SynthDataset base = pool(o.base, false, 0);
  const SynthDataset mimiq = pool(o.mimiq, true, 1);
  if (o.base.empty())
    save_synth_dataset(run.path("base_pool"), base);
  else
    run.inputs()["base"] = o.base;
  if (o.mimiq.empty())
    save_synth_dataset(run.path("mimiq_pool"), mimiq);
  else
    run.inputs()["mimiq"] = o.mimiq;
  DistillConfig dc = c.distill;
  const MotivStudy st =
      motiv_study(teacher, base, mimiq, eval_split(c), c.motiv, dc);
  run.write_text("motiv_histogram.csv", st.histogram_csv());
  run.write_text("motiv_subsets.csv", st.subsets_csv());
  run.metrics()["base_mean_coherency"] = st.base_mean_coherency;
  run.metrics()["mimiq_mean_coherency"] = st.mimiq_mean_coherency;
  for (const auto &s : st.subsets)
    run.metrics()["accuracy_" + s.name] = s.mean_accuracy();
}

void cmd_sweep_bits(Run &run, const Options &o) {
  const MicroViT teacher = load_teacher(o);
  const SynthDataset data = load_data("--data", o.data);
  run.inputs()["teacher"] = o.teacher;
  run.inputs()["data"] = o.data;
  const SweepTable t = sweep_bits(teacher, data.as_labeled().images,
                                  eval_split(run.config()), run.config().sweep,
                                  run.config().distill);
  run.write_text("sweep.csv", t.csv());
  run.metrics()["weight_delta"] = t.delta("weight");
  run.metrics()["activation_delta"] = t.delta("activation");
}

/// Collects the scalar metrics of every report.json below --out.
void cmd_report(const Options &o) {
  std::vector<fs::path> reports;
  if (!fs::exists(o.out))
    throw std::runtime_error("no such directory: " + o.out);
  for (const auto &e : fs::recursive_directory_iterator(o.out))
    if (e.is_regular_file() && e.path().filename() == "report.json")
      reports.push_back(e.path());
  std::sort(reports.begin(), reports.end());
  std::string csv = "run,command,metric,value\n";
  for (const auto &p : reports) {
    std::ifstream in(p, std::ios::binary);
    const json r = json::parse(in);
    const std::string run = fs::relative(p.parent_path(), o.out).generic_string();
    std::function<void(const std::string &, const json &)> walk =
        [&](const std::string &prefix, const json &v) {
          if (v.is_object()) {
            for (const auto &[k, sub] : v.items())
              walk(prefix.empty() ? k : prefix + "." + k, sub);
          } else if (!v.is_array()) {
            csv += run + "," + r.at("command").get<std::string>() + "," +
                   prefix + "," + (v.is_string() ? v.get<std::string>() : v.dump()) +
                   "\n";
          }
        };
    walk("", r.at("metrics"));
  }
  std::ofstream out(fs::path(o.out) / "summary.csv", std::ios::binary | std::ios::trunc);
  out << csv;
  std::cout << csv;
}

int fail(int code, const std::string &kind, const std::string &message,
         const std::string &key = {}) {
  json err = {{"error", kind}, {"message", message}};
  if (!key.empty())
    err["key"] = key;
  std::cerr << err.dump() << "\n";
  return code;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Data-free quantization lab for micro vision transformers"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App *sub) {
    sub->add_option("--config", o.config_path, "INI configuration file");
    sub->add_option("--seed", o.seed, "Global seed; derives every component seed");
    sub->add_option("--out", o.out, "Output directory")->capture_default_str();
    sub->add_option("--set", o.sets, "Override any key: section.key=value");
    sub->add_flag("-v,--verbose", o.verbose, "Progress on stderr");
  };
  auto quant = [&](CLI::App *sub) {
    sub->add_option("--quant", o.quant, "Bit setting W{k}A{k}");
    sub->add_option("--quant-mode", o.quant_mode, "minmax or lsq");
  };
  auto teacher = [&](CLI::App *sub) {
    sub->add_option("--teacher", o.teacher, "Teacher checkpoint");
  };
  auto distill = [&](CLI::App *sub) {
    sub->add_option("--gamma", o.gamma, "Weight of the attention distillation term");
    sub->add_option("--metric", o.metric, "dssim, abs_ssim, mse, l1 or kl");
  };

  auto *train = app.add_subcommand("train-teacher", "Train the full-precision teacher");
  common(train);
  auto *synth = app.add_subcommand("synth", "Synthesize a calibration set");
  common(synth);
  teacher(synth);
  synth->add_option("--alpha", o.alpha, "Class loss weight");
  synth->add_option("--beta", o.beta, "Total variation weight");
  auto *dfq = app.add_subcommand("dfq", "Quantize and distill a student");
  common(dfq);
  teacher(dfq);
  quant(dfq);
  distill(dfq);
  dfq->add_option("--data", o.data, "Synthetic set directory");
  dfq->add_flag("--real", o.real, "Fine-tune on the real training split instead");
  auto *eval = app.add_subcommand("eval", "Accuracy of a model or student checkpoint");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");
  auto *corr = app.add_subcommand("corr-study", "Head quantization metric correlation");
  common(corr);
  teacher(corr);
  quant(corr);
  corr->add_option("--n", o.n, "Number of sampled configurations");
  auto *motiv = app.add_subcommand("motiv-study", "Coherency-stratified students");
  common(motiv);
  teacher(motiv);
  quant(motiv);
  distill(motiv);
  motiv->add_option("--base", o.base, "Base-synthesis pool (else synthesized)");
  motiv->add_option("--mimiq", o.mimiq, "Full-objective pool (else synthesized)");
  auto *sweep = app.add_subcommand("sweep-bits", "Weight vs activation width sweep");
  common(sweep);
  teacher(sweep);
  quant(sweep);
  distill(sweep);
  sweep->add_option("--data", o.data, "Synthetic set directory");
  auto *report = app.add_subcommand("report", "Summarize every report.json under --out");
  report->add_option("--out", o.out, "Directory to scan")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return 64;
  }
  set_verbose(o.verbose);
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    if (command == "report") {
      cmd_report(o);
      return 0;
    }
    Run run(command, o, effective_config(o, command));
    if (command == "train-teacher")
      cmd_train_teacher(run);
    else if (command == "synth")
      cmd_synth(run, o);
    else if (command == "dfq")
      cmd_dfq(run, o);
    else if (command == "eval")
      cmd_eval(run, o);
    else if (command == "corr-study")
      cmd_corr_study(run, o);
    else if (command == "motiv-study")
      cmd_motiv_study(run, o);
    else if (command == "sweep-bits")
      cmd_sweep_bits(run, o);
    run.finish();
    std::cout << (fs::path(o.out) / "report.json").string() << "\n";
    return 0;
  } catch (const ConfigError &e) {
    return fail(2, "config", e.what(), e.key());
  } catch (const CheckpointNotFound &e) {
    return fail(3, "missing_checkpoint", e.what());
  } catch (const std::exception &e) {
    return fail(1, "runtime", e.what());
  }
}
