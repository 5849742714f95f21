// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <type_traits>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qsla/cli.hpp"
#include "qsla/dataset.hpp"
#include "qsla/evaluation.hpp"
#include "qsla/gradcheck.hpp"
#include "qsla/manifest.hpp"

namespace qsla::cli {

namespace fs = std::filesystem;
using model::ConfigError;
using nlohmann::json;

namespace {

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// Flags shared by every command. A flag only overrides the config file when
// it is given on the command line.
struct Common {
  std::string config_path;
  std::vector<std::function<void(RunConfig&)>> overrides;
  bool model_classes_explicit = false;

  template <typename V, typename Apply>
  CLI::Option* flag(CLI::App* app, const std::string& name, V& var, const std::string& help, Apply apply) {
    CLI::Option* opt = nullptr;
    if constexpr (std::is_same_v<V, bool>) {
      opt = app->add_flag(name, var, help);
    } else {
      opt = app->add_option(name, var, help);
    }
    overrides.push_back([opt, &var, apply](RunConfig& c) {
      if (opt->count() > 0) apply(c, var);
    });
    return opt;
  }

  RunConfig resolve() {
    RunConfig cfg;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot read config " + config_path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError("config " + config_path + " is not valid JSON: " + e.what());
      }
      cfg = RunConfig::from_json(j);
      model_classes_explicit = j.contains("model") && j["model"].is_object() && j["model"].contains("num_classes");
    }
    for (auto& o : overrides) o(cfg);
    return cfg;
  }
};

struct CommonVars {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string output_root;
};

void add_common(CLI::App* app, Common& c, CommonVars& v) {
  app->add_option("--config", c.config_path, "JSON run config; flags given here take precedence")
      ->check(CLI::ExistingFile);
  c.flag(app, "--seed", v.seed, "Seed for synthesis, weight init and training",
         [](RunConfig& r, auto x) { r.seed = x; });
  c.flag(app, "--threads", v.threads, "Worker threads (1 is bit-reproducible)",
         [](RunConfig& r, auto x) { r.threads = x; });
  c.flag(app, "--output-root", v.output_root,
         std::string("Root for default output paths (default: $") + kOutputRootEnv + " or " + kDefaultOutputRoot + ")",
         [](RunConfig& r, const std::string& x) { r.output_root = x; });
}

std::vector<std::uint64_t> split_indices(const signal::SignalDataset& ds, const std::string& which) {
  if (which == "train") return ds.split.train;
  if (which == "val") return ds.split.val;
  if (which == "test") return ds.split.test;
  std::vector<std::uint64_t> all(ds.frames.size());
  std::iota(all.begin(), all.end(), 0);
  return all;
}

std::vector<double> read_epoch_seconds(const fs::path& timing) {
  std::vector<double> s;
  std::ifstream in(timing);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    s.push_back(json::parse(line).at("seconds").get<double>());
  }
  return s;
}

// ---- gen -------------------------------------------------------------------

struct GenArgs {
  std::string out;
};

int cmd_gen(const RunConfig& cfg, const GenArgs& a, std::ostream& out) {
  const auto spec = cfg.dataset_spec();
  spec.validate();
  const fs::path path = a.out.empty() ? cfg.resolved_output_root() / "datasets" / "dataset.sigds" : fs::path(a.out);
  const auto ds = signal::generate_dataset(spec, cfg.threads);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto crc = signal::write_dataset(path, ds);
  auto echo = path;
  echo.replace_extension(".run_config.json");
  write_json(echo, cfg.to_json());

  std::map<std::pair<int, int>, std::size_t> cells;
  for (const auto& f : ds.frames) ++cells[{f.label, f.snr_db}];
  out << "dataset " << path.string() << '\n'
      << "frames " << ds.frames.size() << " = " << ds.class_names.size() << " classes x " << ds.snr_grid.size()
      << " SNRs x " << spec.frames_per_cell << " per cell\n";
  out << std::setw(8) << "class";
  for (auto s : ds.snr_grid) out << std::setw(6) << s;
  out << '\n';
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    out << std::setw(8) << ds.class_names[c];
    for (auto s : ds.snr_grid) out << std::setw(6) << cells[{static_cast<int>(c), s}];
    out << '\n';
  }
  out << "split train " << ds.split.train.size() << " val " << ds.split.val.size() << " test "
      << ds.split.test.size() << '\n'
      << "crc32 " << hex32(crc) << '\n';
  return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string dataset;
  std::string out;
};

int cmd_train(RunConfig cfg, bool classes_explicit, const TrainArgs& a, std::ostream& out, std::ostream& err) {
  // Everything that can fail on inputs is checked before the run directory exists.
  const auto ds = signal::read_dataset(a.dataset);
  if (cfg.model.num_classes != ds.num_classes()) {
    if (classes_explicit) {
      throw ConfigError("model.num_classes is " + std::to_string(cfg.model.num_classes) + " but the dataset has " +
                        std::to_string(ds.num_classes()) + " classes");
    }
    cfg.model.num_classes = ds.num_classes();
  }
  cfg.validate();

  const fs::path dir = a.out.empty() ? cfg.resolved_output_root() / "runs" /
                                           (std::string(model::variant_name(cfg.model.variant)) + "-s" +
                                            std::to_string(cfg.seed))
                                     : fs::path(a.out);
  fs::create_directories(dir);
  echo_config(cfg, dir);

  model::Model<float> m(cfg.model);
  m.init(cfg.seed);
  training::TrainHooks hooks;
  hooks.run_dir = dir;
  hooks.on_epoch = [&](const training::EpochRecord& r) {
    out << "epoch " << std::setw(3) << r.epoch << "  train " << fixed(r.train_loss, 4) << "  val "
        << fixed(r.val_loss, 4) << "  acc " << fixed(r.val_accuracy, 4) << "  lr " << r.lr << "  "
        << fixed(r.seconds, 1) << "s\n";
    out.flush();
  };
  training::TrainResult res;
  try {
    res = training::train(m, ds, cfg.train_config(), hooks);
  } catch (const training::DivergenceError& e) {
    err << "error: training diverged: " << e.what() << "\n"
        << "diagnostics: " << (dir / "last_good.qslaw").string() << " and " << (dir / "log.jsonl").string()
        << '\n';
    return kNumericalError;
  }
  write_json(dir / "train_summary.json",
             json{{"variant", model::variant_name(cfg.model.variant)},
                  {"epochs", res.records.size()},
                  {"stop", res.stop == training::StopReason::kEarlyStop ? "early_stop" : "max_epochs"},
                  {"best_epoch", res.best_epoch},
                  {"best_val_loss", res.best_val_loss},
                  {"initial_train_loss", res.initial_train_loss}});
  out << "run " << dir.string() << '\n'
      << "stopped " << (res.stop == training::StopReason::kEarlyStop ? "early" : "at max epochs") << " after "
      << res.records.size() << " epochs; best epoch " << res.best_epoch << " val loss "
      << fixed(res.best_val_loss, 4) << '\n';
  return kOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string run;
  std::string manifest;
  std::string model_config;
  std::string dataset;
  std::string out;
};

int cmd_eval(RunConfig cfg, const EvalArgs& a, std::ostream& out) {
  if (a.run.empty() && a.manifest.empty()) throw ConfigError("eval needs --run or --manifest");
  const fs::path manifest_path = a.manifest.empty() ? fs::path(a.run) / "final.qslaw" : fs::path(a.manifest);
  const fs::path config_path = !a.model_config.empty() ? fs::path(a.model_config)
                                                       : manifest_path.parent_path() / "model.json";
  const auto ds = signal::read_dataset(a.dataset);
  const auto crc = signal::sigds_crc(signal::read_file(a.dataset));
  cfg.model = model::load_config(config_path.string());
  const auto manifest = ad::load_manifest(manifest_path);
  model::Model<float> m(cfg.model);
  m.load(manifest);

  eval::EvalOptions opts;
  opts.batch_size = cfg.eval.batch_size;
  opts.confusion_snrs = cfg.eval.confusion_snrs;
  opts.pr_snr = cfg.eval.pr_snr;
  const auto indices = split_indices(ds, cfg.eval.split);
  auto report = eval::evaluate(m, ds, indices, opts);
  report.dataset_crc = crc;
  const auto timing = manifest_path.parent_path() / "timing.jsonl";
  report.complexity = eval::complexity_report(m, fs::exists(timing) ? read_epoch_seconds(timing) : std::vector<double>{});

  const fs::path dir = !a.out.empty() ? fs::path(a.out)
                       : !a.run.empty() ? fs::path(a.run) / "eval"
                                        : cfg.resolved_output_root() / "eval";
  eval::emit_reports(report, dir, {.svg = cfg.eval.svg});
  echo_config(cfg, dir);

  out << "split " << cfg.eval.split << ": " << report.accuracy.n << " frames, overall accuracy "
      << fixed(report.accuracy.overall, 4) << '\n';
  out << std::setw(8) << "snr_db" << std::setw(8) << "n" << std::setw(10) << "accuracy" << '\n';
  for (const auto& r : report.accuracy.rows) {
    out << std::setw(8) << r.snr_db << std::setw(8) << r.n << std::setw(10) << fixed(r.accuracy, 4) << '\n';
  }
  for (const auto& w : report.accuracy.warnings) out << "warning: " << w << '\n';
  if (const auto map = report.mean_ap()) out << "mean AP " << fixed(*map, 4) << '\n';
  out << "reports " << dir.string() << '\n';
  return kOk;
}

// ---- gradcheck -------------------------------------------------------------

struct GradArgs {
  std::string scope = "layer";
  std::string variant = "qsla";
};

int cmd_gradcheck(const RunConfig& cfg, const GradArgs& a, std::ostream& out) {
  std::vector<ad::GradCheckReport> reports;
  if (a.scope == "layer") {
    reports = ad::layer_grad_suite(cfg.seed);
  } else {
    std::vector<model::Variant> variants;
    if (a.variant == "all") {
      variants = {model::Variant::kQsla, model::Variant::kOnlyBilstm, model::Variant::kOnlyAttention,
                  model::Variant::kRefCnn};
    } else {
      const auto v = model::parse_variant(a.variant);
      if (!v) throw ConfigError("unknown variant '" + a.variant + "'");
      variants = {*v};
    }
    for (auto v : variants) reports.push_back(model::model_grad_check(v, cfg.seed));
  }
  bool ok = true;
  for (const auto& r : reports) {
    const bool pass = r.passed();
    ok = ok && pass;
    std::ostringstream err;
    err << std::scientific << std::setprecision(2) << r.max_rel_error();
    out << (pass ? "PASS " : "FAIL ") << std::left << std::setw(28) << r.name << std::right << " max_err "
        << err.str() << " tol " << r.tolerance << '\n';
  }
  out << (ok ? "all " : "not all ") << reports.size() << " checks within tolerance\n";
  return ok ? kOk : kNumericalError;
}

// ---- report ----------------------------------------------------------------

struct ReportArgs {
  std::string run;
  std::string out;
};

int cmd_report(RunConfig cfg, const ReportArgs& a, std::ostream& out) {
  std::optional<model::Variant> timed;
  std::vector<double> seconds;
  if (!a.run.empty()) {
    cfg.model = model::load_config((fs::path(a.run) / "model.json").string());
    timed = cfg.model.variant;
    const auto timing = fs::path(a.run) / "timing.jsonl";
    if (fs::exists(timing)) seconds = read_epoch_seconds(timing);
  }
  cfg.model.validate();
  const fs::path dir = a.out.empty() ? cfg.resolved_output_root() / "report" : fs::path(a.out);
  fs::create_directories(dir);

  std::string csv = "variant,params,params_without_bn,manifest_bytes,median_seconds_per_epoch\n";
  out << std::left << std::setw(16) << "variant" << std::right << std::setw(10) << "params" << std::setw(12)
      << "without_bn" << std::setw(12) << "bytes" << std::setw(10) << "s/epoch" << '\n';
  for (auto v : {model::Variant::kQsla, model::Variant::kOnlyBilstm, model::Variant::kOnlyAttention,
                 model::Variant::kRefCnn}) {
    auto mc = cfg.model;
    mc.variant = v;
    model::Model<float> m(mc);
    m.init(cfg.seed);
    const auto b = eval::complexity_report(m, timed == v ? std::span<const double>(seconds) : std::span<const double>{});
    write_json(dir / ("complexity_" + b.variant + ".json"), b.to_json());
    const std::string secs = b.median_seconds_per_epoch ? fixed(*b.median_seconds_per_epoch, 3) : "";
    csv += b.variant + ',' + std::to_string(b.params) + ',' + std::to_string(b.params_without_bn) + ',' +
           std::to_string(b.manifest_bytes) + ',' + secs + '\n';
    out << std::left << std::setw(16) << b.variant << std::right << std::setw(10) << b.params << std::setw(12)
        << b.params_without_bn << std::setw(12) << b.manifest_bytes << std::setw(10) << (secs.empty() ? "-" : secs)
        << '\n';
  }
  std::ofstream(dir / "complexity.csv", std::ios::trunc) << csv;
  echo_config(cfg, dir);
  out << "reports " << dir.string() << '\n';
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const RunConfig d;
  CLI::App app{"Quad-stream BiLSTM-attention modulation classifier: dataset synthesis, training, evaluation."};
  app.name("qsla");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  Common c;
  CommonVars cv;

  auto* gen = app.add_subcommand("gen", "Synthesize a .sigds dataset and its .splits sidecar");
  GenArgs ga;
  add_common(gen, c, cv);
  std::vector<std::string> classes;
  std::vector<std::int32_t> snrs;
  std::size_t per_cell = d.dataset.frames_per_cell;
  bool full_scale = false, random_phase = false;
  double max_freq = d.dataset.max_freq_offset;
  gen->add_option("--out", ga.out, "Output .sigds path (default: <output-root>/datasets/dataset.sigds)");
  c.flag(gen, "--classes", classes, "Comma-separated class names (default: all ten)",
         [](RunConfig& r, const auto& x) { r.dataset.classes = x; })
      ->delimiter(',');
  c.flag(gen, "--snrs", snrs, "Comma-separated SNRs in dB on the -20..20 step-2 grid (default: all 21)",
         [](RunConfig& r, const auto& x) { r.dataset.snrs = x; })
      ->delimiter(',');
  c.flag(gen, "--frames-per-cell", per_cell, "Frames per (class, SNR) cell",
         [](RunConfig& r, auto x) { r.dataset.frames_per_cell = x; });
  gen->add_flag("--full-scale", full_scale, "All classes and SNRs at 2000 frames per cell (420,000 frames)");
  c.flag(gen, "--random-phase", random_phase, "Apply a random static carrier phase per frame",
         [](RunConfig& r, bool x) { r.dataset.random_phase = x; });
  c.flag(gen, "--max-freq-offset", max_freq, "Maximum static frequency offset (cycles/sample)",
         [](RunConfig& r, double x) { r.dataset.max_freq_offset = x; });

  auto* train = app.add_subcommand("train", "Train one variant on a dataset's train/val split");
  TrainArgs ta;
  std::string variant(model::variant_name(d.model.variant));
  double width = d.model.width_scale, lr = d.train.lr0;
  std::size_t max_epochs = d.train.max_epochs, batch = d.train.batch_size, es = d.train.early_stop_patience,
              plateau = d.train.plateau_patience, ckpt = d.train.checkpoint_every;
  add_common(train, c, cv);
  train->add_option("--dataset", ta.dataset, "Input .sigds (its .splits sidecar must exist)")->required();
  train->add_option("--out", ta.out, "Run directory (default: <output-root>/runs/<variant>-s<seed>)");
  c.flag(train, "--variant", variant, "qsla | only-bilstm | only-attention | refcnn",
         [](RunConfig& r, const std::string& x) {
           const auto v = model::parse_variant(x);
           if (!v) throw ConfigError("unknown variant '" + x + "'");
           r.model.variant = *v;
         });
  c.flag(train, "--width", width, "Width scale for filters and LSTM cells",
         [](RunConfig& r, double x) { r.model.width_scale = x; });
  c.flag(train, "--max-epochs", max_epochs, "Maximum epochs", [](RunConfig& r, auto x) { r.train.max_epochs = x; });
  c.flag(train, "--batch-size", batch, "Mini-batch size", [](RunConfig& r, auto x) { r.train.batch_size = x; });
  c.flag(train, "--lr", lr, "Initial learning rate", [](RunConfig& r, double x) { r.train.lr0 = x; });
  c.flag(train, "--plateau-patience", plateau, "Epochs without improvement before the learning rate drops",
         [](RunConfig& r, auto x) { r.train.plateau_patience = x; });
  c.flag(train, "--early-stop-patience", es, "Epochs without improvement before stopping",
         [](RunConfig& r, auto x) { r.train.early_stop_patience = x; });
  c.flag(train, "--checkpoint-every", ckpt, "Checkpoint period in epochs (0: best-val checkpoints only)",
         [](RunConfig& r, auto x) { r.train.checkpoint_every = x; });

  auto* ev = app.add_subcommand("eval", "Evaluate a trained manifest and write the report suite");
  EvalArgs ea;
  std::vector<int> snr_cm;
  int pr_snr = 0;
  std::string split = d.eval.split;
  std::size_t eval_batch = d.eval.batch_size;
  bool svg = d.eval.svg;
  add_common(ev, c, cv);
  ev->add_option("--run", ea.run, "Run directory holding final.qslaw and model.json");
  ev->add_option("--manifest", ea.manifest, "Weight manifest (instead of --run)");
  ev->add_option("--model-config", ea.model_config, "Model config JSON (default: model.json next to the manifest)");
  ev->add_option("--dataset", ea.dataset, "Input .sigds")->required();
  ev->add_option("--out", ea.out, "Report directory (default: <run>/eval or <output-root>/eval)");
  c.flag(ev, "--snr", snr_cm, "Also emit the confusion matrix at this SNR (repeatable)",
         [](RunConfig& r, const auto& x) { r.eval.confusion_snrs = x; })
      ->default_str("");
  c.flag(ev, "--pr-snr", pr_snr, "Restrict PR curves to one SNR (default: all SNRs pooled)",
         [](RunConfig& r, int x) { r.eval.pr_snr = x; })
      ->default_str("");
  c.flag(ev, "--split", split, "train | val | test | all", [](RunConfig& r, const std::string& x) { r.eval.split = x; });
  c.flag(ev, "--batch-size", eval_batch, "Inference batch size",
         [](RunConfig& r, auto x) { r.eval.batch_size = x; });
  c.flag(ev, "--svg", svg, "Also write SVG plots", [](RunConfig& r, bool x) { r.eval.svg = x; });

  auto* gc = app.add_subcommand("gradcheck", "Run the 64-bit finite-difference gradient checks");
  GradArgs gca;
  add_common(gc, c, cv);
  gc->add_option("--scope", gca.scope, "layer: every layer op; model: reduced-width end-to-end network")
      ->check(CLI::IsMember({"layer", "model"}));
  gc->add_option("--variant", gca.variant, "Variant for --scope model, or 'all'");

  auto* rep = app.add_subcommand("report", "Write the complexity comparison for all variants");
  ReportArgs ra;
  add_common(rep, c, cv);
  rep->add_option("--run", ra.run, "Run directory whose model config and epoch timing to use");
  rep->add_option("--out", ra.out, "Report directory (default: <output-root>/report)");
  c.flag(rep, "--width", width, "Width scale", [](RunConfig& r, double x) { r.model.width_scale = x; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help requests print the active command's help and succeed.
    return app.exit(e, out, err) == 0 ? kOk : kConfigError;
  }

  try {
    RunConfig cfg = c.resolve();
    if (*gen && full_scale) {
      cfg.dataset.classes.clear();
      cfg.dataset.snrs.clear();
      cfg.dataset.frames_per_cell = 2000;
    }
    if (*gen) {
      cfg.validate();
      return cmd_gen(cfg, ga, out);
    }
    if (*train) return cmd_train(cfg, c.model_classes_explicit, ta, out, err);
    if (*ev) {
      cfg.validate();
      return cmd_eval(cfg, ea, out);
    }
    if (*gc) return cmd_gradcheck(cfg, gca, out);
    if (*rep) return cmd_report(cfg, ra, out);
  } catch (const training::NumericalError& e) {
    err << "error: numerical failure: " << e.what() << '\n';
    return kNumericalError;
  } catch (const signal::FormatError& e) {
    err << "error: data: " << e.what() << '\n';
    return kDataError;
  } catch (const ad::ManifestError& e) {
    err << "error: manifest: " << e.what() << '\n';
    return kDataError;
  } catch (const std::invalid_argument& e) {
    err << "error: config: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kConfigError;
}

}  // namespace qsla::cli
