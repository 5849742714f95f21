// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "qsla/cli.hpp"
#include "qsla/dataset.hpp"

namespace qsla::cli {

using model::ConfigError;
using nlohmann::json;

namespace {

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
}

void reject_unknown(const json& j, const std::string& where, const std::set<std::string>& known) {
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown key '" + where + key + "'");
  }
}

template <typename T>
T get(const json& j, const std::string& key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + where + key + "'");
  }
}

std::uint64_t get_count(const json& j, const std::string& key, const std::string& where) {
  if (!j.at(key).is_number_unsigned()) throw ConfigError("'" + where + key + "' must be a non-negative integer");
  return j.at(key).get<std::uint64_t>();
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train_config().validate();
  dataset_spec().validate();
  if (threads == 0) throw ConfigError("threads must be at least 1");
  if (eval.batch_size == 0) throw ConfigError("eval.batch_size must be positive");
  static const std::set<std::string> kSplits{"train", "val", "test", "all"};
  if (!kSplits.contains(eval.split)) throw ConfigError("eval.split must be train, val, test or all");
}

json RunConfig::to_json() const {
  json t = train.to_json();
  t.erase("seed");
  t.erase("threads");
  json e{{"batch_size", eval.batch_size},
         {"split", eval.split},
         {"confusion_snrs", eval.confusion_snrs},
         {"pr_snr", eval.pr_snr ? json(*eval.pr_snr) : json(nullptr)},
         {"svg", eval.svg}};
  json d{{"classes", dataset.classes},
         {"snrs", dataset.snrs},
         {"frames_per_cell", dataset.frames_per_cell},
         {"random_phase", dataset.random_phase},
         {"max_freq_offset", dataset.max_freq_offset}};
  return json{{"seed", seed},   {"threads", threads}, {"output_root", output_root},
              {"dataset", d},   {"model", model.to_json()}, {"train", t},
              {"eval", e}};
}

RunConfig RunConfig::from_json(const json& j) {
  require_object(j, "run config");
  reject_unknown(j, "", {"seed", "threads", "output_root", "dataset", "model", "train", "eval"});
  RunConfig c;
  if (j.contains("seed")) c.seed = get_count(j, "seed", "");
  if (j.contains("threads")) c.threads = static_cast<unsigned>(get_count(j, "threads", ""));
  if (j.contains("output_root")) c.output_root = get<std::string>(j, "output_root", "");

  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    require_object(d, "dataset");
    reject_unknown(d, "dataset.", {"classes", "snrs", "frames_per_cell", "random_phase", "max_freq_offset"});
    if (d.contains("classes")) c.dataset.classes = get<std::vector<std::string>>(d, "classes", "dataset.");
    if (d.contains("snrs")) c.dataset.snrs = get<std::vector<std::int32_t>>(d, "snrs", "dataset.");
    if (d.contains("frames_per_cell")) c.dataset.frames_per_cell = get_count(d, "frames_per_cell", "dataset.");
    if (d.contains("random_phase")) c.dataset.random_phase = get<bool>(d, "random_phase", "dataset.");
    if (d.contains("max_freq_offset")) c.dataset.max_freq_offset = get<double>(d, "max_freq_offset", "dataset.");
  }
  if (j.contains("model")) c.model = model::QslaConfig::from_json(j["model"]);
  if (j.contains("train")) {
    const auto& t = j["train"];
    require_object(t, "train");
    for (const char* k : {"seed", "threads"}) {
      if (t.contains(k)) throw ConfigError(std::string("train.") + k + " is set at the top level");
    }
    c.train = training::TrainConfig::from_json(t);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    require_object(e, "eval");
    reject_unknown(e, "eval.", {"batch_size", "split", "confusion_snrs", "pr_snr", "svg"});
    if (e.contains("batch_size")) c.eval.batch_size = get_count(e, "batch_size", "eval.");
    if (e.contains("split")) c.eval.split = get<std::string>(e, "split", "eval.");
    if (e.contains("confusion_snrs")) c.eval.confusion_snrs = get<std::vector<int>>(e, "confusion_snrs", "eval.");
    if (e.contains("pr_snr") && !e["pr_snr"].is_null()) c.eval.pr_snr = get<int>(e, "pr_snr", "eval.");
    if (e.contains("svg")) c.eval.svg = get<bool>(e, "svg", "eval.");
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

signal::DatasetSpec RunConfig::dataset_spec() const {
  signal::DatasetSpec s;
  if (dataset.classes.empty()) {
    s = signal::DatasetSpec::full_scale(seed);
  } else {
    s = signal::DatasetSpec::from_names(dataset.classes, {}, 0, seed);
  }
  s.snrs = dataset.snrs.empty() ? std::vector<std::int32_t>(signal::kSnrGrid.begin(), signal::kSnrGrid.end())
                                : dataset.snrs;
  s.frames_per_cell = dataset.frames_per_cell;
  s.seed = seed;
  s.synthesis.channel.random_phase = dataset.random_phase;
  s.synthesis.channel.max_freq_offset = dataset.max_freq_offset;
  return s;
}

training::TrainConfig RunConfig::train_config() const {
  auto t = train;
  t.seed = seed;
  t.threads = threads;
  return t;
}

std::filesystem::path RunConfig::resolved_output_root() const {
  if (!output_root.empty()) return output_root;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return kDefaultOutputRoot;
}

void echo_config(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "run_config.json", std::ios::trunc);
  out << cfg.to_json().dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "run_config.json").string());
}

}  // namespace qsla::cli
