// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and the command-line pipeline: gen, train, eval,
// gradcheck and report.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qsla/model.hpp"
#include "qsla/training.hpp"

namespace qsla::cli {

/// Process exit codes.
enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "QSLA_OUTPUT_ROOT";
inline constexpr const char* kDefaultOutputRoot = "qsla-out";

struct DatasetSection {
  std::vector<std::string> classes;  // empty means all ten
  std::vector<std::int32_t> snrs;    // empty means the full grid
  std::size_t frames_per_cell = 100;
  bool random_phase = false;
  double max_freq_offset = 0.0;
};

struct EvalSection {
  std::size_t batch_size = 256;
  std::string split = "test";            // train | val | test | all
  std::vector<int> confusion_snrs;       // per-SNR matrices besides "all"
  std::optional<int> pr_snr;             // PR curves pooled over all SNRs when unset
  bool svg = false;
};

/// Everything a command needs. The top-level seed and thread count drive
/// dataset synthesis, weight init and training alike.
struct RunConfig {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string output_root;  // empty: $QSLA_OUTPUT_ROOT, else kDefaultOutputRoot
  DatasetSection dataset;
  model::QslaConfig model;
  training::TrainConfig train;
  EvalSection eval;

  /// Throws model::ConfigError (or signal::SpecError for the dataset block).
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys at any level are a
  /// ConfigError, as are train.seed and train.threads.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  signal::DatasetSpec dataset_spec() const;
  /// The train block with the top-level seed and thread count applied.
  training::TrainConfig train_config() const;
  std::filesystem::path resolved_output_root() const;
};

/// Writes `cfg.to_json()` as run_config.json in `dir`.
void echo_config(const RunConfig& cfg, const std::filesystem::path& dir);

/// Parses argv and runs one command; returns an ExitCode. Diagnostics go to
/// `err`, results to `out`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qsla::cli
