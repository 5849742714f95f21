// SPDX-License-Identifier: Apache-2.0
//
// Optimizer, learning-rate schedule, early stopping and the epoch loop.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qsla/dataset.hpp"
#include "qsla/manifest.hpp"
#include "qsla/model.hpp"

namespace qsla::training {

/// Non-finite gradient, loss or parameter.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr0 = 1e-3;
  double plateau_factor = 0.4;
  std::size_t plateau_patience = 8;
  double plateau_threshold = 1e-4;  // absolute val-loss improvement that counts
  std::size_t max_epochs = 100;
  std::size_t batch_size = 1024;
  std::size_t early_stop_patience = 15;
  double min_lr = 1e-6;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::size_t checkpoint_every = 10;  // 0 writes only best-val checkpoints

  void validate() const;  // throws model::ConfigError
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Stratified 8:1:1 split of a dataset's frames by (label, snr).
signal::Split split_dataset(const signal::SignalDataset& ds, std::uint64_t seed);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update from the parameters' gradient buffers
/// (a parameter without a gradient counts as zero gradient). Throws
/// NumericalError naming the first parameter with a non-finite gradient,
/// before anything is modified.
template <typename T>
void adam_step(std::span<model::Param<T>> params, AdamState<T>& state, double lr, const AdamOptions& opts = {});

struct PlateauState {
  double lr = 1e-3;
  double best = std::numeric_limits<double>::infinity();
  std::size_t wait = 0;
};

/// Feeds one epoch's validation loss; returns the learning rate for the next
/// epoch. After `plateau_patience` epochs without an improvement larger than
/// `plateau_threshold`, lr becomes max(lr * factor, min_lr) and the wait
/// restarts.
double lr_on_plateau(PlateauState& state, double val_loss, const TrainConfig& cfg);

struct EarlyStopState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t wait = 0;
};

/// Feeds the validation loss of `epoch`; true means stop now.
bool early_stop_check(EarlyStopState& state, std::size_t epoch, double val_loss, std::size_t patience,
                      double threshold = 1e-4);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
  double seconds = 0.0;  // wall clock, kept out of the deterministic log

  /// Everything except `seconds`.
  nlohmann::json to_json() const;
  bool same_values(const EpochRecord& o) const;
};

enum class StopReason { kMaxEpochs, kEarlyStop };

struct TrainResult {
  std::vector<EpochRecord> records;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  StopReason stop = StopReason::kMaxEpochs;
  double initial_train_loss = 0.0;  // first mini-batch, before any update
  ad::WeightManifest final_manifest;
};

struct TrainHooks {
  /// When set: <run>/log.jsonl, <run>/timing.jsonl, <run>/<epoch>.qslaw,
  /// <run>/final.qslaw and <run>/model.json.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Mean loss (data + penalty) and accuracy of `indices` in eval mode.
struct EvalStats {
  double loss = 0.0;
  double accuracy = 0.0;
};
EvalStats evaluate_split(model::Model<float>& m, const signal::SignalDataset& ds,
                         std::span<const std::uint64_t> indices, std::size_t batch_size);

/// Runs the full recipe on ds.split. The model ends holding the best-epoch
/// weights. A non-finite loss or gradient throws DivergenceError after the
/// best weights so far are loaded and written to <run>/last_good.qslaw.
TrainResult train(model::Model<float>& m, const signal::SignalDataset& ds, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

}  // namespace qsla::training
