// SPDX-License-Identifier: Apache-2.0
//
// Metrics over predictions: accuracy by SNR, confusion matrices, one-vs-rest
// PR curves with step-wise average precision, complexity accounting, and the
// report files that carry them.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qsla/dataset.hpp"
#include "qsla/model.hpp"

namespace qsla::eval {

/// Empty or misaligned inputs, labels out of range, non-finite scores.
class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SnrAccuracy {
  int snr_db = 0;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct AccuracyTable {
  std::vector<SnrAccuracy> rows;  // ascending SNR, one per nonempty bucket
  std::size_t n = 0;
  std::size_t correct = 0;
  double overall = 0.0;
  std::vector<std::string> warnings;  // one per omitted empty bucket

  const SnrAccuracy* find(int snr_db) const;
};

/// Buckets come from the observed SNRs plus `expected_snrs`; an expected SNR
/// without samples is omitted and reported in `warnings`.
AccuracyTable accuracy_by_snr(std::span<const int> preds, std::span<const int> truths, std::span<const int> snrs,
                              std::span<const int> expected_snrs = {});

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::optional<int> snr_db;           // nullopt means all SNRs
  std::vector<std::uint64_t> counts;   // row-major, rows = true, cols = predicted

  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
  std::uint64_t row_sum(std::size_t truth) const;
  std::uint64_t total() const;
  std::uint64_t trace() const;
  /// Rows divided by their sums; empty rows stay all zero.
  std::vector<double> row_normalized() const;
  std::string tag() const;  // "all" or the SNR in dB
};

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> truths, std::size_t classes,
                                 std::span<const int> snrs = {}, std::optional<int> snr_filter = std::nullopt);

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct PrCurve {
  int class_id = 0;
  std::size_t positives = 0;
  std::vector<PrPoint> points;  // one per distinct score, thresholds descending
  std::optional<double> ap;     // nullopt when the class has no positives
};

/// One-vs-rest curve: a sample is predicted positive when its score is at or
/// above the threshold. AP = sum over thresholds of (R_n - R_{n-1}) * P_n.
PrCurve pr_curve(std::span<const double> scores, std::span<const std::uint8_t> positive, int class_id = 0);

/// Curve for class `c` from row-major [N x C] probabilities.
PrCurve pr_curve(std::span<const double> probs, std::size_t classes, std::span<const int> truths, int c,
                 std::span<const int> snrs = {}, std::optional<int> snr_filter = std::nullopt);

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant or fewer than two pairs are given.
double spearman(std::span<const double> x, std::span<const double> y);

struct ComplexityBlock {
  std::string variant;
  std::size_t params = 0;
  std::size_t params_without_bn = 0;
  std::size_t manifest_bytes = 0;
  std::optional<double> median_seconds_per_epoch;
  std::size_t epochs_timed = 0;
  bool full_size = false;  // width 1, 128-sample frames, 10 classes
  /// For a full-size model of a published variant, to_json adds the
  /// published memory (kB), parameters (k) and s/epoch as annotations.
  nlohmann::json to_json() const;
};

ComplexityBlock complexity_report(const model::Model<float>& m, std::span<const double> epoch_seconds = {});

struct EvalReport {
  std::vector<std::string> class_names;
  AccuracyTable accuracy;
  std::vector<ConfusionMatrix> confusions;  // "all" first, then requested SNRs ascending
  std::vector<PrCurve> pr_curves;           // one per class
  std::optional<int> pr_snr;                // nullopt when pooled over all SNRs
  std::optional<ComplexityBlock> complexity;
  std::uint64_t config_fingerprint = 0;
  std::uint32_t dataset_crc = 0;

  /// Mean AP over classes with positives; nullopt if none.
  std::optional<double> mean_ap() const;
};

struct EvalOptions {
  std::size_t batch_size = 256;
  std::vector<int> confusion_snrs;  // extra per-SNR matrices
  std::optional<int> pr_snr;        // restrict PR curves to one SNR
};

/// Eval-mode predictions of `m` over `indices` turned into a full report.
EvalReport evaluate(model::Model<float>& m, const signal::SignalDataset& ds, std::span<const std::uint64_t> indices,
                    const EvalOptions& opts = {});

/// Same report from precomputed probabilities ([N x C], row-major).
EvalReport build_report(std::span<const double> probs, std::span<const int> truths, std::span<const int> snrs,
                        std::vector<std::string> class_names, const EvalOptions& opts = {},
                        std::span<const int> expected_snrs = {});

struct EmitOptions {
  bool svg = false;
};

/// accuracy_by_snr.csv, pr_<class>.csv, confusion_<tag>.json, complexity.json
/// (when present), summary.json and, on request, SVG plots. Returns the
/// written paths in order. Throws std::runtime_error on IO failure.
std::vector<std::filesystem::path> emit_reports(const EvalReport& report, const std::filesystem::path& dir,
                                                const EmitOptions& opts = {});

/// File-name-safe form of a class name.
std::string file_stem(const std::string& class_name);

}  // namespace qsla::eval
