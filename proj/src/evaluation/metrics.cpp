// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "qsla/evaluation.hpp"

namespace qsla::eval {

namespace {

void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw EvalError(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " + std::to_string(b) +
                    ")");
  }
}

void check_label(int label, std::size_t classes, const char* what) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw EvalError(std::string(what) + ": label " + std::to_string(label) + " outside [0, " +
                    std::to_string(classes) + ")");
  }
}

bool selected(std::span<const int> snrs, std::optional<int> filter, std::size_t i) {
  return !filter || snrs[i] == *filter;
}

// 1-based ranks, ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t lo = 0; lo < order.size();) {
    std::size_t hi = lo + 1;
    while (hi < order.size() && v[order[hi]] == v[order[lo]]) ++hi;
    const double r = 0.5 * static_cast<double>(lo + 1 + hi);
    for (std::size_t k = lo; k < hi; ++k) rank[order[k]] = r;
    lo = hi;
  }
  return rank;
}

}  // namespace

const SnrAccuracy* AccuracyTable::find(int snr_db) const {
  for (const auto& r : rows) {
    if (r.snr_db == snr_db) return &r;
  }
  return nullptr;
}

AccuracyTable accuracy_by_snr(std::span<const int> preds, std::span<const int> truths, std::span<const int> snrs,
                              std::span<const int> expected_snrs) {
  check_aligned(preds.size(), truths.size(), "accuracy_by_snr");
  check_aligned(preds.size(), snrs.size(), "accuracy_by_snr");
  std::map<int, SnrAccuracy> buckets;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto& b = buckets[snrs[i]];
    b.snr_db = snrs[i];
    ++b.n;
    if (preds[i] == truths[i]) ++b.correct;
  }
  AccuracyTable t;
  for (int s : std::set<int>(expected_snrs.begin(), expected_snrs.end())) {
    if (!buckets.contains(s)) t.warnings.push_back("no samples at " + std::to_string(s) + " dB; bucket omitted");
  }
  for (auto& [snr, b] : buckets) {
    b.accuracy = static_cast<double>(b.correct) / static_cast<double>(b.n);
    t.n += b.n;
    t.correct += b.correct;
    t.rows.push_back(b);
  }
  t.overall = t.n ? static_cast<double>(t.correct) / static_cast<double>(t.n) : 0.0;
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes; ++p) s += at(truth, p);
  return s;
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t s = 0;
  for (std::size_t c = 0; c < classes; ++c) s += at(c, c);
  return s;
}

std::vector<double> ConfusionMatrix::row_normalized() const {
  std::vector<double> out(counts.size(), 0.0);
  for (std::size_t t = 0; t < classes; ++t) {
    const auto sum = row_sum(t);
    if (sum == 0) continue;
    for (std::size_t p = 0; p < classes; ++p) {
      out[t * classes + p] = static_cast<double>(at(t, p)) / static_cast<double>(sum);
    }
  }
  return out;
}

std::string ConfusionMatrix::tag() const { return snr_db ? std::to_string(*snr_db) : "all"; }

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> truths, std::size_t classes,
                                 std::span<const int> snrs, std::optional<int> snr_filter) {
  check_aligned(preds.size(), truths.size(), "confusion_matrix");
  if (snr_filter) check_aligned(preds.size(), snrs.size(), "confusion_matrix");
  ConfusionMatrix cm;
  cm.classes = classes;
  cm.snr_db = snr_filter;
  cm.counts.assign(classes * classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check_label(truths[i], classes, "confusion_matrix");
    check_label(preds[i], classes, "confusion_matrix");
    if (!selected(snrs, snr_filter, i)) continue;
    ++cm.counts[static_cast<std::size_t>(truths[i]) * classes + static_cast<std::size_t>(preds[i])];
  }
  return cm;
}

PrCurve pr_curve(std::span<const double> scores, std::span<const std::uint8_t> positive, int class_id) {
  check_aligned(scores.size(), positive.size(), "pr_curve");
  for (double s : scores) {
    if (!std::isfinite(s)) throw EvalError("pr_curve: non-finite score");
  }
  PrCurve c;
  c.class_id = class_id;
  c.positives = static_cast<std::size_t>(std::count_if(positive.begin(), positive.end(), [](auto p) { return p; }));

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  const double p_total = static_cast<double>(c.positives);
  std::size_t tp = 0, fp = 0, tp_prev = 0;
  double ap = 0.0;
  for (std::size_t lo = 0; lo < order.size();) {
    const double thr = scores[order[lo]];
    std::size_t hi = lo;
    // Tied scores cross the threshold together.
    for (; hi < order.size() && scores[order[hi]] == thr; ++hi) (positive[order[hi]] ? tp : fp)++;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = c.positives ? static_cast<double>(tp) / p_total : 0.0;
    if (c.positives) ap += (static_cast<double>(tp - tp_prev) / p_total) * precision;
    c.points.push_back({thr, precision, recall});
    tp_prev = tp;
    lo = hi;
  }
  if (c.positives) c.ap = ap;
  return c;
}

PrCurve pr_curve(std::span<const double> probs, std::size_t classes, std::span<const int> truths, int c,
                 std::span<const int> snrs, std::optional<int> snr_filter) {
  check_aligned(probs.size(), truths.size() * classes, "pr_curve");
  if (snr_filter) check_aligned(truths.size(), snrs.size(), "pr_curve");
  check_label(c, classes, "pr_curve");
  std::vector<double> scores;
  std::vector<std::uint8_t> positive;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    check_label(truths[i], classes, "pr_curve");
    if (!selected(snrs, snr_filter, i)) continue;
    scores.push_back(probs[i * classes + static_cast<std::size_t>(c)]);
    positive.push_back(truths[i] == c);
  }
  return pr_curve(scores, positive, c);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  check_aligned(x.size(), y.size(), "spearman");
  const std::size_t n = x.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mean = 0.5 * static_cast<double>(n + 1);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = rx[i] - mean, dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

std::optional<double> EvalReport::mean_ap() const {
  double sum = 0.0;
  std::size_t k = 0;
  for (const auto& c : pr_curves) {
    if (c.ap) {
      sum += *c.ap;
      ++k;
    }
  }
  if (k == 0) return std::nullopt;
  return sum / static_cast<double>(k);
}

EvalReport build_report(std::span<const double> probs, std::span<const int> truths, std::span<const int> snrs,
                        std::vector<std::string> class_names, const EvalOptions& opts,
                        std::span<const int> expected_snrs) {
  const std::size_t classes = class_names.size();
  if (classes == 0) throw EvalError("build_report: no classes");
  check_aligned(probs.size(), truths.size() * classes, "build_report");
  check_aligned(truths.size(), snrs.size(), "build_report");

  std::vector<int> preds(truths.size());
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const double* row = probs.data() + i * classes;
    preds[i] = static_cast<int>(std::max_element(row, row + classes) - row);
  }

  EvalReport r;
  r.class_names = std::move(class_names);
  r.accuracy = accuracy_by_snr(preds, truths, snrs, expected_snrs);
  r.confusions.push_back(confusion_matrix(preds, truths, classes, snrs));
  for (int s : std::set<int>(opts.confusion_snrs.begin(), opts.confusion_snrs.end())) {
    r.confusions.push_back(confusion_matrix(preds, truths, classes, snrs, s));
  }
  r.pr_snr = opts.pr_snr;
  for (std::size_t c = 0; c < classes; ++c) {
    r.pr_curves.push_back(pr_curve(probs, classes, truths, static_cast<int>(c), snrs, opts.pr_snr));
  }
  return r;
}

EvalReport evaluate(model::Model<float>& m, const signal::SignalDataset& ds, std::span<const std::uint64_t> indices,
                    const EvalOptions& opts) {
  if (m.config().num_classes != ds.num_classes()) {
    throw EvalError("model has " + std::to_string(m.config().num_classes) + " classes, dataset has " +
                    std::to_string(ds.num_classes()));
  }
  std::vector<signal::IQFrame> frames;
  frames.reserve(indices.size());
  for (auto i : indices) {
    if (i >= ds.frames.size()) throw EvalError("evaluate: frame index out of range");
    frames.push_back(ds.frames[i]);
  }
  const auto preds = m.predict(frames, opts.batch_size);
  const std::size_t classes = ds.num_classes();
  std::vector<double> probs;
  probs.reserve(frames.size() * classes);
  std::vector<int> truths, snrs;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    probs.insert(probs.end(), preds[k].probs.begin(), preds[k].probs.end());
    truths.push_back(frames[k].label);
    snrs.push_back(frames[k].snr_db);
  }
  auto r = build_report(probs, truths, snrs, ds.class_names, opts, ds.snr_grid);
  r.config_fingerprint = m.config().fingerprint();
  return r;
}

}  // namespace qsla::eval
