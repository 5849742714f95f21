// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qsla/evaluation.hpp"
#include "support/oracles.hpp"

namespace qsla::eval {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("qsla_eval_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

TEST(Accuracy, AllCorrectIsOneAtEverySnr) {
  const std::vector<int> truth{0, 1, 2, 0, 1, 2}, snr{-4, -4, 0, 0, 8, 8};
  const auto t = accuracy_by_snr(truth, truth, snr);
  ASSERT_EQ(t.rows.size(), 3u);
  for (const auto& r : t.rows) EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(t.overall, 1.0);
}

TEST(Accuracy, AlternatingCorrectIsHalf) {
  std::vector<int> truth, pred, snr;
  for (int i = 0; i < 100; ++i) {
    truth.push_back(i % 3);
    pred.push_back(i % 2 ? truth.back() : (truth.back() + 1) % 3);
    snr.push_back(6);
  }
  const auto t = accuracy_by_snr(pred, truth, snr);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0].accuracy, 0.5);
  EXPECT_EQ(t.rows[0].n, 100u);
}

TEST(Accuracy, RandomTenClassPredictorNearTenPercent) {
  std::mt19937_64 gen(7);
  std::uniform_int_distribution<int> cls(0, 9), snr_pick(0, 20);
  std::vector<int> truth, pred, snr;
  for (int i = 0; i < 10000; ++i) {
    truth.push_back(cls(gen));
    pred.push_back(cls(gen));
    snr.push_back(-20 + 2 * snr_pick(gen));
  }
  const auto t = accuracy_by_snr(pred, truth, snr);
  EXPECT_NEAR(t.overall, 0.10, 0.02);
  EXPECT_EQ(t.rows.size(), 21u);
}

TEST(Accuracy, EmptyExpectedBucketIsOmittedWithWarning) {
  const std::vector<int> truth{0, 1}, snr{0, 10};
  const std::vector<int> grid{0, 4, 10};
  const auto t = accuracy_by_snr(truth, truth, snr, grid);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.find(4), nullptr);
  ASSERT_EQ(t.warnings.size(), 1u);
  EXPECT_NE(t.warnings[0].find("4 dB"), std::string::npos);
}

TEST(Accuracy, MisalignedInputsThrow) {
  const std::vector<int> a{0, 1}, b{0};
  EXPECT_THROW(accuracy_by_snr(a, b, a), EvalError);
}

TEST(Confusion, PerfectPredictorNormalizesToIdentity) {
  const std::vector<int> truth{0, 1, 2, 2, 1, 0, 3};
  const auto cm = confusion_matrix(truth, truth, 4);
  const auto n = cm.row_normalized();
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t p = 0; p < 4; ++p) EXPECT_EQ(n[t * 4 + p], t == p ? 1.0 : 0.0);
  }
  EXPECT_EQ(cm.tag(), "all");
}

TEST(Confusion, ConstantPredictorFillsOneColumn) {
  const std::vector<int> truth{0, 1, 2, 2, 1, 0};
  const std::vector<int> pred(truth.size(), 2);
  const auto cm = confusion_matrix(pred, truth, 3);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(cm.at(t, 0), 0u);
    EXPECT_EQ(cm.at(t, 1), 0u);
    EXPECT_EQ(cm.at(t, 2), 2u);
  }
}

TEST(Confusion, RowsSumToOneAndCountsMatchTruthAndAccuracyIsTraceRatio) {
  std::mt19937_64 gen(11);
  std::uniform_int_distribution<int> cls(0, 4), snr_pick(0, 3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> truth, pred, snr;
    const int n = 50 + trial * 13;
    for (int i = 0; i < n; ++i) {
      truth.push_back(cls(gen) % (trial % 5 + 1));  // some trials leave classes empty
      pred.push_back(cls(gen));
      snr.push_back(6 * snr_pick(gen));
    }
    const auto table = accuracy_by_snr(pred, truth, snr);
    for (std::optional<int> filter : {std::optional<int>{}, std::optional<int>{0}, std::optional<int>{12}}) {
      const auto cm = confusion_matrix(pred, truth, 5, snr, filter);
      const auto norm = cm.row_normalized();
      for (std::size_t t = 0; t < 5; ++t) {
        std::uint64_t expected = 0;
        for (int i = 0; i < n; ++i) expected += truth[i] == static_cast<int>(t) && (!filter || snr[i] == *filter);
        EXPECT_EQ(cm.row_sum(t), expected);
        if (expected == 0) continue;
        double s = 0.0;
        for (std::size_t p = 0; p < 5; ++p) s += norm[t * 5 + p];
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
      const double acc = static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
      if (!filter) {
        EXPECT_EQ(acc, table.overall);
      } else if (const auto* row = table.find(*filter)) {
        EXPECT_EQ(acc, row->accuracy);
      }
    }
  }
}

TEST(Confusion, LabelOutOfRangeThrows) {
  const std::vector<int> truth{0, 3}, pred{0, 1};
  EXPECT_THROW(confusion_matrix(pred, truth, 3), EvalError);
}

TEST(AveragePrecision, HandComputedStepIntegral) {
  const std::vector<double> s{0.9, 0.8, 0.7};
  const std::vector<std::uint8_t> y{1, 0, 1};
  const auto c = pr_curve(s, y);
  ASSERT_TRUE(c.ap);
  EXPECT_NEAR(*c.ap, 1.0 * 0.5 + (2.0 / 3.0) * 0.5, 1e-12);
  EXPECT_NEAR(*c.ap, 0.8333, 1e-4);
  ASSERT_EQ(c.points.size(), 3u);
  EXPECT_EQ(c.points[1].precision, 0.5);
  EXPECT_EQ(c.points[2].recall, 1.0);
}

TEST(AveragePrecision, PerfectRankingIsOne) {
  const std::vector<double> s{0.1, 0.95, 0.3, 0.8, 0.2};
  const std::vector<std::uint8_t> y{0, 1, 0, 1, 0};
  EXPECT_EQ(*pr_curve(s, y).ap, 1.0);
}

TEST(AveragePrecision, SinglePositiveRankedLastAmongNineNegatives) {
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (int i = 0; i < 9; ++i) {
    s.push_back(0.9 - 0.05 * i);
    y.push_back(0);
  }
  s.push_back(-1.0);
  y.push_back(1);
  EXPECT_NEAR(*pr_curve(s, y).ap, 0.1, 1e-12);
}

TEST(AveragePrecision, AbsentClassIsNotApplicable) {
  const std::vector<double> s{0.2, 0.4};
  const std::vector<std::uint8_t> y{0, 0};
  const auto c = pr_curve(s, y);
  EXPECT_FALSE(c.ap);
  EXPECT_EQ(c.positives, 0u);
}

TEST(AveragePrecision, NonFiniteScoreThrows) {
  const std::vector<double> s{0.2, std::nan("")};
  const std::vector<std::uint8_t> y{0, 1};
  EXPECT_THROW(pr_curve(s, y), EvalError);
}

TEST(AveragePrecision, MatchesBruteForceExhaustivelyUpToTwelveSamples) {
  std::mt19937_64 gen(3);
  std::size_t cases = 0;
  for (std::size_t n = 1; n <= 12; ++n) {
    // Distinct scores, heavy ties, and random scores drawn from a small set.
    std::vector<std::vector<double>> score_sets(3, std::vector<double>(n));
    std::uniform_int_distribution<int> level(0, 4);
    for (std::size_t i = 0; i < n; ++i) {
      score_sets[0][i] = 1.0 - static_cast<double>((i * 13) % n) / static_cast<double>(n);
      score_sets[1][i] = static_cast<double>(i % 3) / 3.0;
      score_sets[2][i] = static_cast<double>(level(gen)) / 4.0;
    }
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      std::vector<std::uint8_t> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = (mask >> i) & 1u;
      for (const auto& s : score_sets) {
        const auto got = pr_curve(s, y);
        const auto want = oracle::average_precision(s, y);
        ASSERT_EQ(got.ap.has_value(), want.has_value());
        if (want) {
          ASSERT_EQ(*got.ap, *want) << "n=" << n << " mask=" << mask;
        }
        ++cases;
      }
    }
  }
  EXPECT_EQ(cases, 3u * ((1u << 13) - 2));
}

TEST(AveragePrecision, CurveInvariantsHold) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 40;
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(u(gen) * 8) / 8;
      y[i] = u(gen) < 0.3;
    }
    const auto c = pr_curve(s, y);
    for (std::size_t k = 0; k < c.points.size(); ++k) {
      EXPECT_GE(c.points[k].precision, 0.0);
      EXPECT_LE(c.points[k].precision, 1.0);
      if (k) {
        EXPECT_GE(c.points[k].recall, c.points[k - 1].recall);
        EXPECT_LT(c.points[k].threshold, c.points[k - 1].threshold);
      }
    }
    if (c.ap) {
      EXPECT_GE(*c.ap, 0.0);
      EXPECT_LE(*c.ap, 1.0 + 1e-12);
    }
  }
}

TEST(AveragePrecision, InvariantUnderStrictlyMonotoneTransform) {
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 5 + trial % 30;
    std::vector<double> s(n), t(n), v(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(u(gen) * 10) / 10;
      t[i] = std::exp(3.0 * s[i]) - 7.0;
      v[i] = -1.0 / (s[i] + 1.0);
      y[i] = u(gen) < 0.5;
    }
    const auto a = pr_curve(s, y).ap, b = pr_curve(t, y).ap, c = pr_curve(v, y).ap;
    ASSERT_EQ(a.has_value(), b.has_value());
    if (a) {
      EXPECT_EQ(*a, *b);
      EXPECT_EQ(*a, *c);
    }
  }
}

TEST(AveragePrecision, TiedItemsAreOrderIndependent) {
  const std::vector<double> s{0.5, 0.5, 0.5, 0.2, 0.9};
  std::vector<std::uint8_t> y{1, 0, 0, 1, 0};
  std::vector<std::size_t> perm{0, 1, 2, 3, 4};
  const double ref = *pr_curve(s, y).ap;
  do {
    std::vector<double> ps;
    std::vector<std::uint8_t> py;
    for (auto i : perm) {
      ps.push_back(s[i]);
      py.push_back(y[i]);
    }
    EXPECT_EQ(*pr_curve(ps, py).ap, ref);
  } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST(AveragePrecision, ProbabilityMatrixFormSelectsClassAndSnr) {
  // Rows: [p0, p1]; class 1 scores are the second column.
  const std::vector<double> probs{0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7};
  const std::vector<int> truth{0, 1, 1, 0}, snr{0, 0, 10, 10};
  const auto all = pr_curve(probs, 2, truth, 1);
  EXPECT_EQ(all.positives, 2u);
  EXPECT_EQ(*all.ap, *oracle::average_precision({0.1, 0.8, 0.4, 0.7}, {0, 1, 1, 0}));
  const auto at10 = pr_curve(probs, 2, truth, 1, snr, 10);
  EXPECT_EQ(at10.positives, 1u);
  EXPECT_EQ(*at10.ap, *oracle::average_precision({0.4, 0.7}, {1, 0}));
}

TEST(Spearman, MonotoneAndTiedCases) {
  const std::vector<double> x{-6, 0, 6, 12, 18};
  EXPECT_NEAR(spearman(x, std::vector<double>{0.2, 0.4, 0.7, 0.9, 0.95}), 1.0, 1e-15);
  EXPECT_NEAR(spearman(x, std::vector<double>{0.9, 0.8, 0.5, 0.3, 0.1}), -1.0, 1e-15);
  // y ranks 1.5, 1.5, 3, 4 against 1..4: 4.5 / sqrt(5 * 4.5).
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 1, 2, 3}), 4.5 / std::sqrt(22.5),
              1e-15);
  EXPECT_TRUE(std::isnan(spearman(x, std::vector<double>(5, 0.5))));
}

TEST(Complexity, PublishedWindowsOrderingAndMemory) {
  std::vector<ComplexityBlock> blocks;
  for (auto v : {model::Variant::kOnlyAttention, model::Variant::kQsla, model::Variant::kOnlyBilstm}) {
    model::QslaConfig cfg;
    cfg.variant = v;
    model::Model<float> m(cfg);
    m.init(1);
    blocks.push_back(complexity_report(m));
    const auto& b = blocks.back();
    EXPECT_NEAR(static_cast<double>(b.manifest_bytes), 4.0 * static_cast<double>(b.params), 0.1 * 4.0 * b.params);
    EXPECT_LT(b.params_without_bn, b.params);
    EXPECT_TRUE(b.to_json().contains("reference"));
  }
  EXPECT_GE(blocks[1].params, 584000u);
  EXPECT_LE(blocks[1].params, 646000u);
  EXPECT_LT(blocks[0].params, blocks[1].params);
  EXPECT_LT(blocks[1].params, blocks[2].params);
  EXPECT_LT(blocks[0].manifest_bytes, blocks[1].manifest_bytes);
  EXPECT_LT(blocks[1].manifest_bytes, blocks[2].manifest_bytes);
}

TEST(Complexity, MedianEpochTimeAndReducedWidthHasNoReference) {
  model::QslaConfig cfg;
  cfg.width_scale = 0.25;
  model::Model<float> m(cfg);
  m.init(2);
  const std::vector<double> secs{3.0, 1.0, 2.0, 10.0};
  const auto b = complexity_report(m, secs);
  EXPECT_EQ(*b.median_seconds_per_epoch, 2.5);
  EXPECT_EQ(b.epochs_timed, 4u);
  EXPECT_FALSE(b.to_json().contains("reference"));
  EXPECT_TRUE(b.to_json()["median_seconds_per_epoch"].is_number());
  EXPECT_TRUE(complexity_report(m).to_json()["median_seconds_per_epoch"].is_null());
}

EvalReport sample_report() {
  std::mt19937_64 gen(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> probs;
  std::vector<int> truth, snr;
  for (int i = 0; i < 120; ++i) {
    truth.push_back(i % 3);
    snr.push_back(-4 + 4 * (i % 4));
    double row[3] = {u(gen), u(gen), u(gen)};
    row[truth.back()] += 0.1 * (snr.back() + 4);
    const double s = row[0] + row[1] + row[2];
    for (double v : row) probs.push_back(v / s);
  }
  EvalOptions opts;
  opts.confusion_snrs = {4};
  auto r = build_report(probs, truth, snr, {"BPSK", "QPSK", "AM-DSB"}, opts);
  model::QslaConfig cfg;
  cfg.width_scale = 0.125;
  cfg.num_classes = 3;
  model::Model<float> m(cfg);
  m.init(0);
  r.complexity = complexity_report(m, std::vector<double>{1.5});
  r.config_fingerprint = cfg.fingerprint();
  r.dataset_crc = 0xDEADBEEF;
  return r;
}

TEST(Emit, SchemaAndConsistency) {
  const auto r = sample_report();
  const auto dir = temp_dir("schema");
  const auto files = emit_reports(r, dir, {.svg = true});
  EXPECT_FALSE(files.empty());

  std::istringstream acc(slurp(dir / "accuracy_by_snr.csv"));
  std::string line;
  std::getline(acc, line);
  EXPECT_EQ(line, "snr_db,n,accuracy");
  std::set<int> seen;
  while (std::getline(acc, line)) {
    const int s = std::stoi(line.substr(0, line.find(',')));
    EXPECT_TRUE(seen.insert(s).second);
  }
  EXPECT_EQ(seen, (std::set<int>{-4, 0, 4, 8}));

  for (const char* stem : {"BPSK", "QPSK", "AM-DSB"}) {
    const auto text = slurp(dir / (std::string("pr_") + stem + ".csv"));
    EXPECT_EQ(text.rfind("threshold,precision,recall\n", 0), 0u);
  }

  for (const char* tag : {"all", "4"}) {
    const auto j = nlohmann::json::parse(slurp(dir / (std::string("confusion_") + tag + ".json")));
    for (int t = 0; t < 3; ++t) {
      std::uint64_t expected = 0;
      for (int i = 0; i < 120; ++i) expected += i % 3 == t && (std::string(tag) == "all" || -4 + 4 * (i % 4) == 4);
      std::uint64_t sum = 0;
      for (const auto& v : j["counts"][t]) sum += v.get<std::uint64_t>();
      EXPECT_EQ(sum, expected);
      EXPECT_EQ(j["row_sums"][t].get<std::uint64_t>(), expected);
    }
  }
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "confusion_4.json"))["snr_db"], 4);

  const auto cx = nlohmann::json::parse(slurp(dir / "complexity.json"));
  EXPECT_EQ(cx["variant"], "qsla");
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(summary["dataset_crc32"], "deadbeef");
  EXPECT_EQ(summary["overall_accuracy"].get<double>(), r.accuracy.overall);
  EXPECT_TRUE(fs::exists(dir / "accuracy_by_snr.svg"));
  EXPECT_TRUE(fs::exists(dir / "pr_curves.svg"));
  EXPECT_TRUE(fs::exists(dir / "confusion_all.svg"));
}

TEST(Emit, RerunIsByteIdentical) {
  const auto r = sample_report();
  const auto a = temp_dir("rerun_a"), b = temp_dir("rerun_b");
  const auto fa = emit_reports(r, a, {.svg = true});
  const auto fb = emit_reports(r, b, {.svg = true});
  ASSERT_EQ(fa.size(), fb.size());
  for (std::size_t k = 0; k < fa.size(); ++k) {
    EXPECT_EQ(fa[k].filename(), fb[k].filename());
    EXPECT_EQ(slurp(fa[k]), slurp(fb[k])) << fa[k];
  }
}

TEST(Emit, AbsentClassReportsNotApplicable) {
  const std::vector<double> probs{0.7, 0.3, 0.6, 0.4};
  const std::vector<int> truth{0, 0}, snr{0, 0};
  const auto r = build_report(probs, truth, snr, {"A", "B"});
  EXPECT_FALSE(r.pr_curves[1].ap);
  const auto dir = temp_dir("absent");
  emit_reports(r, dir);
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(summary["average_precision"]["B"], "n/a");
  EXPECT_EQ(summary["mean_average_precision"].get<double>(), *r.pr_curves[0].ap);
}

TEST(Emit, UnwritableDirectoryThrows) {
  const auto blocker = temp_dir("blocker");
  std::ofstream(blocker) << "x";
  EXPECT_THROW(emit_reports(sample_report(), blocker / "sub"), std::runtime_error);
  fs::remove(blocker);
}

TEST(Evaluate, ModelReportCoversEveryTestSnrOnce) {
  signal::DatasetSpec spec = signal::DatasetSpec::from_names({"BPSK", "QAM16"}, {0, 10}, 20, 21);
  auto ds = signal::generate_dataset(spec, 1);
  model::QslaConfig cfg;
  cfg.width_scale = 1.0 / 16.0;
  cfg.num_classes = 2;
  model::Model<float> m(cfg);
  m.init(4);
  EvalOptions opts;
  opts.confusion_snrs = {10};
  const auto r = evaluate(m, ds, ds.split.test, opts);
  std::set<int> test_snrs;
  for (auto i : ds.split.test) test_snrs.insert(ds.frames[i].snr_db);
  ASSERT_EQ(r.accuracy.rows.size(), test_snrs.size());
  for (int s : test_snrs) EXPECT_NE(r.accuracy.find(s), nullptr);
  EXPECT_EQ(r.accuracy.n, ds.split.test.size());
  EXPECT_EQ(r.confusions.size(), 2u);
  EXPECT_EQ(r.confusions[0].total(), ds.split.test.size());
  EXPECT_EQ(r.config_fingerprint, cfg.fingerprint());
  const auto again = evaluate(m, ds, ds.split.test, opts);
  EXPECT_EQ(again.accuracy.overall, r.accuracy.overall);
  EXPECT_EQ(*again.pr_curves[0].ap, *r.pr_curves[0].ap);
}

TEST(Evaluate, ClassCountMismatchThrows) {
  auto ds = signal::generate_dataset(signal::DatasetSpec::from_names({"BPSK", "QPSK", "GFSK"}, {0}, 10, 1), 1);
  model::QslaConfig cfg;
  cfg.width_scale = 1.0 / 16.0;
  cfg.num_classes = 2;
  model::Model<float> m(cfg);
  m.init(0);
  EXPECT_THROW(evaluate(m, ds, ds.split.test), EvalError);
}

}  // namespace
}  // namespace qsla::eval
