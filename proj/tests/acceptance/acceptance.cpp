// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: acceptance [--work DIR] [--only NAME]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "qsla/cli.hpp"
#include "qsla/dataset.hpp"
#include "qsla/evaluation.hpp"
#include "qsla/gradcheck.hpp"
#include "qsla/rng.hpp"
#include "qsla/training.hpp"
#include "support/oracles.hpp"

namespace {

namespace fs = std::filesystem;
using namespace qsla;
using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

template <typename T>
ad::Tensor<T> random_tensor(ad::Shape shape, CounterRng& rng, double scale = 1.0) {
  ad::Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(scale * rng.uniform(-1.0, 1.0));
  return t;
}

// ---- criteria --------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  ad::LayerTolerances tol;
  tol.linear = 1e-7;
  tol.conv = 1e-5;
  tol.recurrent = 1e-4;
  tol.batchnorm = 1e-4;
  auto reports = ad::layer_grad_suite(0, tol);
  reports.push_back(model::model_grad_check(model::Variant::kQsla, 0, 1e-3));
  const double secs = seconds_since(t0);
  Verdict v;
  std::string failed;
  double worst = 0.0;
  for (const auto& r : reports) {
    worst = std::max(worst, r.max_rel_error() / r.tolerance);
    if (!r.passed()) {
      v.pass = false;
      failed += " " + r.name;
    }
  }
  v.pass = v.pass && secs < 120.0;
  v.detail = std::to_string(reports.size() - 1) + " layer checks + reduced-width QSLA; worst error/tolerance " +
             fmt("%.2g", worst) + "; " + fmt("%.1f", secs) + " s (limit 120 s)" +
             (failed.empty() ? "" : "; failed:" + failed);
  return v;
}

std::size_t params_of(model::Variant variant) {
  model::QslaConfig c;
  c.variant = variant;
  return model::Model<float>(c).count_params().total;
}

Verdict parameter_counts() {
  const auto q = params_of(model::Variant::kQsla), b = params_of(model::Variant::kOnlyBilstm),
             a = params_of(model::Variant::kOnlyAttention);
  Verdict v;
  const bool q_ok = q >= 584000 && q <= 646000;
  const bool b_ok = std::abs(static_cast<double>(b) - 993000.0) <= 99300.0;
  const bool a_ok = std::abs(static_cast<double>(a) - 302000.0) <= 30200.0;
  v.pass = q_ok && b_ok && a_ok && a < q && q < b;
  v.detail = "QSLA " + std::to_string(q) + " in [584000, 646000]; OnlyBiLSTM " + std::to_string(b) +
             " vs 993k +-10%; OnlyAttention " + std::to_string(a) + " vs 302k +-10%; ordering " +
             (a < q && q < b ? "holds" : "broken");
  return v;
}

Verdict memory() {
  model::QslaConfig c;
  model::Model<float> m(c);
  m.init(0);
  const double params = static_cast<double>(m.count_params().total);
  const double bytes = static_cast<double>(m.memory_footprint());
  const double rel = std::abs(bytes - 4.0 * params) / (4.0 * params);
  return {rel <= 0.10, "manifest " + fmt("%.0f", bytes) + " bytes (" + fmt("%.1f", bytes / 1000.0) +
                           " kB) vs 4 x params = " + fmt("%.0f", 4.0 * params) + "; deviation " +
                           fmt("%.4f%%", 100.0 * rel)};
}

Verdict oracle_equivalence() {
  Verdict v;
  std::ostringstream d;

  // conv1d against direct summation, 64-bit, bit-exact.
  std::size_t conv_mismatch = 0, conv_values = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    CounterRng rng(seed);
    const std::size_t batch = 2, c_in = seed % 2 ? 2 : 5, c_out = 16, len = 128, k = seed % 4 == 3 ? 1 : 3;
    auto x = random_tensor<double>({batch, c_in, len}, rng);
    auto w = random_tensor<double>({c_out, c_in, k}, rng);
    auto b = random_tensor<double>({c_out}, rng);
    ad::Tape<double> tape(false);
    auto y = ad::conv1d(tape, x, w, b);
    const std::vector<double> wv(w.data().begin(), w.data().end()), bv(b.data().begin(), b.data().end());
    for (std::size_t n = 0; n < batch; ++n) {
      std::vector<double> xn(x.data().begin() + n * c_in * len, x.data().begin() + (n + 1) * c_in * len);
      const auto ref = oracle::conv1d(xn, c_in, len, wv, c_out, k, bv);
      for (std::size_t i = 0; i < ref.size(); ++i, ++conv_values) conv_mismatch += y[n * c_out * len + i] != ref[i];
    }
  }
  d << "conv1d " << conv_mismatch << "/" << conv_values << " mismatches";
  v.pass = v.pass && conv_mismatch == 0;

  // BiLSTM against the plain recurrence.
  double lstm_err = 0.0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    CounterRng rng(50 + seed);
    const std::size_t steps = 42, feat = 24, hid = 16;
    auto make = [&] {
      return ad::LstmParams<double>{random_tensor<double>({feat, 4 * hid}, rng, 0.3),
                                    random_tensor<double>({hid, 4 * hid}, rng, 0.3),
                                    random_tensor<double>({4 * hid}, rng, 0.3)};
    };
    auto fw = make(), bw = make();
    auto x = random_tensor<double>({steps, feat}, rng);
    std::vector<std::vector<double>> xs(steps);
    for (std::size_t t = 0; t < steps; ++t) xs[t].assign(x.data().begin() + t * feat, x.data().begin() + (t + 1) * feat);
    ad::Tape<double> tape(false);
    auto y = ad::bilstm(tape, x, fw, bw);
    const auto rf = oracle::lstm(xs, fw, false), rb = oracle::lstm(xs, bw, true);
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t j = 0; j < hid; ++j) {
        lstm_err = std::max(lstm_err, std::abs(y[t * 2 * hid + j] - rf[t][j]));
        lstm_err = std::max(lstm_err, std::abs(y[t * 2 * hid + hid + j] - rb[t][j]));
      }
    }
  }
  d << "; BiLSTM max diff " << fmt("%.2g", lstm_err) << " (<= 1e-5)";
  v.pass = v.pass && lstm_err <= 1e-5;

  // AP against exhaustive threshold enumeration, all label patterns n <= 12.
  std::size_t ap_cases = 0, ap_mismatch = 0;
  CounterRng srng(7);
  for (std::size_t n = 1; n <= 12; ++n) {
    std::vector<std::vector<double>> score_sets(3, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      score_sets[0][i] = 1.0 - static_cast<double>((i * 13) % n) / static_cast<double>(n);
      score_sets[1][i] = static_cast<double>(i % 3) / 3.0;
      score_sets[2][i] = static_cast<double>(srng.below(5)) / 4.0;
    }
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      std::vector<std::uint8_t> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = (mask >> i) & 1u;
      for (const auto& s : score_sets) {
        const auto got = eval::pr_curve(s, y).ap;
        const auto want = oracle::average_precision(s, y);
        ++ap_cases;
        if (got.has_value() != want.has_value() || (want && *got != *want)) ++ap_mismatch;
      }
    }
  }
  d << "; AP " << ap_mismatch << "/" << ap_cases << " mismatches";
  v.pass = v.pass && ap_mismatch == 0;

  // Softmax rows and attention weights sum to one.
  double norm_err = 0.0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    CounterRng rng(90 + seed);
    auto logits = random_tensor<float>({16, 10}, rng, 20.0);
    const auto p = ad::softmax(logits);
    for (std::size_t r = 0; r < 16; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 10; ++j) s += p[r * 10 + j];
      norm_err = std::max(norm_err, std::abs(s - 1.0));
    }
    auto h = random_tensor<float>({4, 42, 32}, rng, 4.0);
    ad::AttentionParams<float> ap{random_tensor<float>({32}, rng), random_tensor<float>({42}, rng)};
    ad::Tape<float> tape(false);
    const auto a = ad::attention(tape, h, ap);
    for (std::size_t n = 0; n < 4; ++n) {
      double s = 0.0;
      for (std::size_t t = 0; t < 42; ++t) s += a.weights[n * 42 + t];
      norm_err = std::max(norm_err, std::abs(s - 1.0));
    }
  }
  d << "; normalization max |sum-1| " << fmt("%.2g", norm_err) << " (<= 1e-6)";
  v.pass = v.pass && norm_err <= 1e-6;
  v.detail = d.str();
  return v;
}

struct DeskOutcome {
  double acc18 = 0.0, rho = 0.0, initial_loss = 0.0, seconds = 0.0, overall = 0.0;
  std::size_t epochs = 0;
  std::vector<eval::SnrAccuracy> rows;
};

DeskOutcome desk_train(const signal::SignalDataset& ds, model::Variant variant, const fs::path& dir) {
  model::QslaConfig mc;
  mc.variant = variant;
  mc.width_scale = 0.5;
  mc.num_classes = ds.num_classes();
  training::TrainConfig tc;
  tc.batch_size = 128;
  tc.seed = 0;
  tc.threads = 1;
  model::Model<float> m(mc);
  m.init(0);
  const auto t0 = Clock::now();
  const auto res = training::train(m, ds, tc, training::TrainHooks{dir, {}});
  DeskOutcome o;
  o.seconds = seconds_since(t0);
  o.epochs = res.records.size();
  o.initial_loss = res.initial_train_loss;
  const auto rep = eval::evaluate(m, ds, ds.split.test);
  o.rows = rep.accuracy.rows;
  o.overall = rep.accuracy.overall;
  std::vector<double> snr, acc;
  for (const auto& r : rep.accuracy.rows) {
    snr.push_back(r.snr_db);
    acc.push_back(r.accuracy);
    if (r.snr_db == 18) o.acc18 = r.accuracy;
  }
  o.rho = eval::spearman(snr, acc);
  return o;
}

Verdict desk_run(const fs::path& work) {
  const auto t0 = Clock::now();
  const auto spec = signal::DatasetSpec::from_names({"BPSK", "QPSK", "8PSK", "QAM16"}, {0, 6, 12, 18}, 200, 0);
  const auto ds = signal::generate_dataset(spec, 1);
  const auto q = desk_train(ds, model::Variant::kQsla, work / "desk_qsla");
  const double secs = seconds_since(t0);
  const double ln4 = std::log(4.0);
  const bool acc_ok = q.acc18 >= 0.90, rho_ok = q.rho > 0.8,
             loss_ok = std::abs(q.initial_loss - ln4) <= 0.1 * ln4, time_ok = secs < 1800.0;
  std::ostringstream d;
  d << "18 dB accuracy " << fmt("%.4f", q.acc18) << " (>= 0.90); Spearman " << fmt("%.3f", q.rho)
    << " (> 0.8); initial loss " << fmt("%.4f", q.initial_loss) << " vs ln 4 = " << fmt("%.4f", ln4)
    << " +-10%; " << q.epochs << " epochs, " << fmt("%.0f", secs) << " s (limit 1800 s); per SNR";
  for (const auto& r : q.rows) d << ' ' << r.snr_db << ':' << fmt("%.3f", r.accuracy);

  // Reference CNN on the same data; reported, not asserted.
  const auto r = desk_train(ds, model::Variant::kRefCnn, work / "desk_refcnn");
  std::cout << "INFO  desk-refcnn-comparison: QSLA test accuracy " << fmt("%.4f", q.overall) << ", RefCNN "
            << fmt("%.4f", r.overall) << " (" << (q.overall >= r.overall ? "QSLA >= RefCNN" : "QSLA < RefCNN")
            << "; informational)\n";
  return {acc_ok && rho_ok && loss_ok && time_ok, d.str()};
}

Verdict recipe_fidelity(const fs::path& work) {
  Verdict v;
  std::ostringstream d;

  // Forced plateaus: the validation loss never improves after epoch 1.
  training::TrainConfig tc;
  training::PlateauState ps{tc.lr0};
  std::vector<double> trace{ps.lr};
  for (int epoch = 1; epoch <= 17; ++epoch) {
    const double lr = training::lr_on_plateau(ps, 1.0, tc);
    if (lr != trace.back()) trace.push_back(lr);
  }
  const std::vector<double> want{0.001, 0.0004, 0.00016};
  bool lr_ok = trace.size() == want.size();
  for (std::size_t i = 0; lr_ok && i < want.size(); ++i) lr_ok = std::abs(trace[i] - want[i]) <= 1e-12;
  d << "LR trace";
  for (double lr : trace) d << ' ' << lr;
  v.pass = v.pass && lr_ok;

  // Split of the full-scale grid.
  std::vector<std::int32_t> labels, snrs;
  for (std::int32_t c = 0; c < 10; ++c) {
    for (auto s : signal::kSnrGrid) {
      for (int k = 0; k < 2000; ++k) {
        labels.push_back(c);
        snrs.push_back(s);
      }
    }
  }
  const auto split = signal::stratified_split(labels, snrs, 0);
  const bool split_ok = split.train.size() == 336000 && split.val.size() == 42000 && split.test.size() == 42000;
  d << "; split of " << labels.size() << " = " << split.train.size() << '/' << split.val.size() << '/'
    << split.test.size();
  v.pass = v.pass && split_ok;

  // Early stopping hands back the best epoch's weights bit for bit.
  const auto ds =
      signal::generate_dataset(signal::DatasetSpec::from_names({"BPSK", "QAM16"}, {-10, 10}, 30, 5), 1);
  model::QslaConfig mc;
  mc.width_scale = 1.0 / 16.0;
  mc.num_classes = 2;
  model::Model<float> m(mc);
  m.init(5);
  training::TrainConfig es;
  es.batch_size = 16;
  es.max_epochs = 80;
  es.early_stop_patience = 3;
  es.checkpoint_every = 0;
  const auto dir = work / "early_stop";
  fs::remove_all(dir);
  const auto res = training::train(m, ds, es, training::TrainHooks{dir, {}});
  const bool stopped = res.stop == training::StopReason::kEarlyStop && res.records.size() > res.best_epoch;
  const auto best_file = dir / (std::to_string(res.best_epoch) + ".qslaw");
  const bool exact = fs::exists(best_file) && ad::encode_manifest(m.to_manifest()) == ad::encode_manifest(ad::load_manifest(best_file)) &&
                     slurp(best_file) == slurp(dir / "final.qslaw");
  d << "; early stop at epoch " << res.records.size() << " restored epoch " << res.best_epoch << " weights "
    << (exact ? "bit-exactly" : "NOT exactly") << (stopped ? "" : " (no early stop happened)");
  v.pass = v.pass && stopped && exact;
  v.detail = d.str();
  return v;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "qsla");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

// Files of `a` and `b` compared byte for byte; names in `skip` are ignored.
std::size_t differing_files(const fs::path& a, const fs::path& b, const std::vector<std::string>& skip,
                            std::size_t& compared) {
  std::size_t diff = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const auto name = e.path().filename().string();
    if (!e.is_regular_file() || std::find(skip.begin(), skip.end(), name) != skip.end()) continue;
    ++compared;
    if (!fs::exists(b / name) || slurp(e.path()) != slurp(b / name)) ++diff;
  }
  return diff;
}

Verdict determinism(const fs::path& work) {
  const auto root = work / "determinism";
  fs::remove_all(root);
  int bad_exit = 0;
  std::size_t compared = 0;
  for (const char* run : {"a", "b"}) {
    const auto d = root / run;
    fs::create_directories(d);
    bad_exit += cli({"gen", "--classes", "BPSK,QPSK,QAM16", "--snrs", "0,10", "--frames-per-cell", "20", "--seed",
                     "11", "--out", (d / "data" / "ds.sigds").string()}) != 0;
    bad_exit += cli({"train", "--dataset", (d / "data" / "ds.sigds").string(), "--out", (d / "run").string(),
                     "--width", "0.125", "--batch-size", "32", "--max-epochs", "3", "--threads", "1", "--seed",
                     "11"}) != 0;
  }
  // Evaluate one run twice; timing-derived fields depend on which run is read.
  for (const char* ev : {"eval1", "eval2"}) {
    bad_exit += cli({"eval", "--run", (root / "a" / "run").string(), "--dataset",
                     (root / "a" / "data" / "ds.sigds").string(), "--out", (root / ev).string(), "--snr", "10",
                     "--svg"}) != 0;
  }
  const auto gen_diff = differing_files(root / "a" / "data", root / "b" / "data", {}, compared);
  const auto train_diff = differing_files(root / "a" / "run", root / "b" / "run", {"timing.jsonl"}, compared);
  const auto eval_diff = differing_files(root / "eval1", root / "eval2", {}, compared);
  std::ostringstream d;
  d << "gen " << gen_diff << ", train --threads 1 " << train_diff << ", eval " << eval_diff
    << " differing files out of " << compared << " compared (timing.jsonl excluded)";
  if (bad_exit) d << "; " << bad_exit << " commands failed";
  return {bad_exit == 0 && gen_diff == 0 && train_diff == 0 && eval_diff == 0 && compared > 10, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "qsla_acceptance";
  std::string only;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--work") work = argv[i + 1];
    else if (flag == "--only") only = argv[i + 1];
  }
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient-suite", gradient_suite},
      {"parameter-count-oracle", parameter_counts},
      {"memory-oracle", memory},
      {"oracle-equivalence", oracle_equivalence},
      {"desk-learning-run", [&] { return desk_run(work); }},
      {"recipe-fidelity", [&] { return recipe_fidelity(work); }},
      {"determinism", [&] { return determinism(work); }},
  };
  int failed = 0, ran = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && only != name) continue;
    ++ran;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS  " : "FAIL  ") << name << ": " << v.detail << std::endl;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
