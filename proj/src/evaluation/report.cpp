// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "qsla/evaluation.hpp"

namespace qsla::eval {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string hex(std::uint64_t v, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*llx", width, static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text, std::vector<fs::path>& written) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  out.close();
  if (!out) throw std::runtime_error("write failed: " + path.string());
  written.push_back(path);
}

json confusion_json(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
  json counts = json::array(), norm = json::array(), sums = json::array();
  const auto rn = cm.row_normalized();
  for (std::size_t t = 0; t < cm.classes; ++t) {
    json row = json::array(), nrow = json::array();
    for (std::size_t p = 0; p < cm.classes; ++p) {
      row.push_back(cm.at(t, p));
      nrow.push_back(rn[t * cm.classes + p]);
    }
    counts.push_back(row);
    norm.push_back(nrow);
    sums.push_back(cm.row_sum(t));
  }
  json j;
  j["snr_db"] = cm.snr_db ? json(*cm.snr_db) : json("all");
  j["classes"] = names;
  j["counts"] = counts;
  j["row_sums"] = sums;
  j["row_normalized"] = norm;
  return j;
}

// Minimal SVG plotting: a fixed 480x320 canvas, axes in [x0,x1] x [y0,y1].
class Plot {
 public:
  Plot(double x0, double x1, double y0, double y1, std::string title, std::string xlabel, std::string ylabel)
      : x0_(x0), x1_(x1), y0_(y0), y1_(y1) {
    os_ << R"(<svg xmlns="http://www.w3.org/2000/svg" width="480" height="320" font-family="sans-serif" font-size="11">)"
        << "\n<rect width=\"480\" height=\"320\" fill=\"white\"/>\n"
        << "<text x=\"240\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n"
        << "<text x=\"240\" y=\"312\" text-anchor=\"middle\">" << xlabel << "</text>\n"
        << "<text x=\"14\" y=\"160\" text-anchor=\"middle\" transform=\"rotate(-90 14 160)\">" << ylabel
        << "</text>\n"
        << "<rect x=\"50\" y=\"30\" width=\"400\" height=\"250\" fill=\"none\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
      const double fx = x0 + (x1 - x0) * k / 4.0, fy = y0 + (y1 - y0) * k / 4.0;
      os_ << "<text x=\"" << num(px(fx)) << "\" y=\"294\" text-anchor=\"middle\">" << num(fx) << "</text>\n"
          << "<text x=\"46\" y=\"" << num(py(fy) + 4) << "\" text-anchor=\"end\">" << num(fy) << "</text>\n";
    }
  }

  void line(const std::vector<std::pair<double, double>>& pts, const std::string& color, const std::string& label,
            int slot) {
    if (pts.empty()) return;
    os_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) os_ << num(px(x)) << ',' << num(py(y)) << ' ';
    os_ << "\"/>\n";
    if (!label.empty()) {
      const double ly = 44 + 13 * slot;
      os_ << "<line x1=\"360\" x2=\"378\" y1=\"" << num(ly - 4) << "\" y2=\"" << num(ly - 4) << "\" stroke=\"" << color
          << "\" stroke-width=\"2\"/><text x=\"382\" y=\"" << num(ly) << "\">" << label << "</text>\n";
    }
  }

  std::string finish() {
    os_ << "</svg>\n";
    return os_.str();
  }

 private:
  double px(double x) const { return 50 + 400 * (x - x0_) / (x1_ - x0_); }
  double py(double y) const { return 280 - 250 * (y - y0_) / (y1_ - y0_); }
  double x0_, x1_, y0_, y1_;
  std::ostringstream os_;
};

const char* color(std::size_t k) {
  static const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return kPalette[k % 10];
}

std::string heatmap_svg(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
  const auto rn = cm.row_normalized();
  const double cell = 360.0 / static_cast<double>(std::max<std::size_t>(cm.classes, 1));
  std::ostringstream os;
  os << R"(<svg xmlns="http://www.w3.org/2000/svg" width="480" height="460" font-family="sans-serif" font-size="10">)"
     << "\n<rect width=\"480\" height=\"460\" fill=\"white\"/>\n"
     << "<text x=\"270\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">Confusion (" << cm.tag()
     << "), row-normalized</text>\n";
  for (std::size_t t = 0; t < cm.classes; ++t) {
    os << "<text x=\"86\" y=\"" << num(40 + cell * (t + 0.5) + 3) << "\" text-anchor=\"end\">" << names[t]
       << "</text>\n<text x=\"" << num(90 + cell * (t + 0.5)) << "\" y=\"416\" text-anchor=\"middle\">" << names[t]
       << "</text>\n";
    for (std::size_t p = 0; p < cm.classes; ++p) {
      const double v = rn[t * cm.classes + p];
      const int shade = static_cast<int>(255 - 200 * v);
      os << "<rect x=\"" << num(90 + cell * p) << "\" y=\"" << num(30 + cell * t) << "\" width=\"" << num(cell)
         << "\" height=\"" << num(cell) << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\"/>"
         << "<text x=\"" << num(90 + cell * (p + 0.5)) << "\" y=\"" << num(30 + cell * (t + 0.5) + 3)
         << "\" text-anchor=\"middle\">" << num(std::round(v * 100) / 100) << "</text>\n";
    }
  }
  os << "<text x=\"270\" y=\"440\" text-anchor=\"middle\">predicted</text>\n</svg>\n";
  return os.str();
}

}  // namespace

std::string file_stem(const std::string& class_name) {
  std::string s;
  for (char ch : class_name) {
    const bool ok = (ch >= 'A' && ch <= 'Z') || (ch >= 'a' && ch <= 'z') || (ch >= '0' && ch <= '9') || ch == '-' ||
                    ch == '_';
    s.push_back(ok ? ch : '_');
  }
  return s.empty() ? "_" : s;
}

json ComplexityBlock::to_json() const {
  json j;
  j["variant"] = variant;
  j["params"] = params;
  j["params_without_bn"] = params_without_bn;
  j["manifest_bytes"] = manifest_bytes;
  j["memory_kb"] = static_cast<double>(manifest_bytes) / 1000.0;
  j["median_seconds_per_epoch"] = median_seconds_per_epoch ? json(*median_seconds_per_epoch) : json(nullptr);
  j["epochs_timed"] = epochs_timed;
  if (full_size) {
    // Published figures for the same network, annotations only.
    struct Ref {
      const char* variant;
      int memory_kb, params_k, seconds_per_epoch;
    };
    static constexpr Ref kRefs[] = {
        {"qsla", 2502, 615, 96}, {"only-attention", 1274, 302, 45}, {"only-bilstm", 3982, 993, 170}};
    for (const auto& r : kRefs) {
      if (variant == r.variant) {
        j["reference"] = {{"memory_kb", r.memory_kb},
                          {"params_k", r.params_k},
                          {"seconds_per_epoch", r.seconds_per_epoch},
                          {"note", "published values on different hardware; not asserted"}};
      }
    }
  }
  return j;
}

ComplexityBlock complexity_report(const model::Model<float>& m, std::span<const double> epoch_seconds) {
  ComplexityBlock b;
  const auto& cfg = m.config();
  const auto count = m.count_params();
  b.variant = std::string(model::variant_name(cfg.variant));
  b.params = count.total;
  b.params_without_bn = count.without_batchnorm();
  b.manifest_bytes = m.memory_footprint();
  b.full_size = cfg.width_scale == 1.0 && cfg.num_classes == 10 && cfg.input_length == 128 &&
                cfg.conv_filters == 128 && cfg.lstm_cells == 128;
  if (!epoch_seconds.empty()) {
    std::vector<double> s(epoch_seconds.begin(), epoch_seconds.end());
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    b.median_seconds_per_epoch = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
    b.epochs_timed = n;
  }
  return b;
}

std::vector<fs::path> emit_reports(const EvalReport& report, const fs::path& dir, const EmitOptions& opts) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  std::vector<fs::path> written;

  std::string csv = "snr_db,n,accuracy\n";
  for (const auto& r : report.accuracy.rows) {
    csv += std::to_string(r.snr_db) + ',' + std::to_string(r.n) + ',' + num(r.accuracy) + '\n';
  }
  write_text(dir / "accuracy_by_snr.csv", csv, written);

  for (const auto& c : report.pr_curves) {
    std::string pr = "threshold,precision,recall\n";
    for (const auto& p : c.points) pr += num(p.threshold) + ',' + num(p.precision) + ',' + num(p.recall) + '\n';
    write_text(dir / ("pr_" + file_stem(report.class_names.at(c.class_id)) + ".csv"), pr, written);
  }

  for (const auto& cm : report.confusions) {
    write_text(dir / ("confusion_" + cm.tag() + ".json"), confusion_json(cm, report.class_names).dump(2) + '\n',
               written);
  }

  if (report.complexity) write_text(dir / "complexity.json", report.complexity->to_json().dump(2) + '\n', written);

  json s;
  s["classes"] = report.class_names;
  s["n"] = report.accuracy.n;
  s["overall_accuracy"] = report.accuracy.overall;
  json ap = json::object();
  for (const auto& c : report.pr_curves) {
    ap[report.class_names.at(c.class_id)] = c.ap ? json(*c.ap) : json("n/a");
  }
  s["average_precision"] = ap;
  const auto map = report.mean_ap();
  s["mean_average_precision"] = map ? json(*map) : json(nullptr);
  s["pr_snr_db"] = report.pr_snr ? json(*report.pr_snr) : json("all");
  s["config_fingerprint"] = hex(report.config_fingerprint, 16);
  s["dataset_crc32"] = hex(report.dataset_crc, 8);
  s["warnings"] = report.accuracy.warnings;
  write_text(dir / "summary.json", s.dump(2) + '\n', written);

  if (opts.svg) {
    const auto& rows = report.accuracy.rows;
    if (!rows.empty()) {
      const double lo = rows.front().snr_db, hi = rows.back().snr_db;
      Plot acc(lo, hi > lo ? hi : lo + 1, 0, 1, "Accuracy vs SNR", "SNR (dB)", "accuracy");
      std::vector<std::pair<double, double>> pts;
      for (const auto& r : rows) pts.emplace_back(r.snr_db, r.accuracy);
      acc.line(pts, color(0), "", 0);
      write_text(dir / "accuracy_by_snr.svg", acc.finish(), written);
    }
    Plot pr(0, 1, 0, 1, "Precision-recall", "recall", "precision");
    for (std::size_t k = 0; k < report.pr_curves.size(); ++k) {
      const auto& c = report.pr_curves[k];
      // Step curve: precision holds until recall moves.
      std::vector<std::pair<double, double>> pts;
      double prev_r = 0.0;
      for (const auto& p : c.points) {
        pts.emplace_back(prev_r, p.precision);
        pts.emplace_back(p.recall, p.precision);
        prev_r = p.recall;
      }
      pr.line(pts, color(k), report.class_names.at(c.class_id), static_cast<int>(k));
    }
    write_text(dir / "pr_curves.svg", pr.finish(), written);
    for (const auto& cm : report.confusions) {
      write_text(dir / ("confusion_" + cm.tag() + ".svg"), heatmap_svg(cm, report.class_names), written);
    }
  }
  return written;
}

}  // namespace qsla::eval
