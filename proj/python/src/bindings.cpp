// SPDX-License-Identifier: Apache-2.0
#include <sstream>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "qsla/cli.hpp"
#include "qsla/dataset.hpp"
#include "qsla/evaluation.hpp"
#include "qsla/model.hpp"

namespace py = pybind11;
using namespace qsla;

namespace {

template <typename T>
py::array_t<T> to_array(const std::vector<T>& v) {
  py::array_t<T> a(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

py::array_t<std::uint64_t> to_array(const std::vector<std::uint64_t>& v) {
  py::array_t<std::uint64_t> a(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

// Frames as iq[N, 2, 128] plus label, SNR and split index arrays.
py::dict dataset_to_dict(const signal::SignalDataset& ds) {
  const auto n = static_cast<py::ssize_t>(ds.frames.size());
  const auto len = static_cast<py::ssize_t>(signal::kFrameLength);
  py::array_t<float> iq({n, py::ssize_t{2}, len});
  py::array_t<std::int32_t> labels(n), snrs(n);
  auto* dst = iq.mutable_data();
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    const auto& f = ds.frames[i];
    std::copy(f.iq.begin(), f.iq.end(), dst + i * f.iq.size());
    labels.mutable_data()[i] = f.label;
    snrs.mutable_data()[i] = f.snr_db;
  }
  py::dict d;
  d["iq"] = iq;
  d["labels"] = labels;
  d["snrs"] = snrs;
  d["class_names"] = ds.class_names;
  d["snr_grid"] = ds.snr_grid;
  d["seed"] = ds.seed;
  d["train"] = to_array(ds.split.train);
  d["val"] = to_array(ds.split.val);
  d["test"] = to_array(ds.split.test);
  return d;
}

model::Variant variant_of(const std::string& name) {
  const auto v = model::parse_variant(name);
  if (!v) throw model::ConfigError("unknown variant '" + name + "'");
  return *v;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Quad-stream LSTM-attention modulation classifier";

  m.def(
      "variants",
      [] {
        std::vector<std::string> names;
        for (auto v : {model::Variant::kQsla, model::Variant::kOnlyBilstm, model::Variant::kOnlyAttention,
                       model::Variant::kRefCnn}) {
          names.emplace_back(model::variant_name(v));
        }
        return names;
      },
      "Names accepted by the variant arguments.");

  m.def(
      "param_count",
      [](const std::string& variant, double width_scale, std::size_t num_classes) {
        model::QslaConfig c;
        c.variant = variant_of(variant);
        c.width_scale = width_scale;
        c.num_classes = num_classes;
        c.validate();
        model::Model<float> net(c);
        const auto counts = net.count_params();
        py::dict d;
        d["total"] = counts.total;
        d["batchnorm"] = counts.batchnorm;
        d["manifest_bytes"] = net.memory_footprint();
        return d;
      },
      py::arg("variant") = "qsla", py::arg("width_scale") = 1.0, py::arg("num_classes") = 10,
      "Trainable parameters, batch-norm share and weight manifest size.");

  m.def(
      "generate",
      [](const std::vector<std::string>& classes, const std::vector<std::int32_t>& snrs,
         std::size_t frames_per_cell, std::uint64_t seed, unsigned threads) {
        auto spec = signal::DatasetSpec::from_names(classes, snrs, frames_per_cell, seed);
        spec.validate();
        signal::SignalDataset ds;
        {
          py::gil_scoped_release release;
          ds = signal::generate_dataset(spec, threads);
        }
        return dataset_to_dict(ds);
      },
      py::arg("classes"), py::arg("snrs"), py::arg("frames_per_cell") = 100, py::arg("seed") = 0,
      py::arg("threads") = 1, "Synthesizes a dataset in memory.");

  m.def(
      "read_dataset", [](const std::filesystem::path& path) { return dataset_to_dict(signal::read_dataset(path)); },
      py::arg("path"), "Reads a .sigds file and its .splits sidecar.");

  m.def(
      "average_precision",
      [](const std::vector<double>& scores, const std::vector<std::uint8_t>& positive) {
        return eval::pr_curve(scores, positive).ap;
      },
      py::arg("scores"), py::arg("positive"), "Step-wise AP; None when there are no positives.");

  m.def(
      "pr_curve",
      [](const std::vector<double>& scores, const std::vector<std::uint8_t>& positive) {
        const auto curve = eval::pr_curve(scores, positive);
        std::vector<double> thr, prec, rec;
        for (const auto& p : curve.points) {
          thr.push_back(p.threshold);
          prec.push_back(p.precision);
          rec.push_back(p.recall);
        }
        return py::make_tuple(to_array(thr), to_array(prec), to_array(rec));
      },
      py::arg("scores"), py::arg("positive"), "(thresholds, precision, recall), thresholds descending.");

  m.def(
      "accuracy_by_snr",
      [](const std::vector<int>& preds, const std::vector<int>& truths, const std::vector<int>& snrs) {
        const auto table = eval::accuracy_by_snr(preds, truths, snrs);
        py::dict d;
        for (const auto& r : table.rows) d[py::int_(r.snr_db)] = r.accuracy;
        return d;
      },
      py::arg("preds"), py::arg("truths"), py::arg("snrs"), "Accuracy per SNR bucket.");

  m.def("spearman", [](const std::vector<double>& x, const std::vector<double>& y) { return eval::spearman(x, y); },
        py::arg("x"), py::arg("y"), "Spearman rank correlation with average ranks for ties.");

  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"qsla"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in process; returns (exit_code, stdout, stderr).");
}
