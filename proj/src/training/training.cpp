// SPDX-License-Identifier: Apache-2.0
#include "qsla/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <thread>

#include "qsla/rng.hpp"

namespace qsla::training {

using model::ConfigError;
using nlohmann::json;

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kDropoutStream = 0x4450;

}  // namespace

// ---- config ----------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("train.lr0 must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("train.plateau_factor must lie in (0, 1)");
  if (plateau_patience < 1) throw ConfigError("train.plateau_patience must be at least 1");
  if (early_stop_patience < 1) throw ConfigError("train.early_stop_patience must be at least 1");
  if (!(plateau_threshold >= 0.0)) throw ConfigError("train.plateau_threshold must be non-negative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (max_epochs < 1) throw ConfigError("train.max_epochs must be at least 1");
  if (!(min_lr >= 0.0) || min_lr > lr0) throw ConfigError("train.min_lr must lie in [0, lr0]");
  if (threads < 1) throw ConfigError("train.threads must be at least 1");
}

json TrainConfig::to_json() const {
  return json{{"lr0", lr0},
              {"plateau_factor", plateau_factor},
              {"plateau_patience", plateau_patience},
              {"plateau_threshold", plateau_threshold},
              {"max_epochs", max_epochs},
              {"batch_size", batch_size},
              {"early_stop_patience", early_stop_patience},
              {"min_lr", min_lr},
              {"seed", seed},
              {"threads", threads},
              {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  auto count = [&](const std::string& key, auto& dst) {
    const auto& v = j.at(key);
    if (!v.is_number_unsigned()) throw ConfigError("train." + key + " must be a non-negative integer");
    dst = v.get<std::remove_reference_t<decltype(dst)>>();
  };
  auto real = [&](const std::string& key, double& dst) {
    const auto& v = j.at(key);
    if (!v.is_number()) throw ConfigError("train." + key + " must be a number");
    dst = v.get<double>();
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "lr0") real(key, c.lr0);
    else if (key == "plateau_factor") real(key, c.plateau_factor);
    else if (key == "plateau_patience") count(key, c.plateau_patience);
    else if (key == "plateau_threshold") real(key, c.plateau_threshold);
    else if (key == "max_epochs") count(key, c.max_epochs);
    else if (key == "batch_size") count(key, c.batch_size);
    else if (key == "early_stop_patience") count(key, c.early_stop_patience);
    else if (key == "min_lr") real(key, c.min_lr);
    else if (key == "seed") count(key, c.seed);
    else if (key == "threads") count(key, c.threads);
    else if (key == "checkpoint_every") count(key, c.checkpoint_every);
    else throw ConfigError("unknown train config key '" + key + "'");
  }
  return c;
}

signal::Split split_dataset(const signal::SignalDataset& ds, std::uint64_t seed) {
  std::vector<std::int32_t> labels(ds.frames.size()), snrs(ds.frames.size());
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    labels[i] = ds.frames[i].label;
    snrs[i] = ds.frames[i].snr_db;
  }
  return signal::stratified_split(labels, snrs, seed);
}

// ---- optimizer and schedule ------------------------------------------------

template <typename T>
void adam_step(std::span<model::Param<T>> params, AdamState<T>& state, double lr, const AdamOptions& opts) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.size(), T(0));
      state.v.emplace_back(p.tensor.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    if (state.m[k].size() != p.tensor.size()) {
      throw std::invalid_argument("adam_step: moment buffer for '" + p.name + "' has the wrong size");
    }
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericalError("non-finite gradient in '" + p.name + "' at index " + std::to_string(i) +
                             " (value " + std::to_string(g[i]) + ")");
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opts.beta1, t);
  const double c2 = 1.0 - std::pow(opts.beta2, t);
  const T b1 = static_cast<T>(opts.beta1), b2 = static_cast<T>(opts.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto theta = p.tensor.data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const bool has = p.tensor.has_grad();
    const std::span<T> g = has ? p.tensor.grad() : std::span<T>();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T gi = has ? g[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const double mhat = static_cast<double>(m[i]) / c1;
      const double vhat = static_cast<double>(v[i]) / c2;
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * mhat / (std::sqrt(vhat) + opts.eps));
    }
  }
}

template void adam_step<float>(std::span<model::Param<float>>, AdamState<float>&, double, const AdamOptions&);
template void adam_step<double>(std::span<model::Param<double>>, AdamState<double>&, double, const AdamOptions&);

double lr_on_plateau(PlateauState& state, double val_loss, const TrainConfig& cfg) {
  if (val_loss < state.best - cfg.plateau_threshold) {
    state.best = val_loss;
    state.wait = 0;
    return state.lr;
  }
  if (++state.wait >= cfg.plateau_patience) {
    state.lr = std::max(state.lr * cfg.plateau_factor, cfg.min_lr);
    state.wait = 0;
  }
  return state.lr;
}

bool early_stop_check(EarlyStopState& state, std::size_t epoch, double val_loss, std::size_t patience,
                      double threshold) {
  if (val_loss < state.best - threshold) {
    state.best = val_loss;
    state.best_epoch = epoch;
    state.wait = 0;
    return false;
  }
  return ++state.wait >= patience;
}

json EpochRecord::to_json() const {
  return json{{"epoch", epoch},
              {"train_loss", train_loss},
              {"val_loss", val_loss},
              {"val_accuracy", val_accuracy},
              {"lr", lr}};
}

bool EpochRecord::same_values(const EpochRecord& o) const {
  return epoch == o.epoch && train_loss == o.train_loss && val_loss == o.val_loss &&
         val_accuracy == o.val_accuracy && lr == o.lr;
}

// ---- epoch loop ------------------------------------------------------------

EvalStats evaluate_split(model::Model<float>& m, const signal::SignalDataset& ds,
                         std::span<const std::uint64_t> indices, std::size_t batch_size) {
  EvalStats s;
  if (indices.empty()) return s;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t at = 0; at < indices.size(); at += batch_size) {
    const auto idx = indices.subspan(at, std::min(batch_size, indices.size() - at));
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(ds.frames[i].label);
    ad::Tape<float> tape(false);
    const auto logits = m.forward(tape, model::make_batch<float>(ds.frames, idx), ad::Mode::kEval);
    const auto parts = m.loss(tape, logits, labels);
    loss += static_cast<double>(parts.data) * static_cast<double>(idx.size());
    const std::size_t c = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const float* row = logits.data().data() + r * c;
      if (std::max_element(row, row + c) - row == labels[r]) ++correct;
    }
    // Penalty is per batch, not per example; add it once below.
    if (at == 0) s.loss = static_cast<double>(parts.penalty);
  }
  s.loss += loss / static_cast<double>(indices.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  return s;
}

namespace {

struct StepOutcome {
  double loss = 0.0;
};

// Forward/backward for one mini-batch, optionally sharded across replicas.
// Gradients end up in the main model's parameters, reduced in shard order;
// batch-norm running statistics become the shard average.
class Stepper {
 public:
  Stepper(model::Model<float>& main, unsigned threads) : main_(main) {
    for (unsigned t = 1; t < threads; ++t) replicas_.push_back(main);
    threads_ = threads;
  }

  double run(const signal::SignalDataset& ds, std::span<const std::uint64_t> idx, ad::DropoutKey key) {
    const std::size_t n = idx.size();
    const unsigned shards = static_cast<unsigned>(std::min<std::size_t>(threads_, n));
    main_.zero_grad();
    if (shards <= 1) return shard(main_, ds, idx, key, 0);

    for (auto& r : replicas_) sync_from_main(r);
    std::vector<double> losses(shards);
    std::vector<std::size_t> starts(shards + 1);
    for (unsigned s = 0; s <= shards; ++s) starts[s] = n * s / shards;
    std::vector<model::Model<float>*> workers{&main_};
    for (unsigned s = 1; s < shards; ++s) workers.push_back(&replicas_[s - 1]);
    std::vector<std::exception_ptr> errors(shards);
    std::vector<std::thread> pool;
    for (unsigned s = 0; s < shards; ++s) {
      pool.emplace_back([&, s] {
        try {
          losses[s] = shard(*workers[s], ds, idx.subspan(starts[s], starts[s + 1] - starts[s]), key, starts[s]);
        } catch (...) {
          errors[s] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    double loss = 0.0;
    for (unsigned s = 0; s < shards; ++s) {
      loss += losses[s] * static_cast<double>(starts[s + 1] - starts[s]) / static_cast<double>(n);
    }
    // Main already holds shard 0's gradient scaled by its own size.
    auto& mp = main_.params();
    const float w0 = static_cast<float>(starts[1] - starts[0]) / static_cast<float>(n);
    for (auto& p : mp) {
      if (p.tensor.has_grad()) {
        for (auto& g : p.tensor.grad()) g *= w0;
      }
    }
    for (unsigned s = 1; s < shards; ++s) {
      const float w = static_cast<float>(starts[s + 1] - starts[s]) / static_cast<float>(n);
      auto& rp = workers[s]->params();
      for (std::size_t k = 0; k < mp.size(); ++k) {
        if (!rp[k].tensor.has_grad()) continue;
        auto dst = mp[k].tensor.grad();
        const auto src = rp[k].tensor.grad();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
      }
    }
    for (std::size_t b = 0; b < main_.num_batchnorm(); ++b) {
      auto& dst = main_.batchnorm_state(b);
      for (unsigned s = 1; s < shards; ++s) {
        const auto& src = workers[s]->batchnorm_state(b);
        for (std::size_t c = 0; c < dst.running_mean.size(); ++c) {
          dst.running_mean[c] += src.running_mean[c];
          dst.running_var[c] += src.running_var[c];
        }
      }
      for (std::size_t c = 0; c < dst.running_mean.size(); ++c) {
        dst.running_mean[c] /= static_cast<float>(shards);
        dst.running_var[c] /= static_cast<float>(shards);
      }
    }
    return loss;
  }

 private:
  void sync_from_main(model::Model<float>& r) {
    auto& mp = main_.params();
    auto& rp = r.params();
    for (std::size_t k = 0; k < mp.size(); ++k) {
      const auto src = std::span<const float>(mp[k].tensor.data());
      std::copy(src.begin(), src.end(), rp[k].tensor.data().begin());
      rp[k].tensor.zero_grad();
    }
    for (std::size_t b = 0; b < main_.num_batchnorm(); ++b) r.batchnorm_state(b) = main_.batchnorm_state(b);
  }

  static double shard(model::Model<float>& m, const signal::SignalDataset& ds, std::span<const std::uint64_t> idx,
                      ad::DropoutKey key, std::size_t row_offset) {
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (auto i : idx) labels.push_back(ds.frames[i].label);
    key.offset = row_offset * m.dropout_row_elements();
    ad::Tape<float> tape;
    const auto logits = m.forward(tape, model::make_batch<float>(ds.frames, idx), ad::Mode::kTrain, key);
    const auto parts = m.loss(tape, logits, labels);
    const double loss = static_cast<double>(parts.total.item());
    if (!std::isfinite(loss)) throw NumericalError("non-finite training loss");
    tape.backward(parts.total);
    return loss;
  }

  model::Model<float>& main_;
  std::vector<model::Model<float>> replicas_;
  unsigned threads_ = 1;
};

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << line << "\n";
}

}  // namespace

TrainResult train(model::Model<float>& m, const signal::SignalDataset& ds, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  if (m.config().num_classes != ds.num_classes()) {
    throw ConfigError("model has " + std::to_string(m.config().num_classes) + " classes, dataset has " +
                      std::to_string(ds.num_classes()));
  }
  if (ds.split.train.empty() || ds.split.val.empty()) throw ConfigError("dataset split has no train or val frames");

  const auto& run = hooks.run_dir;
  if (run) {
    std::filesystem::create_directories(*run);
    model::save_config((*run / "model.json").string(), m.config());
    std::ofstream(*run / "log.jsonl", std::ios::trunc);
    std::ofstream(*run / "timing.jsonl", std::ios::trunc);
  }

  TrainResult result;
  AdamState<float> adam;
  PlateauState plateau{cfg.lr0};
  EarlyStopState stopper;
  ad::WeightManifest best = m.to_manifest();
  Stepper stepper(m, cfg.threads);
  std::uint64_t global_step = 0;
  bool measured_initial = false;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = plateau.lr;
    std::vector<std::uint64_t> order = ds.split.train;
    auto rng = CounterRng::derive(cfg.seed, {kShuffleStream, epoch});
    shuffle(order, rng);

    double train_loss = 0.0;
    EvalStats val;
    try {
      for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
        const auto idx =
            std::span<const std::uint64_t>(order).subspan(at, std::min(cfg.batch_size, order.size() - at));
        const ad::DropoutKey key{cfg.seed, derive_key(kDropoutStream, {global_step}), 0};
        const double loss = stepper.run(ds, idx, key);
        if (!std::isfinite(loss)) throw NumericalError("training loss is not finite");
        if (!measured_initial) {
          result.initial_train_loss = loss;
          measured_initial = true;
        }
        adam_step(std::span<model::Param<float>>(m.params()), adam, lr);
        ++global_step;
        train_loss += loss * static_cast<double>(idx.size());
      }
      train_loss /= static_cast<double>(order.size());
      val = evaluate_split(m, ds, ds.split.val, cfg.batch_size);
      if (!std::isfinite(val.loss)) throw NumericalError("validation loss is not finite");
    } catch (const NumericalError& e) {
      // Keep the best weights so far for diagnosis and leave them in the model.
      if (run) ad::save_manifest(*run / "last_good.qslaw", best);
      m.load(best);
      throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch));
    }
    EpochRecord rec{epoch, train_loss, val.loss, val.accuracy, lr, 0.0};
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const bool stop = early_stop_check(stopper, epoch, val.loss, cfg.early_stop_patience, cfg.plateau_threshold);
    const bool is_best = stopper.best_epoch == epoch;
    if (is_best) best = m.to_manifest();
    lr_on_plateau(plateau, val.loss, cfg);

    result.records.push_back(rec);
    if (run) {
      append_line(*run / "log.jsonl", rec.to_json().dump());
      append_line(*run / "timing.jsonl", json{{"epoch", epoch}, {"seconds", rec.seconds}}.dump());
      if (is_best || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)) {
        ad::save_manifest(*run / (std::to_string(epoch) + ".qslaw"), m.to_manifest());
      }
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (stop) {
      result.stop = StopReason::kEarlyStop;
      break;
    }
  }

  m.load(best);
  result.best_epoch = stopper.best_epoch;
  result.best_val_loss = stopper.best;
  result.final_manifest = std::move(best);
  if (run) ad::save_manifest(*run / "final.qslaw", result.final_manifest);
  return result;
}

}  // namespace qsla::training
