// SPDX-License-Identifier: Apache-2.0
#include "qsla/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>

#include "qsla/rng.hpp"

namespace qsla::model {

using ad::Shape;
using nlohmann::json;

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
constexpr std::size_t kRefFilters = 64;
constexpr std::size_t kRefHidden = 128;

std::size_t scaled(std::size_t base, double w, const char* what) {
  const double v = static_cast<double>(base) * w;
  const double r = std::round(v);
  if (std::abs(v - r) > 1e-9 || r < 1.0) {
    throw ConfigError(std::string(what) + " * width_scale = " + std::to_string(v) + " is not a positive integer");
  }
  return static_cast<std::size_t>(r);
}

std::size_t pooled(std::size_t len, std::size_t stride) { return len < stride ? 0 : (len - stride) / stride + 1; }

}  // namespace

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kQsla: return "qsla";
    case Variant::kOnlyBilstm: return "only-bilstm";
    case Variant::kOnlyAttention: return "only-attention";
    case Variant::kRefCnn: return "refcnn";
  }
  return "?";
}

std::optional<Variant> parse_variant(std::string_view name) {
  for (auto v : {Variant::kQsla, Variant::kOnlyBilstm, Variant::kOnlyAttention, Variant::kRefCnn}) {
    if (variant_name(v) == name) return v;
  }
  return std::nullopt;
}

// ---- config ----------------------------------------------------------------

void QslaConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(conv_filters, "conv_filters");
  positive(conv_kernel, "conv_kernel");
  positive(fusion_kernel, "fusion_kernel");
  positive(pool_stride, "pool_stride");
  positive(lstm_cells, "lstm_cells");
  positive(input_length, "input_length");
  if (conv_kernel % 2 == 0 || fusion_kernel % 2 == 0) throw ConfigError("kernel sizes must be odd");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
  if (!(l2_coeff >= 0.0) || !std::isfinite(l2_coeff)) throw ConfigError("l2_coeff must be a non-negative number");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(width_scale > 0.0) || !std::isfinite(width_scale)) throw ConfigError("width_scale must be positive");
  filters();
  cells();
  if (pooled_length() == 0) throw ConfigError("input_length is shorter than the pooling window");
  if (variant == Variant::kRefCnn && pooled(pooled_length(), pool_stride) == 0) {
    throw ConfigError("input_length is too short for two pooling stages");
  }
}

std::size_t QslaConfig::filters() const { return scaled(conv_filters, width_scale, "conv_filters"); }
std::size_t QslaConfig::cells() const { return scaled(lstm_cells, width_scale, "lstm_cells"); }
std::size_t QslaConfig::pooled_length() const { return pooled(input_length, pool_stride); }

json QslaConfig::to_json() const {
  return json{{"conv_filters", conv_filters}, {"conv_kernel", conv_kernel},
              {"fusion_kernel", fusion_kernel}, {"pool_stride", pool_stride},
              {"lstm_cells", lstm_cells},     {"dropout_p", dropout_p},
              {"l2_coeff", l2_coeff},         {"num_classes", num_classes},
              {"input_length", input_length}, {"width_scale", width_scale},
              {"variant", std::string(variant_name(variant))}};
}

QslaConfig QslaConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  QslaConfig c;
  auto count = [&](const std::string& key, std::size_t& dst) {
    const auto& v = j.at(key);
    if (!v.is_number_unsigned()) throw ConfigError("model." + key + " must be a non-negative integer");
    dst = v.get<std::size_t>();
  };
  auto real = [&](const std::string& key, double& dst) {
    const auto& v = j.at(key);
    if (!v.is_number()) throw ConfigError("model." + key + " must be a number");
    dst = v.get<double>();
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "conv_filters") count(key, c.conv_filters);
    else if (key == "conv_kernel") count(key, c.conv_kernel);
    else if (key == "fusion_kernel") count(key, c.fusion_kernel);
    else if (key == "pool_stride") count(key, c.pool_stride);
    else if (key == "lstm_cells") count(key, c.lstm_cells);
    else if (key == "num_classes") count(key, c.num_classes);
    else if (key == "input_length") count(key, c.input_length);
    else if (key == "dropout_p") real(key, c.dropout_p);
    else if (key == "l2_coeff") real(key, c.l2_coeff);
    else if (key == "width_scale") real(key, c.width_scale);
    else if (key == "variant") {
      if (!value.is_string()) throw ConfigError("model.variant must be a string");
      const auto v = parse_variant(value.get<std::string>());
      if (!v) throw ConfigError("unknown model variant '" + value.get<std::string>() + "'");
      c.variant = *v;
    } else {
      throw ConfigError("unknown model config key '" + key + "'");
    }
  }
  return c;
}

std::uint64_t QslaConfig::fingerprint() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void save_config(const std::string& path, const QslaConfig& config) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << config.to_json().dump(2) << "\n";
}

QslaConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("model config " + path + ": " + e.what());
  }
  return QslaConfig::from_json(j);
}

// ---- batches ---------------------------------------------------------------

template <typename T>
QuadBatch<T> make_batch(std::span<const signal::IQFrame> frames, std::span<const std::uint64_t> indices) {
  constexpr std::size_t L = signal::kFrameLength;
  const std::size_t n = indices.size();
  QuadBatch<T> b{Tensor<T>({n, 2, L}), Tensor<T>({n, 2, L}), Tensor<T>({n, 1, L}), Tensor<T>({n, 1, L})};
  for (std::size_t r = 0; r < n; ++r) {
    const auto v = signal::quad_preprocess(frames[indices[r]]);
    std::copy(v.a_phi.begin(), v.a_phi.end(), b.a_phi.data().begin() + r * 2 * L);
    std::copy(v.iq.begin(), v.iq.end(), b.iq.data().begin() + r * 2 * L);
    std::copy(v.i.begin(), v.i.end(), b.i.data().begin() + r * L);
    std::copy(v.q.begin(), v.q.end(), b.q.data().begin() + r * L);
  }
  return b;
}

template <typename T>
QuadBatch<T> make_batch(std::span<const signal::IQFrame> frames) {
  std::vector<std::uint64_t> idx(frames.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch<T>(frames, idx);
}

// ---- model -----------------------------------------------------------------

template <typename T>
std::size_t Model<T>::add_param(const std::string& layer, const std::string& tensor, ParamRole role, Shape shape) {
  params_.push_back(Param<T>{layer + "." + tensor, layer, role, Tensor<T>(std::move(shape), T(0), true)});
  return params_.size() - 1;
}

template <typename T>
typename Model<T>::ConvBlock Model<T>::add_conv(const std::string& layer, std::size_t in, std::size_t out,
                                                std::size_t kernel, bool with_bn) {
  ConvBlock b{};
  b.weight = add_param(layer, "weight", ParamRole::kConv, {out, in, kernel});
  b.bias = add_param(layer, "bias", ParamRole::kConv, {out});
  b.bn = kNone;
  if (with_bn) {
    const std::string bn_layer = "bn" + layer.substr(4);
    BnSlot s{bn_layer, add_param(bn_layer, "gamma", ParamRole::kBatchNorm, {out}),
             add_param(bn_layer, "beta", ParamRole::kBatchNorm, {out}), ad::BatchNormState<T>(out)};
    bn_.push_back(std::move(s));
    b.bn = bn_.size() - 1;
  }
  return b;
}

template <typename T>
Model<T>::Model(QslaConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t k = config_.conv_kernel;
  const std::size_t classes = config_.num_classes;
  const std::size_t steps = config_.pooled_length();

  if (config_.variant == Variant::kRefCnn) {
    convs_.push_back(add_conv("conv1", 2, kRefFilters, k, false));
    convs_.push_back(add_conv("conv2", kRefFilters, kRefFilters, k, false));
    const std::size_t flat = kRefFilters * pooled(steps, config_.pool_stride);
    dense_hidden_ = add_param("hidden", "weight", ParamRole::kDense, {flat, kRefHidden});
    add_param("hidden", "bias", ParamRole::kDense, {kRefHidden});
    dense_ = add_param("dense", "weight", ParamRole::kDense, {kRefHidden, classes});
    add_param("dense", "bias", ParamRole::kDense, {classes});
    return;
  }

  const std::size_t f = config_.filters();
  const std::size_t h = config_.cells();
  convs_.push_back(add_conv("conv1", 2, f, k, true));
  convs_.push_back(add_conv("conv2", 2, f, k, true));
  convs_.push_back(add_conv("conv3", 1, f, k, true));
  convs_.push_back(add_conv("conv4", 1, f, k, true));
  convs_.push_back(add_conv("conv5", 2 * f, f, config_.fusion_kernel, true));
  convs_.push_back(add_conv("conv6", 3 * f, f, k, true));
  convs_.push_back(add_conv("conv7", f, f, k, true));

  auto add_bilstm = [&](const std::string& layer, std::size_t in) {
    temporal_.push_back(params_.size());
    for (const char* dir : {"forward", "backward"}) {
      add_param(layer, std::string(dir) + ".w_input", ParamRole::kRecurrent, {in, 4 * h});
      add_param(layer, std::string(dir) + ".w_hidden", ParamRole::kRecurrent, {h, 4 * h});
      add_param(layer, std::string(dir) + ".bias", ParamRole::kRecurrent, {4 * h});
    }
  };
  auto add_attention = [&](const std::string& layer, std::size_t width) {
    temporal_.push_back(params_.size());
    add_param(layer, "weight", ParamRole::kAttention, {width});
    add_param(layer, "bias", ParamRole::kAttention, {steps});
  };

  std::size_t width = 0;
  switch (config_.variant) {
    case Variant::kQsla:
      add_bilstm("bilstm", f);
      add_attention("attention", 2 * h);
      width = 2 * h;
      break;
    case Variant::kOnlyBilstm:
      add_bilstm("bilstm1", f);
      add_bilstm("bilstm2", 2 * h);
      width = 2 * h;
      break;
    case Variant::kOnlyAttention:
      add_attention("attention1", f);
      add_attention("attention2", f);
      width = f;
      break;
    case Variant::kRefCnn: break;
  }
  dense_ = add_param("dense", "weight", ParamRole::kDense, {steps * width, classes});
  add_param("dense", "bias", ParamRole::kDense, {classes});
}

template <typename T>
Model<T>::Model(const Model& other) {
  *this = other;
}

template <typename T>
Model<T>& Model<T>::operator=(const Model& other) {
  if (this == &other) return *this;
  config_ = other.config_;
  params_ = other.params_;
  for (auto& p : params_) p.tensor = p.tensor.clone();
  bn_ = other.bn_;
  convs_ = other.convs_;
  temporal_ = other.temporal_;
  dense_hidden_ = other.dense_hidden_;
  dense_ = other.dense_;
  return *this;
}

template <typename T>
void Model<T>::init(std::uint64_t seed) {
  for (std::size_t idx = 0; idx < params_.size(); ++idx) {
    auto& p = params_[idx];
    auto rng = CounterRng::derive(seed, {idx});
    auto v = p.tensor.data();
    const auto& s = p.tensor.shape();
    const bool is_bias = p.name.ends_with("bias");
    auto glorot = [&](double fan_in, double fan_out) {
      const double lim = std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-lim, lim));
    };
    switch (p.role) {
      case ParamRole::kConv:
        if (is_bias) std::fill(v.begin(), v.end(), T(0));
        else glorot(static_cast<double>(s[1] * s[2]), static_cast<double>(s[0] * s[2]));
        break;
      case ParamRole::kBatchNorm:
        std::fill(v.begin(), v.end(), p.name.ends_with("gamma") ? T(1) : T(0));
        break;
      case ParamRole::kRecurrent:
        if (is_bias) {
          const std::size_t h = v.size() / 4;
          std::fill(v.begin(), v.end(), T(0));
          std::fill(v.begin() + h, v.begin() + 2 * h, T(1));
        } else {
          const double lim = 1.0 / std::sqrt(static_cast<double>(s[1] / 4));
          for (auto& x : v) x = static_cast<T>(rng.uniform(-lim, lim));
        }
        break;
      case ParamRole::kAttention:
        if (is_bias) std::fill(v.begin(), v.end(), T(0));
        else glorot(static_cast<double>(s[0]), 1.0);
        break;
      case ParamRole::kDense:
        if (is_bias) std::fill(v.begin(), v.end(), T(0));
        else glorot(static_cast<double>(s[0]), static_cast<double>(s[1]));
        break;
    }
  }
  for (auto& b : bn_) {
    std::fill(b.state.running_mean.begin(), b.state.running_mean.end(), T(0));
    std::fill(b.state.running_var.begin(), b.state.running_var.end(), T(1));
    // The unit prior counts as one update, so eval works on a fresh model and
    // training blends into it.
    b.state.updates = 1;
  }
}

template <typename T>
const Param<T>& Model<T>::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename T>
const Tensor<T>& Model<T>::classifier_weight() const {
  return params_[dense_].tensor;
}

template <typename T>
ad::LstmParams<T> Model<T>::lstm(std::size_t first) const {
  return ad::LstmParams<T>{params_[first].tensor, params_[first + 1].tensor, params_[first + 2].tensor};
}

template <typename T>
ad::AttentionParams<T> Model<T>::attention_params(std::size_t first) const {
  return ad::AttentionParams<T>{params_[first].tensor, params_[first + 1].tensor};
}

template <typename T>
Tensor<T> Model<T>::conv_block(Tape<T>& tape, const Tensor<T>& x, const ConvBlock& b, Mode mode) {
  auto y = ad::conv1d(tape, x, params_[b.weight].tensor, params_[b.bias].tensor);
  if (b.bn != kNone) {
    auto& s = bn_[b.bn];
    y = ad::batchnorm1d(tape, y, params_[s.gamma].tensor, params_[s.beta].tensor, s.state, mode);
  }
  return ad::relu(tape, y);
}

template <typename T>
Tensor<T> Model<T>::temporal(Tape<T>& tape, const Tensor<T>& z) {
  switch (config_.variant) {
    case Variant::kQsla: {
      const auto h = ad::bilstm(tape, z, lstm(temporal_[0]), lstm(temporal_[0] + 3));
      return ad::attention(tape, h, attention_params(temporal_[1])).output;
    }
    case Variant::kOnlyBilstm: {
      const auto h = ad::bilstm(tape, z, lstm(temporal_[0]), lstm(temporal_[0] + 3));
      return ad::bilstm(tape, h, lstm(temporal_[1]), lstm(temporal_[1] + 3));
    }
    case Variant::kOnlyAttention: {
      const auto a = ad::attention(tape, z, attention_params(temporal_[0])).output;
      return ad::attention(tape, a, attention_params(temporal_[1])).output;
    }
    case Variant::kRefCnn: break;
  }
  throw std::logic_error("temporal block requested for the reference CNN");
}

template <typename T>
Tensor<T> Model<T>::forward(Tape<T>& tape, const QuadBatch<T>& batch, Mode mode, ad::DropoutKey dropout_key) {
  const std::size_t n = batch.size();
  if (batch.iq.dim(2) != config_.input_length) {
    throw ad::ShapeError("model expects frames of length " + std::to_string(config_.input_length) + ", got " +
                         std::to_string(batch.iq.dim(2)));
  }
  const std::size_t pool = config_.pool_stride;

  if (config_.variant == Variant::kRefCnn) {
    auto x = ad::maxpool1d(tape, conv_block(tape, batch.iq, convs_[0], mode), pool, pool);
    x = ad::maxpool1d(tape, conv_block(tape, x, convs_[1], mode), pool, pool);
    x = ad::reshape(tape, x, {n, x.dim(1) * x.dim(2)});
    x = ad::relu(tape, ad::linear(tape, x, params_[dense_hidden_].tensor, params_[dense_hidden_ + 1].tensor));
    return ad::linear(tape, x, params_[dense_].tensor, params_[dense_ + 1].tensor);
  }

  const auto c1 = conv_block(tape, batch.a_phi, convs_[0], mode);
  const auto c2 = conv_block(tape, batch.iq, convs_[1], mode);
  const auto c3 = conv_block(tape, batch.i, convs_[2], mode);
  const auto c4 = conv_block(tape, batch.q, convs_[3], mode);
  const auto c5 = conv_block(tape, ad::concat(tape, {c3, c4}, 1), convs_[4], mode);
  const auto fused = ad::concat(tape, {c1, c2, c5}, 1);
  const auto c6 = conv_block(tape, fused, convs_[5], mode);
  const auto c7 = conv_block(tape, ad::maxpool1d(tape, c6, pool, pool), convs_[6], mode);
  const auto z = ad::transpose_last2(tape, c7);  // [N x T x F]
  auto h = temporal(tape, z);
  h = ad::dropout(tape, h, config_.dropout_p, mode, dropout_key);
  const auto flat = ad::reshape(tape, h, {n, h.dim(1) * h.dim(2)});  // time-major
  return ad::linear(tape, flat, params_[dense_].tensor, params_[dense_ + 1].tensor);
}

template <typename T>
std::size_t Model<T>::dropout_row_elements() const {
  switch (config_.variant) {
    case Variant::kQsla:
    case Variant::kOnlyBilstm: return config_.pooled_length() * 2 * config_.cells();
    case Variant::kOnlyAttention: return config_.pooled_length() * config_.filters();
    case Variant::kRefCnn: break;
  }
  return 0;
}

template <typename T>
LossParts<T> Model<T>::loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels) const {
  auto ce = ad::softmax_cross_entropy(tape, logits, labels);
  LossParts<T> out;
  out.data = ce.loss.item();
  out.probs = ce.probs;
  if (config_.l2_coeff > 0.0) {
    const auto pen = ad::scale(tape, ad::sum_squares(tape, classifier_weight()), static_cast<T>(config_.l2_coeff));
    out.penalty = pen.item();
    out.total = ad::add(tape, ce.loss, pen);
  } else {
    out.total = ce.loss;
  }
  return out;
}

template <typename T>
std::vector<Prediction> Model<T>::predict(std::span<const signal::IQFrame> frames, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("predict: batch_size must be positive");
  std::vector<Prediction> out;
  out.reserve(frames.size());
  for (std::size_t at = 0; at < frames.size(); at += batch_size) {
    const auto chunk = frames.subspan(at, std::min(batch_size, frames.size() - at));
    Tape<T> tape(false);
    const auto probs = ad::softmax(forward(tape, make_batch<T>(chunk), Mode::kEval));
    const std::size_t c = probs.dim(1);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      Prediction p;
      p.probs.assign(probs.data().begin() + r * c, probs.data().begin() + (r + 1) * c);
      p.label = static_cast<int>(std::max_element(p.probs.begin(), p.probs.end()) - p.probs.begin());
      out.push_back(std::move(p));
    }
  }
  return out;
}

template <typename T>
ParamCount Model<T>::count_params() const {
  ParamCount c;
  for (const auto& p : params_) {
    const std::size_t n = p.tensor.size();
    c.total += n;
    if (p.role == ParamRole::kBatchNorm) c.batchnorm += n;
    if (c.per_layer.empty() || c.per_layer.back().layer != p.layer) c.per_layer.push_back({p.layer, 0});
    c.per_layer.back().params += n;
  }
  return c;
}

template <typename T>
ad::WeightManifest Model<T>::to_manifest() const {
  ad::WeightManifest m;
  m.fingerprint = config_.fingerprint();
  auto push = [&](const std::string& name, const Shape& shape, auto values) {
    ad::ManifestRecord r{name, shape, {}};
    r.values.reserve(values.size());
    for (auto v : values) r.values.push_back(static_cast<float>(v));
    m.records.push_back(std::move(r));
  };
  for (const auto& p : params_) push(p.name, p.tensor.shape(), p.tensor.data());
  for (const auto& b : bn_) {
    push(b.layer + ".running_mean", {b.state.running_mean.size()}, std::span<const T>(b.state.running_mean));
    push(b.layer + ".running_var", {b.state.running_var.size()}, std::span<const T>(b.state.running_var));
  }
  return m;
}

template <typename T>
void Model<T>::load(const ad::WeightManifest& m) {
  if (m.fingerprint != config_.fingerprint()) {
    throw ad::ManifestError("manifest fingerprint " + std::to_string(m.fingerprint) +
                            " does not match the model config (" + std::to_string(config_.fingerprint()) + ")");
  }
  const std::size_t expected = params_.size() + 2 * bn_.size();
  if (m.records.size() != expected) {
    throw ad::ManifestError("manifest has " + std::to_string(m.records.size()) + " records, model expects " +
                            std::to_string(expected));
  }
  std::set<std::string> names;
  for (const auto& r : m.records) {
    if (!names.insert(r.name).second) throw ad::ManifestError("manifest repeats record '" + r.name + "'");
  }
  auto fetch = [&](const std::string& name, const Shape& shape) -> const ad::ManifestRecord& {
    const auto* r = m.find(name);
    if (!r) throw ad::ManifestError("manifest lacks '" + name + "'");
    if (r->shape != shape) {
      throw ad::ManifestError("'" + name + "' has shape " + ad::shape_str(r->shape) + ", model expects " +
                              ad::shape_str(shape));
    }
    return *r;
  };
  // Validate everything before mutating anything.
  for (const auto& p : params_) fetch(p.name, p.tensor.shape());
  for (const auto& b : bn_) {
    fetch(b.layer + ".running_mean", {b.state.running_mean.size()});
    fetch(b.layer + ".running_var", {b.state.running_var.size()});
  }
  for (auto& p : params_) {
    const auto& r = fetch(p.name, p.tensor.shape());
    std::transform(r.values.begin(), r.values.end(), p.tensor.data().begin(), [](float v) { return static_cast<T>(v); });
    p.tensor.zero_grad();
  }
  for (auto& b : bn_) {
    const auto& mean = fetch(b.layer + ".running_mean", {b.state.running_mean.size()});
    const auto& var = fetch(b.layer + ".running_var", {b.state.running_var.size()});
    std::transform(mean.values.begin(), mean.values.end(), b.state.running_mean.begin(),
                   [](float v) { return static_cast<T>(v); });
    std::transform(var.values.begin(), var.values.end(), b.state.running_var.begin(),
                   [](float v) { return static_cast<T>(v); });
    b.state.updates = std::max<std::uint64_t>(b.state.updates, 1);
  }
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template class Model<float>;
template class Model<double>;
template QuadBatch<float> make_batch<float>(std::span<const signal::IQFrame>);
template QuadBatch<double> make_batch<double>(std::span<const signal::IQFrame>);
template QuadBatch<float> make_batch<float>(std::span<const signal::IQFrame>, std::span<const std::uint64_t>);
template QuadBatch<double> make_batch<double>(std::span<const signal::IQFrame>, std::span<const std::uint64_t>);

}  // namespace qsla::model
