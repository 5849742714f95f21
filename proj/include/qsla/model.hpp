// SPDX-License-Identifier: Apache-2.0
//
// The quad-stream BiLSTM-attention classifier, its two ablations, and a
// small reference CNN.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qsla/gradcheck.hpp"
#include "qsla/manifest.hpp"
#include "qsla/ops.hpp"
#include "qsla/signal.hpp"

namespace qsla::model {

using ad::Mode;
using ad::Tape;
using ad::Tensor;

enum class Variant { kQsla, kOnlyBilstm, kOnlyAttention, kRefCnn };

std::string_view variant_name(Variant v);  // "qsla", "only-bilstm", ...
std::optional<Variant> parse_variant(std::string_view name);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct QslaConfig {
  std::size_t conv_filters = 128;
  std::size_t conv_kernel = 3;
  std::size_t fusion_kernel = 1;
  std::size_t pool_stride = 3;
  std::size_t lstm_cells = 128;
  double dropout_p = 0.5;
  double l2_coeff = 1e-4;
  std::size_t num_classes = 10;
  std::size_t input_length = 128;
  double width_scale = 1.0;
  Variant variant = Variant::kQsla;

  void validate() const;  // throws ConfigError
  std::size_t filters() const;      // conv_filters * width_scale
  std::size_t cells() const;        // lstm_cells * width_scale
  std::size_t pooled_length() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are a ConfigError.
  static QslaConfig from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON text.
  std::uint64_t fingerprint() const;
  bool operator==(const QslaConfig&) const = default;
};

/// Network inputs for a batch: [N x 2 x L], [N x 2 x L], [N x 1 x L], [N x 1 x L].
template <typename T>
struct QuadBatch {
  Tensor<T> a_phi, iq, i, q;
  std::size_t size() const { return iq.dim(0); }
};

template <typename T>
QuadBatch<T> make_batch(std::span<const signal::IQFrame> frames);
template <typename T>
QuadBatch<T> make_batch(std::span<const signal::IQFrame> frames, std::span<const std::uint64_t> indices);

enum class ParamRole { kConv, kBatchNorm, kRecurrent, kAttention, kDense };

template <typename T>
struct Param {
  std::string name;   // "<layer>.<tensor>"
  std::string layer;
  ParamRole role;
  Tensor<T> tensor;
};

struct LayerCount {
  std::string layer;
  std::size_t params = 0;
};

struct ParamCount {
  std::size_t total = 0;
  std::size_t batchnorm = 0;
  std::vector<LayerCount> per_layer;  // in registration order
  std::size_t without_batchnorm() const { return total - batchnorm; }
};

struct Prediction {
  std::vector<double> probs;
  int label = 0;
};

template <typename T>
struct LossParts {
  Tensor<T> total;  // data term + penalty, {1}
  T data = T(0);    // mean cross-entropy
  T penalty = T(0); // l2_coeff * ||W_f||^2
  Tensor<T> probs;  // [N x C]
};

/// Owns parameters and batch-norm statistics. Copies are deep.
template <typename T>
class Model {
 public:
  explicit Model(QslaConfig config);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const QslaConfig& config() const { return config_; }

  /// Glorot-uniform conv/attention/dense weights, uniform +-1/sqrt(H) LSTM
  /// weights with forget bias 1, zero biases, unit BN scale, BN running
  /// statistics mean 0 / variance 1.
  void init(std::uint64_t seed);

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }
  const Param<T>& param(const std::string& name) const;
  /// The final dense layer's weights, the only tensor under the L2 penalty.
  const Tensor<T>& classifier_weight() const;

  std::size_t num_batchnorm() const { return bn_.size(); }
  ad::BatchNormState<T>& batchnorm_state(std::size_t i) { return bn_[i].state; }
  const ad::BatchNormState<T>& batchnorm_state(std::size_t i) const { return bn_[i].state; }

  /// Logits [N x C]. Train mode uses batch statistics (and updates the
  /// running ones) and applies dropout keyed by `dropout_key`.
  Tensor<T> forward(Tape<T>& tape, const QuadBatch<T>& batch, Mode mode,
                    ad::DropoutKey dropout_key = {});

  /// Elements per example at the dropout site. A shard starting at row r
  /// passes offset r * dropout_row_elements() to reproduce the full-batch mask.
  std::size_t dropout_row_elements() const;

  /// Mean cross-entropy plus l2_coeff * ||W_f||^2.
  LossParts<T> loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels) const;

  /// Eval-mode class probabilities, processed in chunks of `batch_size`.
  std::vector<Prediction> predict(std::span<const signal::IQFrame> frames, std::size_t batch_size = 256);

  ParamCount count_params() const;

  ad::WeightManifest to_manifest() const;
  /// Shape-exact load; a fingerprint mismatch, missing or surplus record, or
  /// shape difference is a ManifestError.
  void load(const ad::WeightManifest& m);
  std::size_t memory_footprint() const { return ad::encode_manifest(to_manifest()).size(); }

  void zero_grad();

 private:
  struct BnSlot {
    std::string layer;
    std::size_t gamma, beta;  // indices into params_
    ad::BatchNormState<T> state;
  };
  struct ConvBlock {
    std::size_t weight, bias, bn;  // bn == npos for unnormalized blocks
  };

  std::size_t add_param(const std::string& layer, const std::string& tensor, ParamRole role, ad::Shape shape);
  ConvBlock add_conv(const std::string& layer, std::size_t in, std::size_t out, std::size_t kernel,
                     bool with_bn);
  ad::LstmParams<T> lstm(std::size_t first) const;
  ad::AttentionParams<T> attention_params(std::size_t first) const;
  Tensor<T> conv_block(Tape<T>& tape, const Tensor<T>& x, const ConvBlock& b, Mode mode);
  Tensor<T> temporal(Tape<T>& tape, const Tensor<T>& z);

  QslaConfig config_;
  std::vector<Param<T>> params_;
  std::vector<BnSlot> bn_;
  std::vector<ConvBlock> convs_;
  std::vector<std::size_t> temporal_;  // first param index of each temporal block
  std::size_t dense_hidden_ = 0;       // reference CNN only
  std::size_t dense_ = 0;
};

/// The configuration written next to every manifest.
void save_config(const std::string& path, const QslaConfig& config);
QslaConfig load_config(const std::string& path);

/// End-to-end central-difference check of a narrow network (width 1/32,
/// four classes, three frames) in train mode, dropout and L2 included.
ad::GradCheckReport model_grad_check(Variant variant, std::uint64_t seed, double tolerance = 1e-3,
                                     std::size_t max_entries = 16);

}  // namespace qsla::model
