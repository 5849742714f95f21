// SPDX-License-Identifier: Apache-2.0
//
// Layer primitives for the reverse-mode engine. Every op takes the tape it
// records onto; when the tape is not recording (or no input requires a
// gradient) the op only computes values.
//
// Layout conventions (row-major):
//   conv/bn/pool activations   [N x C x L]  (a single sample may be [C x L])
//   recurrent sequences        [N x T x F]  (a single sequence may be [T x F])
//   dense inputs               [N x F]
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qsla/tape.hpp"
#include "qsla/tensor.hpp"

namespace qsla::ad {

enum class Mode { kTrain, kEval };
enum class BinaryKind { kAdd, kSub, kMul };
enum class ActivationKind { kRelu, kTanh, kSigmoid };

// ---- elementwise -----------------------------------------------------------

/// Same-shape elementwise op. A single-element operand broadcasts.
template <typename T>
Tensor<T> elementwise(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind);
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(tape, a, b, BinaryKind::kAdd);
}
template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(tape, a, b, BinaryKind::kSub);
}
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(tape, a, b, BinaryKind::kMul);
}
template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

/// Sum of all entries, shape {1}.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);
/// Sum of squared entries, shape {1}.
template <typename T>
Tensor<T> sum_squares(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& x, ActivationKind kind);
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  return activation(tape, x, ActivationKind::kRelu);
}
template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x) {
  return activation(tape, x, ActivationKind::kTanh);
}
template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  return activation(tape, x, ActivationKind::kSigmoid);
}

// ---- dense -----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// x[N x F] * w[F x O] + b[O].
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// ---- shape -----------------------------------------------------------------

/// Copies into a new shape with the same element count (row-major order kept).
template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> concat(Tape<T>& tape, std::span<const Tensor<T>> xs, std::size_t axis);
template <typename T>
Tensor<T> concat(Tape<T>& tape, std::initializer_list<Tensor<T>> xs, std::size_t axis) {
  std::vector<Tensor<T>> v(xs);
  return concat(tape, std::span<const Tensor<T>>(v), axis);
}
/// Half-open range [begin, end) along `axis`; rank preserved.
template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t begin,
                std::size_t end);
/// Index `index` along `axis`, dropping that axis.
template <typename T>
Tensor<T> select(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t index);
/// Stacks equal-shape tensors along a new axis.
template <typename T>
Tensor<T> stack(Tape<T>& tape, std::span<const Tensor<T>> xs, std::size_t axis);
/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose_last2(Tape<T>& tape, const Tensor<T>& x);

// ---- convolutional front-end -----------------------------------------------

/// Stride-1 cross-correlation with `same` zero padding:
///   y[o,t] = b[o] + sum_c sum_k w[o,c,k] * x[c, t + k - K/2]
/// x is [C_in x L] or [N x C_in x L]; w is [C_out x C_in x K], K odd.
template <typename T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Running statistics for one batch-norm layer. Statistics are unset until
/// the first train-mode pass, which seeds them from the batch; later passes
/// blend with `momentum`.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  std::uint64_t updates = 0;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
  bool initialized() const { return updates > 0; }
};

/// Per-channel normalization of x[N x C x L] over the N and L axes.
template <typename T>
Tensor<T> batchnorm1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, BatchNormState<T>& state, Mode mode);

/// Max over windows along the last axis; a trailing partial window is
/// dropped. Gradients go to the first maximal element of each window.
template <typename T>
Tensor<T> maxpool1d(Tape<T>& tape, const Tensor<T>& x, std::size_t window, std::size_t stride);

// ---- recurrent block -------------------------------------------------------

template <typename T>
struct LstmState {
  Tensor<T> hidden;  // [N x H]
  Tensor<T> cell;    // [N x H]
};

/// Gate pre-activations are x*w_input + h*w_hidden + bias, laid out as four
/// column blocks [input | forget | candidate | output] of width H.
template <typename T>
struct LstmParams {
  Tensor<T> w_input;   // [F x 4H]
  Tensor<T> w_hidden;  // [H x 4H]
  Tensor<T> bias;      // [4H]

  std::size_t input_size() const { return w_input.dim(0); }
  std::size_t hidden_size() const { return w_hidden.dim(0); }
};

template <typename T>
LstmState<T> lstm_zero_state(std::size_t batch, std::size_t hidden);

/// One step: C_t = f*C_{t-1} + i*g, H_t = o*tanh(C_t).
template <typename T>
LstmState<T> lstm_cell(Tape<T>& tape, const Tensor<T>& x, const LstmState<T>& prev,
                       const LstmParams<T>& params);

/// Runs one direction over x[N x T x F] from a zero state. With `reverse`
/// the sequence is consumed from T-1 down to 0; output row t is always the
/// hidden state produced at time t. Returns [N x T x H].
template <typename T>
Tensor<T> lstm_sequence(Tape<T>& tape, const Tensor<T>& x, const LstmParams<T>& params,
                        bool reverse);

/// Concatenates forward-time and backward-time hidden states per step:
/// [N x T x F] -> [N x T x 2H]. Rank-2 input is treated as one sequence.
template <typename T>
Tensor<T> bilstm(Tape<T>& tape, const Tensor<T>& x, const LstmParams<T>& forward,
                 const LstmParams<T>& backward);

// ---- attention -------------------------------------------------------------

/// score_t = weight . H_t + bias[t]; alpha = softmax over t; out_t = alpha_t H_t.
template <typename T>
struct AttentionParams {
  Tensor<T> weight;  // [F]
  Tensor<T> bias;    // [T]
};

template <typename T>
struct AttentionOutput {
  Tensor<T> output;   // same shape as the input
  Tensor<T> weights;  // [N x T], values only
};

template <typename T>
AttentionOutput<T> attention(Tape<T>& tape, const Tensor<T>& h, const AttentionParams<T>& params);

// ---- regularization and loss -----------------------------------------------

/// Addresses the dropout mask: element i of the tensor draws from
/// (seed, stream, offset + i).
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t offset = 0;
};

/// Inverted dropout: survivors are scaled by 1/(1-p). Identity in eval mode.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, Mode mode, DropoutKey key);

template <typename T>
struct LossOutput {
  Tensor<T> loss;   // {1}
  Tensor<T> probs;  // [N x C], values only
};

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
LossOutput<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                    std::span<const int> labels);

/// Row-wise max-subtracted softmax of [N x C], no gradient.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

}  // namespace qsla::ad
