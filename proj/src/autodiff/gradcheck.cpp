// SPDX-License-Identifier: Apache-2.0
#include "qsla/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qsla/ops.hpp"
#include "qsla/rng.hpp"

namespace qsla::ad {

namespace {
// Below this, analytic and numeric values are both finite-difference noise
// (roundoff / h is about 1e-11 for unit-scale losses).
constexpr double kAbsoluteFloor = 1e-6;
}  // namespace

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& g : groups) worst = std::max(worst, g.max_rel_error);
  return worst;
}

GradCheckReport grad_check(const std::string& name, const LossBuilder& build,
                           const std::vector<NamedTensor>& params, double tolerance,
                           const GradCheckOptions& options) {
  for (const auto& p : params) {
    auto t = p.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> loss = build(tape);
    tape.backward(loss);
  }

  GradCheckReport report{name, tolerance, {}};
  CounterRng rng = CounterRng::derive(options.seed, {0x67726164ULL});
  for (const auto& p : params) {
    Tensor<double> t = p.tensor;
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > options.max_entries) {
      shuffle(idx, rng);
      idx.resize(options.max_entries);
      std::sort(idx.begin(), idx.end());
    }

    std::vector<double> numeric;
    numeric.reserve(idx.size());
    for (std::size_t i : idx) {
      const double orig = t[i];
      const double h = 1e-5 * std::max(1.0, std::abs(orig));
      Tape<double> off(false);
      t[i] = orig + h;
      const double fp = build(off).item();
      t[i] = orig - h;
      const double fm = build(off).item();
      t[i] = orig;
      numeric.push_back((fp - fm) / (2.0 * h));
    }

    double scale = 0.0;
    for (double a : analytic) scale = std::max(scale, std::abs(a));
    for (double n : numeric) scale = std::max(scale, std::abs(n));
    const double floor = std::max(1e-2 * scale, kAbsoluteFloor);

    GradCheckGroup group{p.name, idx.size(), 0.0};
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double a = analytic[idx[j]];
      const double n = numeric[j];
      const double denom = std::max({std::abs(a), std::abs(n), floor});
      group.max_rel_error = std::max(group.max_rel_error, std::abs(a - n) / denom);
    }
    if (scale == 0.0) group.max_rel_error = 0.0;
    report.groups.push_back(group);
  }
  return report;
}

namespace {

Tensor<double> random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape), 0.0, true);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Scalar loss sum(out * r) for fixed random r so every output entry matters.
Tensor<double> project(Tape<double>& tape, const Tensor<double>& out, const Tensor<double>& r) {
  return sum(tape, mul(tape, out, r));
}

Tensor<double> projection_for(const Shape& shape, CounterRng& rng) {
  auto r = random_tensor(shape, rng);
  r.set_requires_grad(false);
  return r;
}

}  // namespace

std::vector<GradCheckReport> layer_grad_suite(std::uint64_t seed, const LayerTolerances& tol) {
  std::vector<GradCheckReport> out;
  CounterRng rng = CounterRng::derive(seed, {0x6c61796572ULL});
  GradCheckOptions opts{64, seed};

  {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto r = projection_for({3, 4}, rng);
    for (auto kind : {BinaryKind::kAdd, BinaryKind::kSub, BinaryKind::kMul}) {
      const char* nm = kind == BinaryKind::kAdd ? "elementwise.add"
                       : kind == BinaryKind::kSub ? "elementwise.sub"
                                                  : "elementwise.mul";
      out.push_back(grad_check(
          nm, [&, kind](Tape<double>& t) { return project(t, elementwise(t, a, b, kind), r); },
          {{"a", a}, {"b", b}}, tol.linear, opts));
    }
  }
  {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto r = projection_for({3, 2}, rng);
    out.push_back(grad_check(
        "matmul", [&](Tape<double>& t) { return project(t, matmul(t, a, b), r); },
        {{"a", a}, {"b", b}}, tol.linear, opts));
  }
  {
    auto x = random_tensor({4, 5}, rng);
    auto w = random_tensor({5, 3}, rng);
    auto b = random_tensor({3}, rng);
    auto r = projection_for({4, 3}, rng);
    out.push_back(grad_check(
        "linear", [&](Tape<double>& t) { return project(t, linear(t, x, w, b), r); },
        {{"x", x}, {"w", w}, {"b", b}}, tol.linear, opts));
  }
  {
    auto x = random_tensor({2, 2, 8}, rng);
    auto w = random_tensor({3, 2, 3}, rng);
    auto b = random_tensor({3}, rng);
    auto r = projection_for({2, 3, 8}, rng);
    out.push_back(grad_check(
        "conv1d", [&](Tape<double>& t) { return project(t, conv1d(t, x, w, b), r); },
        {{"x", x}, {"w", w}, {"b", b}}, tol.conv, opts));
  }
  {
    auto x = random_tensor({3, 2, 5}, rng, -2.0, 2.0);
    auto gamma = random_tensor({2}, rng, 0.5, 1.5);
    auto beta = random_tensor({2}, rng);
    auto r = projection_for({3, 2, 5}, rng);
    BatchNormState<double> state(2);
    out.push_back(grad_check(
        "batchnorm1d.train",
        [&](Tape<double>& t) {
          return project(t, batchnorm1d(t, x, gamma, beta, state, Mode::kTrain), r);
        },
        {{"x", x}, {"gamma", gamma}, {"beta", beta}}, tol.batchnorm, opts));
    out.push_back(grad_check(
        "batchnorm1d.eval",
        [&](Tape<double>& t) {
          return project(t, batchnorm1d(t, x, gamma, beta, state, Mode::kEval), r);
        },
        {{"x", x}, {"gamma", gamma}, {"beta", beta}}, tol.batchnorm, opts));
  }
  {
    auto x = random_tensor({2, 3, 9}, rng);
    auto r = projection_for({2, 3, 3}, rng);
    out.push_back(grad_check(
        "maxpool1d", [&](Tape<double>& t) { return project(t, maxpool1d(t, x, 3, 3), r); },
        {{"x", x}}, tol.other, opts));
  }
  for (auto kind : {ActivationKind::kRelu, ActivationKind::kTanh, ActivationKind::kSigmoid}) {
    auto x = random_tensor({12}, rng, -2.0, 2.0);
    // Keep relu inputs away from the kink.
    if (kind == ActivationKind::kRelu) {
      for (auto& v : x.data()) v = v >= 0 ? v + 0.1 : v - 0.1;
    }
    auto r = projection_for({12}, rng);
    const char* nm = kind == ActivationKind::kRelu   ? "activation.relu"
                     : kind == ActivationKind::kTanh ? "activation.tanh"
                                                     : "activation.sigmoid";
    out.push_back(grad_check(
        nm, [&, kind](Tape<double>& t) { return project(t, activation(t, x, kind), r); },
        {{"x", x}}, tol.linear, opts));
  }
  {
    auto a = random_tensor({2, 1, 4}, rng);
    auto b = random_tensor({2, 3, 4}, rng);
    auto r = projection_for({2, 4, 4}, rng);
    out.push_back(grad_check(
        "concat", [&](Tape<double>& t) { return project(t, concat(t, {a, b}, 1), r); },
        {{"a", a}, {"b", b}}, tol.linear, opts));
  }
  {
    auto x = random_tensor({2, 3, 4}, rng);
    auto r = projection_for({2, 12}, rng);
    out.push_back(grad_check(
        "reshape.transpose",
        [&](Tape<double>& t) { return project(t, reshape(t, transpose_last2(t, x), {2, 12}), r); },
        {{"x", x}}, tol.linear, opts));
  }
  {
    const std::size_t batch = 2, in = 3, hid = 4;
    LstmParams<double> p{random_tensor({in, 4 * hid}, rng), random_tensor({hid, 4 * hid}, rng),
                         random_tensor({4 * hid}, rng)};
    std::vector<Tensor<double>> xs;
    for (int s = 0; s < 4; ++s) xs.push_back(random_tensor({batch, in}, rng));
    auto h0 = random_tensor({batch, hid}, rng);
    auto c0 = random_tensor({batch, hid}, rng);
    auto rh = projection_for({batch, hid}, rng);
    auto rc = projection_for({batch, hid}, rng);
    out.push_back(grad_check(
        "lstm_cell.unrolled4",
        [&](Tape<double>& t) {
          LstmState<double> s{h0, c0};
          for (const auto& x : xs) s = lstm_cell(t, x, s, p);
          return add(t, project(t, s.hidden, rh), project(t, s.cell, rc));
        },
        {{"x0", xs[0]}, {"h0", h0}, {"c0", c0}, {"w_input", p.w_input}, {"w_hidden", p.w_hidden},
         {"bias", p.bias}},
        tol.recurrent, opts));
  }
  {
    const std::size_t batch = 2, steps = 5, in = 3, hid = 3;
    auto mk = [&] {
      return LstmParams<double>{random_tensor({in, 4 * hid}, rng),
                                random_tensor({hid, 4 * hid}, rng), random_tensor({4 * hid}, rng)};
    };
    auto fw = mk();
    auto bw = mk();
    auto x = random_tensor({batch, steps, in}, rng);
    auto r = projection_for({batch, steps, 2 * hid}, rng);
    out.push_back(grad_check(
        "bilstm", [&](Tape<double>& t) { return project(t, bilstm(t, x, fw, bw), r); },
        {{"x", x}, {"fw.w_input", fw.w_input}, {"fw.w_hidden", fw.w_hidden}, {"fw.bias", fw.bias},
         {"bw.w_input", bw.w_input}, {"bw.w_hidden", bw.w_hidden}, {"bw.bias", bw.bias}},
        tol.recurrent, opts));
  }
  {
    auto h = random_tensor({2, 5, 4}, rng);
    AttentionParams<double> p{random_tensor({4}, rng), random_tensor({5}, rng)};
    auto r = projection_for({2, 5, 4}, rng);
    out.push_back(grad_check(
        "attention", [&](Tape<double>& t) { return project(t, attention(t, h, p).output, r); },
        {{"h", h}, {"weight", p.weight}, {"bias", p.bias}}, tol.other, opts));
  }
  {
    auto x = random_tensor({4, 6}, rng);
    auto r = projection_for({4, 6}, rng);
    const DropoutKey key{seed, 7, 0};
    out.push_back(grad_check(
        "dropout.train",
        [&](Tape<double>& t) { return project(t, dropout(t, x, 0.5, Mode::kTrain, key), r); },
        {{"x", x}}, tol.linear, opts));
  }
  {
    auto logits = random_tensor({4, 5}, rng, -2.0, 2.0);
    const std::vector<int> labels{0, 3, 4, 1};
    out.push_back(grad_check(
        "softmax_cross_entropy",
        [&](Tape<double>& t) { return softmax_cross_entropy(t, logits, labels).loss; },
        {{"logits", logits}}, tol.other, opts));
  }
  {
    auto w = random_tensor({3, 4}, rng);
    out.push_back(grad_check(
        "sum_squares", [&](Tape<double>& t) { return sum_squares(t, w); }, {{"w", w}}, tol.linear,
        opts));
  }
  return out;
}

}  // namespace qsla::ad
