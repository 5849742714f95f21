// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "qsla/gradcheck.hpp"
#include "qsla/ops.hpp"
#include "qsla/rng.hpp"

namespace qsla::ad {
namespace {

Tensor<double> random_tensor(Shape shape, CounterRng& rng) {
  Tensor<double> t(std::move(shape), 0.0, true);
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

TEST(GradCheck, MatmulRandom3x4Times4x2) {
  CounterRng rng(77);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto r = random_tensor({3, 2}, rng);
  r.set_requires_grad(false);
  auto rep = grad_check(
      "matmul", [&](Tape<double>& t) { return sum(t, mul(t, matmul(t, a, b), r)); },
      {{"a", a}, {"b", b}}, 1e-6);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error();
}

TEST(GradCheck, LinearLayerBelow1e7) {
  CounterRng rng(78);
  auto x = random_tensor({5, 6}, rng);
  auto w = random_tensor({6, 4}, rng);
  auto b = random_tensor({4}, rng);
  auto rep = grad_check(
      "linear", [&](Tape<double>& t) { return sum_squares(t, linear(t, x, w, b)); },
      {{"x", x}, {"w", w}, {"b", b}}, 1e-7);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error();
}

TEST(GradCheck, Conv1dTwoChannelsLengthEight) {
  CounterRng rng(79);
  auto x = random_tensor({2, 8}, rng);
  auto w = random_tensor({3, 2, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto r = random_tensor({3, 8}, rng);
  r.set_requires_grad(false);
  auto rep = grad_check(
      "conv1d", [&](Tape<double>& t) { return sum(t, mul(t, conv1d(t, x, w, b), r)); },
      {{"x", x}, {"w", w}, {"b", b}}, 1e-6);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error();
  EXPECT_EQ(rep.groups.size(), 3u);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A rule that deliberately doubles the gradient must be flagged.
  auto x = Tensor<double>::from({2}, {0.5, -0.3}, true);
  auto rep = grad_check(
      "broken",
      [&](Tape<double>& t) {
        Tensor<double> out = Tensor<double>::scalar(x[0] * x[0] + x[1]);
        if (t.wants({&x})) {
          t.record({out}, [x, out]() mutable {
            x.grad()[0] += 4.0 * x[0] * out.grad()[0];
            x.grad()[1] += out.grad()[0];
          });
        }
        return out;
      },
      {{"x", x}}, 1e-6);
  EXPECT_FALSE(rep.passed());
  EXPECT_GT(rep.max_rel_error(), 0.4);
}

TEST(GradCheck, LayerSuitePassesForTwentySeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& rep : layer_grad_suite(seed)) {
      EXPECT_TRUE(rep.passed()) << "seed " << seed << " " << rep.name << " error "
                                << rep.max_rel_error() << " tol " << rep.tolerance;
    }
  }
}

}  // namespace
}  // namespace qsla::ad
