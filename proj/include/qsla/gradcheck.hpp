// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qsla/tape.hpp"
#include "qsla/tensor.hpp"

namespace qsla::ad {

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

struct GradCheckGroup {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::string name;
  double tolerance = 0.0;
  std::vector<GradCheckGroup> groups;

  double max_rel_error() const;
  bool passed() const { return max_rel_error() < tolerance; }
};

struct GradCheckOptions {
  /// Entries per group to perturb; groups at or below this size are checked
  /// exhaustively, larger ones are sampled.
  std::size_t max_entries = 64;
  std::uint64_t seed = 0;
};

using LossBuilder = std::function<Tensor<double>(Tape<double>&)>;

/// Compares tape gradients with central differences, h = 1e-5 * max(1, |x|).
/// The error for an entry is |analytic - numeric| / max(|analytic|, |numeric|,
/// 1e-2 * s, 1e-6) where s is the largest gradient magnitude in its group,
/// which keeps entries whose true gradient is ~0 (such as a conv bias that
/// feeds batch norm) from dividing by roundoff.
/// `build` must be a pure function of the tensors' current values.
GradCheckReport grad_check(const std::string& name, const LossBuilder& build,
                           const std::vector<NamedTensor>& params, double tolerance,
                           const GradCheckOptions& options = {});

/// Tolerances used by the layer suite.
struct LayerTolerances {
  double linear = 1e-7;
  double conv = 1e-6;
  double recurrent = 1e-4;
  double batchnorm = 1e-4;
  double other = 1e-6;
};

/// One check per layer primitive on small random shapes.
std::vector<GradCheckReport> layer_grad_suite(std::uint64_t seed, const LayerTolerances& tol = {});

}  // namespace qsla::ad
