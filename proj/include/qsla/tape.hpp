// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <initializer_list>
#include <vector>

#include "qsla/tensor.hpp"

namespace qsla::ad {

/// Records operations in execution order so gradients can be propagated in
/// reverse. A tape belongs to one thread for its whole lifetime.
template <typename T>
class Tape {
 public:
  using Rule = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// True when an op over `inputs` must be recorded.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
      if (t->defined() && t->requires_grad()) return true;
    }
    return false;
  }
  bool wants(const std::vector<Tensor<T>>& inputs) const {
    if (!recording_) return false;
    for (const auto& t : inputs) {
      if (t.defined() && t.requires_grad()) return true;
    }
    return false;
  }

  /// Appends a node. `rule` reads the outputs' gradients and accumulates into
  /// the inputs'. Outputs are marked as requiring gradients.
  void record(std::vector<Tensor<T>> outputs, Rule rule) {
    for (auto& o : outputs) o.set_requires_grad(true);
    nodes_.push_back(Node{std::move(outputs), std::move(rule)});
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every reachable rule once, newest
  /// first. Gradients accumulate into whatever buffers already exist.
  void backward(Tensor<T> loss);

 private:
  struct Node {
    std::vector<Tensor<T>> outputs;
    Rule rule;
  };
  bool recording_;
  std::vector<Node> nodes_;
};

template <typename T>
void Tape<T>::backward(Tensor<T> loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward() on a tensor that does not require gradients");
  }
  loss.grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    bool live = false;
    for (const auto& o : it->outputs) live = live || o.has_grad();
    if (live) it->rule();
  }
}

}  // namespace qsla::ad
