// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qsla::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// 64-byte aligned allocation. Vectorized kernels pick their code path from
/// the buffer alignment, so an unaligned heap block would change summation
/// order and break run-to-run reproducibility.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorStorage {
  Shape shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;  // empty until first touched
  bool requires_grad = false;
};

/// Shared handle to an N-dimensional row-major array plus its gradient
/// buffer. Copies alias the same storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<TensorStorage<T>>()) {
    impl_->value.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorStorage<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->value.assign(values.begin(), values.end());
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->value.size(); }

  std::span<T> data() { return impl_->value; }
  std::span<const T> data() const { return impl_->value; }
  T& operator[](std::size_t i) { return impl_->value[i]; }
  const T& operator[](std::size_t i) const { return impl_->value[i]; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Allocates a zero gradient on first access. Gradient buffers are
  /// bookkeeping shared by every handle, so this is available on const
  /// handles too (backward rules capture their operands by value).
  std::span<T> grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T(0));
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorStorage<T>>(*impl_);
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorStorage<T>> impl_;
};

}  // namespace qsla::ad
