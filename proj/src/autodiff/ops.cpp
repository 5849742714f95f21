// SPDX-License-Identifier: Apache-2.0
#include "qsla/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "kernels.hpp"
#include "qsla/rng.hpp"

namespace qsla::ad {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

using kernels::gemm_acc;

[[noreturn]] void shape_fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op, const char* name) {
  if (x.rank() != rank) {
    shape_fail(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                       shape_str(x.shape()));
  }
}

#ifndef NDEBUG
template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T a) { return std::isfinite(a); });
}
template <typename T>
void debug_check_finite(const char* op, const Tensor<T>& out,
                        std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* in : inputs) {
    if (in->defined() && !all_finite(in->data())) return;
  }
  if (!all_finite(out.data())) throw std::runtime_error(std::string(op) + ": non-finite output");
}
#else
template <typename T>
void debug_check_finite(const char*, const Tensor<T>&, std::initializer_list<const Tensor<T>*>) {}
#endif

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};
AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

template <typename T>
T sigmoid_scalar(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> elementwise(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = !same && a.size() == 1;
  const bool b_scalar = !same && b.size() == 1;
  if (!same && !a_scalar && !b_scalar) {
    shape_fail("elementwise", "shape mismatch " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
  }
  Tensor<T> out(a_scalar ? b.shape() : a.shape());
  const std::size_t n = out.size();
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[a_scalar ? 0 : i];
    const T y = bv[b_scalar ? 0 : i];
    switch (kind) {
      case BinaryKind::kAdd: ov[i] = x + y; break;
      case BinaryKind::kSub: ov[i] = x - y; break;
      case BinaryKind::kMul: ov[i] = x * y; break;
    }
  }
  if (tape.wants({&a, &b})) {
    tape.record({out}, [a, b, out, kind, a_scalar, b_scalar]() mutable {
      auto g = out.grad();
      const std::size_t n = g.size();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < n; ++i) {
          const T d = kind == BinaryKind::kMul ? g[i] * b[b_scalar ? 0 : i] : g[i];
          ga[a_scalar ? 0 : i] += d;
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < n; ++i) {
          T d = g[i];
          if (kind == BinaryKind::kSub) d = -d;
          if (kind == BinaryKind::kMul) d = g[i] * a[a_scalar ? 0 : i];
          gb[b_scalar ? 0 : i] += d;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  if (tape.wants({&x})) {
    tape.record({out}, [x, out, factor]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (tape.wants({&x})) {
    tape.record({out}, [x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& gx : x.grad()) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_squares(Tape<T>& tape, const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v * v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (tape.wants({&x})) {
    tape.record({out}, [x, out]() mutable {
      const T g = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += T(2) * x[i] * g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& x, ActivationKind kind) {
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  switch (kind) {
    case ActivationKind::kRelu:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] < T(0) ? T(0) : xv[i];
      break;
    case ActivationKind::kTanh:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
      break;
    case ActivationKind::kSigmoid:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = sigmoid_scalar(xv[i]);
      break;
  }
  if (tape.wants({&x})) {
    tape.record({out}, [x, out, kind]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T y = out[i];
        T d;
        switch (kind) {
          case ActivationKind::kRelu: d = x[i] > T(0) ? T(1) : T(0); break;
          case ActivationKind::kTanh: d = T(1) - y * y; break;
          default: d = y * (T(1) - y); break;
        }
        gx[i] += g[i] * d;
      }
    });
  }
  return out;
}

// ---- dense -----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    shape_fail("matmul", "inner dimensions disagree: " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
  }
  Tensor<T> out({m, n});
  gemm_acc(false, false, m, n, k, a.data().data(), b.data().data(), out.data().data());
  if (tape.wants({&a, &b})) {
    tape.record({out}, [a, b, out, m, n, k]() mutable {
      const T* g = out.grad().data();
      if (a.requires_grad()) gemm_acc(false, true, m, k, n, g, b.data().data(), a.grad().data());
      if (b.requires_grad()) gemm_acc(true, false, k, n, m, a.data().data(), g, b.grad().data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in || b.size() != out_dim) {
    shape_fail("linear", "input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                             ", bias " + shape_str(b.shape()));
  }
  Tensor<T> out({batch, out_dim});
  auto ov = out.data();
  for (std::size_t r = 0; r < batch; ++r) {
    std::copy(b.data().begin(), b.data().end(), ov.begin() + r * out_dim);
  }
  gemm_acc(false, false, batch, out_dim, in, x.data().data(), w.data().data(), ov.data());
  debug_check_finite("linear", out, {&x, &w, &b});
  if (tape.wants({&x, &w, &b})) {
    tape.record({out}, [x, w, b, out, batch, in, out_dim]() mutable {
      const T* g = out.grad().data();
      if (x.requires_grad()) {
        gemm_acc(false, true, batch, in, out_dim, g, w.data().data(), x.grad().data());
      }
      if (w.requires_grad()) {
        gemm_acc(true, false, in, out_dim, batch, x.data().data(), g, w.grad().data());
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
        }
      }
    });
  }
  return out;
}

// ---- shape -----------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out = Tensor<T>::from(std::move(shape), {x.data().begin(), x.data().end()});
  if (tape.wants({&x})) {
    tape.record({out}, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, std::span<const Tensor<T>> xs, std::size_t axis) {
  if (xs.empty()) shape_fail("concat", "no inputs");
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) shape_fail("concat", "axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != first.size()) shape_fail("concat", "rank mismatch " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        shape_fail("concat", "non-concat dimension mismatch " + shape_str(first) + " vs " +
                                 shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  Tensor<T> out(out_shape);
  const AxisView ov = axis_view(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const AxisView xv = axis_view(x.shape(), axis);
    const std::size_t block = xv.extent * xv.inner;
    for (std::size_t o = 0; o < xv.outer; ++o) {
      std::copy_n(x.data().begin() + o * block, block,
                  out.data().begin() + (o * ov.extent + off) * ov.inner);
    }
    off += xv.extent;
  }
  std::vector<Tensor<T>> inputs(xs.begin(), xs.end());
  if (tape.wants(inputs)) {
    tape.record({out}, [inputs, offsets, out, axis]() mutable {
      const Shape& os = out.shape();
      const AxisView ov = axis_view(os, axis);
      auto g = out.grad();
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto& x = inputs[i];
        if (!x.requires_grad()) continue;
        const AxisView xv = axis_view(x.shape(), axis);
        const std::size_t block = xv.extent * xv.inner;
        auto gx = x.grad();
        for (std::size_t o = 0; o < xv.outer; ++o) {
          const T* src = g.data() + (o * ov.extent + offsets[i]) * ov.inner;
          T* dst = gx.data() + o * block;
          for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t begin,
                std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    shape_fail("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape s = x.shape();
  s[axis] = end - begin;
  Tensor<T> out(s);
  const AxisView xv = axis_view(x.shape(), axis);
  const std::size_t len = (end - begin) * xv.inner;
  for (std::size_t o = 0; o < xv.outer; ++o) {
    std::copy_n(x.data().begin() + (o * xv.extent + begin) * xv.inner, len,
                out.data().begin() + o * len);
  }
  if (tape.wants({&x})) {
    tape.record({out}, [x, out, xv, begin, len]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < xv.outer; ++o) {
        T* dst = gx.data() + (o * xv.extent + begin) * xv.inner;
        const T* src = g.data() + o * len;
        for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> select(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t index) {
  if (axis >= x.rank() || index >= x.dim(axis)) {
    shape_fail("select", "index " + std::to_string(index) + " on axis " + std::to_string(axis) +
                             " of " + shape_str(x.shape()));
  }
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(s);
  const AxisView xv = axis_view(x.shape(), axis);
  for (std::size_t o = 0; o < xv.outer; ++o) {
    std::copy_n(x.data().begin() + (o * xv.extent + index) * xv.inner, xv.inner,
                out.data().begin() + o * xv.inner);
  }
  if (tape.wants({&x})) {
    tape.record({out}, [x, out, xv, index]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < xv.outer; ++o) {
        T* dst = gx.data() + (o * xv.extent + index) * xv.inner;
        const T* src = g.data() + o * xv.inner;
        for (std::size_t j = 0; j < xv.inner; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> stack(Tape<T>& tape, std::span<const Tensor<T>> xs, std::size_t axis) {
  if (xs.empty()) shape_fail("stack", "no inputs");
  const Shape& first = xs[0].shape();
  if (axis > first.size()) shape_fail("stack", "axis out of range");
  for (const auto& x : xs) {
    if (x.shape() != first) {
      shape_fail("stack", "shape mismatch " + shape_str(first) + " vs " + shape_str(x.shape()));
    }
  }
  Shape s = first;
  s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), xs.size());
  Tensor<T> out(s);
  const AxisView ov = axis_view(s, axis);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(xs[i].data().begin() + o * ov.inner, ov.inner,
                  out.data().begin() + (o * ov.extent + i) * ov.inner);
    }
  }
  std::vector<Tensor<T>> inputs(xs.begin(), xs.end());
  if (tape.wants(inputs)) {
    tape.record({out}, [inputs, out, ov]() mutable {
      auto g = out.grad();
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) continue;
        auto gx = inputs[i].grad();
        for (std::size_t o = 0; o < ov.outer; ++o) {
          const T* src = g.data() + (o * ov.extent + i) * ov.inner;
          T* dst = gx.data() + o * ov.inner;
          for (std::size_t j = 0; j < ov.inner; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() < 2) shape_fail("transpose_last2", "rank < 2: " + shape_str(x.shape()));
  Shape s = x.shape();
  const std::size_t rows = s[s.size() - 2], cols = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  const std::size_t outer = x.size() / (rows * cols);
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = x.data().data() + o * rows * cols;
    T* dst = out.data().data() + o * rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
  if (tape.wants({&x})) {
    tape.record({out}, [x, out, outer, rows, cols]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = g.data() + o * rows * cols;
        T* dst = gx.data() + o * rows * cols;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] += src[c * rows + r];
        }
      }
    });
  }
  return out;
}

// ---- convolutional front-end -----------------------------------------------

template <typename T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const bool single = x.rank() == 2;
  if (!single) require_rank(x, 3, "conv1d", "input");
  require_rank(w, 3, "conv1d", "weight");
  const std::size_t batch = single ? 1 : x.dim(0);
  const std::size_t c_in = x.dim(single ? 0 : 1);
  const std::size_t len = x.dim(single ? 1 : 2);
  const std::size_t c_out = w.dim(0), k_size = w.dim(2);
  if (w.dim(1) != c_in) {
    shape_fail("conv1d", "input has " + std::to_string(c_in) + " channels but weight " +
                             shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  if (k_size % 2 == 0) shape_fail("conv1d", "same padding needs an odd kernel, got " +
                                                std::to_string(k_size));
  if (b.size() != c_out) shape_fail("conv1d", "bias " + shape_str(b.shape()) + " for " +
                                                  std::to_string(c_out) + " filters");
  const auto half = static_cast<std::ptrdiff_t>(k_size / 2);
  const auto L = static_cast<std::ptrdiff_t>(len);

  Tensor<T> out(single ? Shape{c_out, len} : Shape{batch, c_out, len});
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  const T* bv = b.data().data();
  T* yv = out.data().data();
  // Accumulation order per output element is (c, k) ascending, then bias.
  for (std::size_t n = 0; n < batch; ++n) {
    const T* xs = xv + n * c_in * len;
    for (std::size_t o = 0; o < c_out; ++o) {
      T* yo = yv + (n * c_out + o) * len;
      for (std::size_t c = 0; c < c_in; ++c) {
        const T* xc = xs + c * len;
        for (std::size_t k = 0; k < k_size; ++k) {
          const T wk = wv[(o * c_in + c) * k_size + k];
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - half;
          const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -shift);
          const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(L, L - shift);
          const T* src = xc + shift;
          for (std::ptrdiff_t t = t0; t < t1; ++t) yo[t] += wk * src[t];
        }
      }
      const T bo = bv[o];
      for (std::size_t t = 0; t < len; ++t) yo[t] += bo;
    }
  }
  debug_check_finite("conv1d", out, {&x, &w, &b});

  if (tape.wants({&x, &w, &b})) {
    tape.record({out}, [x, w, b, out, batch, c_in, c_out, len, k_size, half]() mutable {
      const std::size_t rows = c_in * k_size;
      const auto L = static_cast<std::ptrdiff_t>(len);
      AlignedVector<T> col(rows * len);
      AlignedVector<T> dcol(rows * len);
      const T* g = out.grad().data();
      const T* xv = x.data().data();
      T* gw = w.requires_grad() ? w.grad().data() : nullptr;
      T* gx = x.requires_grad() ? x.grad().data() : nullptr;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* gn = g + n * c_out * len;
        if (b.requires_grad()) {
          auto gb = b.grad();
          for (std::size_t o = 0; o < c_out; ++o) {
            T s = T(0);
            for (std::size_t t = 0; t < len; ++t) s += gn[o * len + t];
            gb[o] += s;
          }
        }
        if (gw) {
          const T* xs = xv + n * c_in * len;
          std::fill(col.begin(), col.end(), T(0));
          for (std::size_t c = 0; c < c_in; ++c) {
            for (std::size_t k = 0; k < k_size; ++k) {
              const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - half;
              T* row = col.data() + (c * k_size + k) * len;
              for (std::ptrdiff_t t = std::max<std::ptrdiff_t>(0, -shift);
                   t < std::min<std::ptrdiff_t>(L, L - shift); ++t) {
                row[t] = xs[c * len + static_cast<std::size_t>(t + shift)];
              }
            }
          }
          gemm_acc(false, true, c_out, rows, len, gn, col.data(), gw);
        }
        if (gx) {
          std::fill(dcol.begin(), dcol.end(), T(0));
          gemm_acc(true, false, rows, len, c_out, w.data().data(), gn, dcol.data());
          T* gxs = gx + n * c_in * len;
          for (std::size_t c = 0; c < c_in; ++c) {
            for (std::size_t k = 0; k < k_size; ++k) {
              const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - half;
              const T* row = dcol.data() + (c * k_size + k) * len;
              for (std::ptrdiff_t t = std::max<std::ptrdiff_t>(0, -shift);
                   t < std::min<std::ptrdiff_t>(L, L - shift); ++t) {
                gxs[c * len + static_cast<std::size_t>(t + shift)] += row[t];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, BatchNormState<T>& state, Mode mode) {
  require_rank(x, 3, "batchnorm1d", "input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), len = x.dim(2);
  if (gamma.size() != channels || beta.size() != channels) {
    shape_fail("batchnorm1d", "gamma/beta " + shape_str(gamma.shape()) + "/" +
                                  shape_str(beta.shape()) + " for " + std::to_string(channels) +
                                  " channels");
  }
  if (state.running_mean.size() != channels || state.running_var.size() != channels) {
    shape_fail("batchnorm1d", "running statistics sized for " +
                                  std::to_string(state.running_mean.size()) + " channels");
  }
  const std::size_t m = batch * len;
  const bool train = mode == Mode::kTrain;
  if (train && m < 2) {
    throw std::invalid_argument("batchnorm1d: train mode needs at least 2 values per channel");
  }
  if (!train && !state.initialized()) {
    throw std::logic_error("batchnorm1d: eval mode before any training update");
  }

  Tensor<T> out(x.shape());
  AlignedVector<T> xhat(x.size());
  std::vector<T> inv_std(channels);
  const T* xv = x.data().data();
  for (std::size_t c = 0; c < channels; ++c) {
    T mean, var;
    if (train) {
      T s = T(0);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* row = xv + (n * channels + c) * len;
        for (std::size_t t = 0; t < len; ++t) s += row[t];
      }
      mean = s / static_cast<T>(m);
      T ss = T(0);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* row = xv + (n * channels + c) * len;
        for (std::size_t t = 0; t < len; ++t) ss += (row[t] - mean) * (row[t] - mean);
      }
      var = ss / static_cast<T>(m);
      const T unbiased = ss / static_cast<T>(m - 1);
      if (state.updates == 0) {
        state.running_mean[c] = mean;
        state.running_var[c] = unbiased;
      } else {
        state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mean;
        state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
      }
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    inv_std[c] = T(1) / std::sqrt(var + state.eps);
    const T gm = gamma[c], bt = beta[c];
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t base = (n * channels + c) * len;
      for (std::size_t t = 0; t < len; ++t) {
        const T h = (xv[base + t] - mean) * inv_std[c];
        xhat[base + t] = h;
        out[base + t] = gm * h + bt;
      }
    }
  }
  if (train) ++state.updates;

  if (tape.wants({&x, &gamma, &beta})) {
    tape.record({out}, [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std),
                        batch, channels, len, m, train]() mutable {
      const T* g = out.grad().data();
      for (std::size_t c = 0; c < channels; ++c) {
        T sum_g = T(0), sum_gh = T(0);
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t base = (n * channels + c) * len;
          for (std::size_t t = 0; t < len; ++t) {
            sum_g += g[base + t];
            sum_gh += g[base + t] * xhat[base + t];
          }
        }
        if (gamma.requires_grad()) gamma.grad()[c] += sum_gh;
        if (beta.requires_grad()) beta.grad()[c] += sum_g;
        if (!x.requires_grad()) continue;
        auto gx = x.grad();
        const T gm = gamma[c];
        const T mm = static_cast<T>(m);
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t base = (n * channels + c) * len;
          for (std::size_t t = 0; t < len; ++t) {
            if (train) {
              // dx = gamma * inv_std / m * (m*g - sum(g) - xhat*sum(g*xhat))
              gx[base + t] += gm * inv_std[c] / mm *
                              (mm * g[base + t] - sum_g - xhat[base + t] * sum_gh);
            } else {
              gx[base + t] += gm * inv_std[c] * g[base + t];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> maxpool1d(Tape<T>& tape, const Tensor<T>& x, std::size_t window, std::size_t stride) {
  if (x.rank() < 1 || window == 0 || stride == 0) shape_fail("maxpool1d", "bad arguments");
  const std::size_t len = x.dim(x.rank() - 1);
  if (len < window) {
    shape_fail("maxpool1d", "length " + std::to_string(len) + " shorter than window " +
                                std::to_string(window));
  }
  const std::size_t out_len = (len - window) / stride + 1;
  const std::size_t rows = x.size() / len;
  Shape s = x.shape();
  s.back() = out_len;
  Tensor<T> out(s);
  std::vector<std::size_t> argmax(rows * out_len);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data().data() + r * len;
    for (std::size_t j = 0; j < out_len; ++j) {
      std::size_t best = j * stride;
      for (std::size_t q = best + 1; q < j * stride + window; ++q) {
        // A NaN in the window wins so non-finite inputs are never hidden.
        if (std::isnan(src[best])) break;
        if (src[q] > src[best] || std::isnan(src[q])) best = q;
      }
      argmax[r * out_len + j] = r * len + best;
      out[r * out_len + j] = src[best];
    }
  }
  if (tape.wants({&x})) {
    tape.record({out}, [x, out, argmax = std::move(argmax)]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
    });
  }
  return out;
}

// ---- recurrent block -------------------------------------------------------

template <typename T>
LstmState<T> lstm_zero_state(std::size_t batch, std::size_t hidden) {
  return {Tensor<T>({batch, hidden}), Tensor<T>({batch, hidden})};
}

template <typename T>
LstmState<T> lstm_cell(Tape<T>& tape, const Tensor<T>& x, const LstmState<T>& prev,
                       const LstmParams<T>& params) {
  require_rank(x, 2, "lstm_cell", "input");
  const std::size_t batch = x.dim(0), in = x.dim(1);
  const std::size_t hid = params.hidden_size();
  const std::size_t g4 = 4 * hid;
  if (params.w_input.shape() != Shape{in, g4} || params.w_hidden.shape() != Shape{hid, g4} ||
      params.bias.size() != g4) {
    shape_fail("lstm_cell", "input " + shape_str(x.shape()) + " with w_input " +
                                shape_str(params.w_input.shape()) + ", w_hidden " +
                                shape_str(params.w_hidden.shape()) + ", bias " +
                                shape_str(params.bias.shape()));
  }
  if (prev.hidden.shape() != Shape{batch, hid} || prev.cell.shape() != Shape{batch, hid}) {
    shape_fail("lstm_cell", "previous state " + shape_str(prev.hidden.shape()) + "/" +
                                shape_str(prev.cell.shape()) + " for batch " +
                                std::to_string(batch) + ", hidden " + std::to_string(hid));
  }

  // acts holds [i | f | g | o] after their nonlinearities.
  AlignedVector<T> acts(batch * g4);
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy(params.bias.data().begin(), params.bias.data().end(), acts.begin() + n * g4);
  }
  gemm_acc(false, false, batch, g4, in, x.data().data(), params.w_input.data().data(), acts.data());
  gemm_acc(false, false, batch, g4, hid, prev.hidden.data().data(), params.w_hidden.data().data(),
           acts.data());

  LstmState<T> next{Tensor<T>({batch, hid}), Tensor<T>({batch, hid})};
  AlignedVector<T> tanh_c(batch * hid);
  for (std::size_t n = 0; n < batch; ++n) {
    T* a = acts.data() + n * g4;
    for (std::size_t j = 0; j < hid; ++j) {
      a[j] = sigmoid_scalar(a[j]);
      a[hid + j] = sigmoid_scalar(a[hid + j]);
      a[2 * hid + j] = std::tanh(a[2 * hid + j]);
      a[3 * hid + j] = sigmoid_scalar(a[3 * hid + j]);
      const std::size_t idx = n * hid + j;
      const T c = a[hid + j] * prev.cell[idx] + a[j] * a[2 * hid + j];
      next.cell[idx] = c;
      tanh_c[idx] = std::tanh(c);
      next.hidden[idx] = a[3 * hid + j] * tanh_c[idx];
    }
  }

  const Tensor<T>& h_prev = prev.hidden;
  const Tensor<T>& c_prev = prev.cell;
  if (tape.wants({&x, &h_prev, &c_prev, &params.w_input, &params.w_hidden, &params.bias})) {
    tape.record({next.hidden, next.cell},
                [x, h_prev, c_prev, params, h = next.hidden, c = next.cell,
                 acts = std::move(acts), tanh_c = std::move(tanh_c), batch, in, hid,
                 g4]() mutable {
                  AlignedVector<T> dpre(batch * g4);
                  const bool has_dh = h.has_grad(), has_dc = c.has_grad();
                  for (std::size_t n = 0; n < batch; ++n) {
                    const T* a = acts.data() + n * g4;
                    T* d = dpre.data() + n * g4;
                    for (std::size_t j = 0; j < hid; ++j) {
                      const std::size_t idx = n * hid + j;
                      const T dh = has_dh ? h.grad()[idx] : T(0);
                      const T tc = tanh_c[idx];
                      const T ig = a[j], fg = a[hid + j], gg = a[2 * hid + j], og = a[3 * hid + j];
                      const T dc = (has_dc ? c.grad()[idx] : T(0)) + dh * og * (T(1) - tc * tc);
                      d[j] = dc * gg * ig * (T(1) - ig);
                      d[hid + j] = dc * c_prev[idx] * fg * (T(1) - fg);
                      d[2 * hid + j] = dc * ig * (T(1) - gg * gg);
                      d[3 * hid + j] = dh * tc * og * (T(1) - og);
                      if (c_prev.requires_grad()) c_prev.grad()[idx] += dc * fg;
                    }
                  }
                  if (params.w_input.requires_grad()) {
                    gemm_acc(true, false, in, g4, batch, x.data().data(), dpre.data(),
                             params.w_input.grad().data());
                  }
                  if (params.w_hidden.requires_grad()) {
                    gemm_acc(true, false, hid, g4, batch, h_prev.data().data(), dpre.data(),
                             params.w_hidden.grad().data());
                  }
                  if (params.bias.requires_grad()) {
                    auto gb = params.bias.grad();
                    for (std::size_t n = 0; n < batch; ++n) {
                      for (std::size_t j = 0; j < g4; ++j) gb[j] += dpre[n * g4 + j];
                    }
                  }
                  if (x.requires_grad()) {
                    gemm_acc(false, true, batch, in, g4, dpre.data(),
                             params.w_input.data().data(), x.grad().data());
                  }
                  if (h_prev.requires_grad()) {
                    gemm_acc(false, true, batch, hid, g4, dpre.data(),
                             params.w_hidden.data().data(), h_prev.grad().data());
                  }
                });
  }
  return next;
}

template <typename T>
Tensor<T> lstm_sequence(Tape<T>& tape, const Tensor<T>& x, const LstmParams<T>& params,
                        bool reverse) {
  require_rank(x, 3, "lstm_sequence", "input");
  const std::size_t batch = x.dim(0), steps = x.dim(1);
  if (steps == 0) shape_fail("lstm_sequence", "empty sequence");
  LstmState<T> state = lstm_zero_state<T>(batch, params.hidden_size());
  std::vector<Tensor<T>> hs(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t t = reverse ? steps - 1 - i : i;
    state = lstm_cell(tape, select(tape, x, 1, t), state, params);
    hs[t] = state.hidden;
  }
  return stack(tape, std::span<const Tensor<T>>(hs), 1);
}

template <typename T>
Tensor<T> bilstm(Tape<T>& tape, const Tensor<T>& x, const LstmParams<T>& forward,
                 const LstmParams<T>& backward) {
  if (x.rank() == 2) {
    const std::size_t steps = x.dim(0);
    if (steps == 0) shape_fail("bilstm", "empty sequence");
    auto y = bilstm(tape, reshape(tape, x, {1, steps, x.dim(1)}), forward, backward);
    return reshape(tape, y, {steps, y.dim(2)});
  }
  require_rank(x, 3, "bilstm", "input");
  if (x.dim(1) == 0) shape_fail("bilstm", "empty sequence");
  auto fw = lstm_sequence(tape, x, forward, false);
  auto bw = lstm_sequence(tape, x, backward, true);
  return concat(tape, {fw, bw}, 2);
}

// ---- attention -------------------------------------------------------------

template <typename T>
AttentionOutput<T> attention(Tape<T>& tape, const Tensor<T>& h, const AttentionParams<T>& params) {
  if (h.rank() != 2 && h.rank() != 3) {
    shape_fail("attention", "input must be [T x F] or [N x T x F], got " + shape_str(h.shape()));
  }
  const bool single = h.rank() == 2;
  const std::size_t batch = single ? 1 : h.dim(0);
  const std::size_t steps = h.dim(single ? 0 : 1);
  const std::size_t feat = h.dim(single ? 1 : 2);
  if (steps == 0) shape_fail("attention", "empty sequence");
  if (params.weight.size() != feat || params.bias.size() != steps) {
    shape_fail("attention", "weight " + shape_str(params.weight.shape()) + " / bias " +
                                shape_str(params.bias.shape()) + " for input " +
                                shape_str(h.shape()));
  }
  AttentionOutput<T> res{Tensor<T>(h.shape()), Tensor<T>({batch, steps})};
  const T* hv = h.data().data();
  const T* wv = params.weight.data().data();
  for (std::size_t n = 0; n < batch; ++n) {
    T* alpha = res.weights.data().data() + n * steps;
    for (std::size_t t = 0; t < steps; ++t) {
      const T* row = hv + (n * steps + t) * feat;
      T s = params.bias[t];
      for (std::size_t f = 0; f < feat; ++f) s += wv[f] * row[f];
      alpha[t] = s;
    }
    const T mx = *std::max_element(alpha, alpha + steps);
    T z = T(0);
    for (std::size_t t = 0; t < steps; ++t) {
      alpha[t] = std::exp(alpha[t] - mx);
      z += alpha[t];
    }
    for (std::size_t t = 0; t < steps; ++t) {
      alpha[t] /= z;
      const T* row = hv + (n * steps + t) * feat;
      T* dst = res.output.data().data() + (n * steps + t) * feat;
      for (std::size_t f = 0; f < feat; ++f) dst[f] = alpha[t] * row[f];
    }
  }
  const Tensor<T>& w = params.weight;
  const Tensor<T>& b = params.bias;
  if (tape.wants({&h, &w, &b})) {
    tape.record({res.output}, [h, w, b, out = res.output, alpha = res.weights, batch, steps,
                               feat]() mutable {
      const T* g = out.grad().data();
      AlignedVector<T> dscore(steps);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* a = alpha.data().data() + n * steps;
        T s = T(0);
        for (std::size_t t = 0; t < steps; ++t) {
          const T* row = h.data().data() + (n * steps + t) * feat;
          const T* gr = g + (n * steps + t) * feat;
          T da = T(0);
          for (std::size_t f = 0; f < feat; ++f) da += gr[f] * row[f];
          dscore[t] = da;
          s += a[t] * da;
        }
        for (std::size_t t = 0; t < steps; ++t) dscore[t] = a[t] * (dscore[t] - s);
        for (std::size_t t = 0; t < steps; ++t) {
          const std::size_t base = (n * steps + t) * feat;
          if (h.requires_grad()) {
            auto gh = h.grad();
            for (std::size_t f = 0; f < feat; ++f) gh[base + f] += a[t] * g[base + f] + dscore[t] * w[f];
          }
          if (w.requires_grad()) {
            auto gw = w.grad();
            for (std::size_t f = 0; f < feat; ++f) gw[f] += dscore[t] * h[base + f];
          }
          if (b.requires_grad()) b.grad()[t] += dscore[t];
        }
      }
    });
  }
  return res;
}

// ---- regularization and loss -----------------------------------------------

template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, Mode mode, DropoutKey key) {
  if (!(p >= 0.0) || p >= 1.0) {
    throw std::invalid_argument("dropout: p must lie in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::kEval || p == 0.0) return x;
  const std::uint64_t stream = derive_key(key.seed, {key.stream});
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = uniform_at(stream, key.offset + i) < p ? T(0) : keep_scale;
    out[i] = x[i] * mask[i];
  }
  if (tape.wants({&x})) {
    tape.record({out}, [x, out, mask = std::move(mask)]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits, 2, "softmax", "logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  Tensor<T> probs(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.data().data() + r * cols;
    T* p = probs.data().data() + r * cols;
    const T mx = *std::max_element(z, z + cols);
    T s = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      p[j] = std::exp(z[j] - mx);
      s += p[j];
    }
    for (std::size_t j = 0; j < cols; ++j) p[j] /= s;
  }
  return probs;
}

template <typename T>
LossOutput<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                    std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) {
    shape_fail("softmax_cross_entropy", std::to_string(labels.size()) + " labels for " +
                                            std::to_string(rows) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= cols) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(l) +
                              " outside [0, " + std::to_string(cols) + ")");
    }
  }
  LossOutput<T> res{Tensor<T>::scalar(T(0)), softmax(logits)};
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.data().data() + r * cols;
    const T mx = *std::max_element(z, z + cols);
    T s = T(0);
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(z[j] - mx);
    total += std::log(s) - (z[labels[r]] - mx);
  }
  res.loss[0] = total / static_cast<T>(rows);
  if (tape.wants({&logits})) {
    std::vector<int> lab(labels.begin(), labels.end());
    tape.record({res.loss}, [logits, loss = res.loss, probs = res.probs, lab = std::move(lab), rows,
                             cols]() mutable {
      const T g = loss.grad()[0] / static_cast<T>(rows);
      auto gl = logits.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
          const T onehot = static_cast<std::size_t>(lab[r]) == j ? T(1) : T(0);
          gl[r * cols + j] += g * (probs[r * cols + j] - onehot);
        }
      }
    });
  }
  return res;
}

// ---- instantiations --------------------------------------------------------

#define QSLA_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> elementwise(Tape<T>&, const Tensor<T>&, const Tensor<T>&, BinaryKind);        \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                        \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sum_squares(Tape<T>&, const Tensor<T>&);                                     \
  template Tensor<T> activation(Tape<T>&, const Tensor<T>&, ActivationKind);                      \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                  \
  template Tensor<T> concat(Tape<T>&, std::span<const Tensor<T>>, std::size_t);                   \
  template Tensor<T> slice(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t);    \
  template Tensor<T> select(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);                \
  template Tensor<T> stack(Tape<T>&, std::span<const Tensor<T>>, std::size_t);                    \
  template Tensor<T> transpose_last2(Tape<T>&, const Tensor<T>&);                                 \
  template Tensor<T> conv1d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> batchnorm1d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                 BatchNormState<T>&, Mode);                                       \
  template Tensor<T> maxpool1d(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);             \
  template LstmState<T> lstm_zero_state(std::size_t, std::size_t);                                \
  template LstmState<T> lstm_cell(Tape<T>&, const Tensor<T>&, const LstmState<T>&,                \
                                  const LstmParams<T>&);                                          \
  template Tensor<T> lstm_sequence(Tape<T>&, const Tensor<T>&, const LstmParams<T>&, bool);       \
  template Tensor<T> bilstm(Tape<T>&, const Tensor<T>&, const LstmParams<T>&,                     \
                            const LstmParams<T>&);                                                \
  template AttentionOutput<T> attention(Tape<T>&, const Tensor<T>&, const AttentionParams<T>&);   \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, double, Mode, DropoutKey);               \
  template Tensor<T> softmax(const Tensor<T>&);                                                   \
  template LossOutput<T> softmax_cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const int>);

QSLA_INSTANTIATE_OPS(float)
QSLA_INSTANTIATE_OPS(double)

#undef QSLA_INSTANTIATE_OPS

}  // namespace qsla::ad
