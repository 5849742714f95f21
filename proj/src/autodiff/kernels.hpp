// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cstddef>

namespace qsla::ad::kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;

/// C[m x n] += op(A) * op(B), all row-major; op transposes when requested.
template <typename T>
void gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
              const T* b, T* c) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap<T> cm(c, M, N);
  ConstMap<T> am(a, trans_a ? K : M, trans_a ? M : K);
  ConstMap<T> bm(b, trans_b ? N : K, trans_b ? K : N);
  if (!trans_a && !trans_b) {
    cm.noalias() += am * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += am * bm.transpose();
  } else if (trans_a && !trans_b) {
    cm.noalias() += am.transpose() * bm;
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

}  // namespace qsla::ad::kernels
