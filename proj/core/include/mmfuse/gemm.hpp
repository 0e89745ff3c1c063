#pragma once

#include <Eigen/Core>
#include <cstdint>

#include "mmfuse/error.hpp"

namespace mmfuse::detail {

// C = beta*C + alpha * op(A) * op(B) over row-major buffers with explicit
// leading strides. beta must be 0 (assign) or 1 (accumulate). Dense products
// are delegated to Eigen; everything stays single-threaded and the blocking
// is fixed, so results are bit-reproducible run to run.
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c, int64_t ldc) {
  if (beta != T(0) && beta != T(1)) throw ShapeError("gemm: beta must be 0 or 1");
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
  using Map = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;

  Map C(c, m, n, Eigen::OuterStride<>(ldc));
  ConstMap A(a, trans_a ? k : m, trans_a ? m : k, Eigen::OuterStride<>(lda));
  ConstMap B(b, trans_b ? n : k, trans_b ? k : n, Eigen::OuterStride<>(ldb));

  if (!trans_a && !trans_b) {
    if (beta == T(0)) C.noalias() = alpha * (A * B);
    else C.noalias() += alpha * (A * B);
  } else if (!trans_a && trans_b) {
    if (beta == T(0)) C.noalias() = alpha * (A * B.transpose());
    else C.noalias() += alpha * (A * B.transpose());
  } else if (trans_a && !trans_b) {
    if (beta == T(0)) C.noalias() = alpha * (A.transpose() * B);
    else C.noalias() += alpha * (A.transpose() * B);
  } else {
    if (beta == T(0)) C.noalias() = alpha * (A.transpose() * B.transpose());
    else C.noalias() += alpha * (A.transpose() * B.transpose());
  }
}

}  // namespace mmfuse::detail
