#pragma once

#include <Eigen/Core>

#include "dalace/tensor.hpp"

namespace dalace {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// C[M,N] = A[M,K] * B[K,N], optionally accumulating into C.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool accum = false) {
  ECMap<T> A(a, M, K), B(b, K, N);
  EMap<T> C(c, M, N);
  if (accum)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C[M,N] = A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool accum = false) {
  ECMap<T> A(a, M, K), B(b, N, K);
  EMap<T> C(c, M, N);
  if (accum)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// C[M,N] = A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool accum = false) {
  ECMap<T> A(a, K, M), B(b, K, N);
  EMap<T> C(c, M, N);
  if (accum)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

}  // namespace dalace
