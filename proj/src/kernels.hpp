#pragma once

#include <cstddef>
#include <cstdint>

namespace memvit::kernels {

// Dense kernels with a fixed accumulation order: every output element is
// reduced sequentially over the contraction index using fused multiply-add.
// Results for one output row never depend on how many rows are processed,
// which makes outputs bit-stable under batching and token-count changes.

// c[i, j] += sum_k a[i, k] * b[k, j]   (a: m x k, b: k x n, c: m x n)
template <typename T>
void gemm_nn_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda, const T* b,
                 std::size_t ldb, T* c, std::size_t ldc);

// c[p, j] += sum_i a[i, p] * b[i, j]   (a: m x k, b: m x n, c: k x n)
template <typename T>
void gemm_tn_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda, const T* b,
                 std::size_t ldb, T* c, std::size_t ldc);

// dst (cols x rows) = transpose of src (rows x cols, leading dimension lds).
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, std::size_t lds, T* dst);

// Softmax over the allowed entries of one row. Denied entries are written as
// exactly zero and take no part in the max or the normalizing sum.
// `allowed` may be null, meaning every entry is allowed.
template <typename T>
void masked_softmax_row(std::size_t n, const T* logits, const std::uint8_t* allowed, T* out);

}  // namespace memvit::kernels
