#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "errors.hpp"

namespace memvit::kernels {

namespace {

constexpr std::size_t kColBlock = 32;

// Four rows at a time over a full column block; the accumulators stay in
// registers and each b row is loaded once per four output rows.
template <typename T>
inline void block4(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                   std::size_t ldc) {
  T acc0[kColBlock], acc1[kColBlock], acc2[kColBlock], acc3[kColBlock];
  for (std::size_t j = 0; j < kColBlock; ++j) {
    acc0[j] = c[j];
    acc1[j] = c[ldc + j];
    acc2[j] = c[2 * ldc + j];
    acc3[j] = c[3 * ldc + j];
  }
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    const T a0 = a[p], a1 = a[lda + p], a2 = a[2 * lda + p], a3 = a[3 * lda + p];
    for (std::size_t j = 0; j < kColBlock; ++j) {
      acc0[j] = std::fma(a0, brow[j], acc0[j]);
      acc1[j] = std::fma(a1, brow[j], acc1[j]);
      acc2[j] = std::fma(a2, brow[j], acc2[j]);
      acc3[j] = std::fma(a3, brow[j], acc3[j]);
    }
  }
  for (std::size_t j = 0; j < kColBlock; ++j) {
    c[j] = acc0[j];
    c[ldc + j] = acc1[j];
    c[2 * ldc + j] = acc2[j];
    c[3 * ldc + j] = acc3[j];
  }
}

template <typename T>
inline void block1(std::size_t k, const T* a, const T* b, std::size_t ldb, T* c) {
  T acc[kColBlock];
  for (std::size_t j = 0; j < kColBlock; ++j) acc[j] = c[j];
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    const T ap = a[p];
    for (std::size_t j = 0; j < kColBlock; ++j) acc[j] = std::fma(ap, brow[j], acc[j]);
  }
  for (std::size_t j = 0; j < kColBlock; ++j) c[j] = acc[j];
}

template <typename T>
inline void tail(std::size_t k, std::size_t width, const T* a, const T* b, std::size_t ldb, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    const T ap = a[p];
    for (std::size_t j = 0; j < width; ++j) c[j] = std::fma(ap, brow[j], c[j]);
  }
}

}  // namespace

template <typename T>
void gemm_nn_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda, const T* b,
                 std::size_t ldb, T* c, std::size_t ldc) {
  const std::size_t full_cols = n - n % kColBlock;
  for (std::size_t j0 = 0; j0 < full_cols; j0 += kColBlock) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) block4(k, a + i * lda, lda, b + j0, ldb, c + i * ldc + j0, ldc);
    for (; i < m; ++i) block1(k, a + i * lda, b + j0, ldb, c + i * ldc + j0);
  }
  if (full_cols < n) {
    for (std::size_t i = 0; i < m; ++i) tail(k, n - full_cols, a + i * lda, b + full_cols, ldb, c + i * ldc + full_cols);
  }
}

template <typename T>
void gemm_tn_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda, const T* b,
                 std::size_t ldb, T* c, std::size_t ldc) {
  // Same per-element order as the rank-one formulation (sequential over i),
  // but run through the register-blocked kernel on a transposed copy of a.
  std::vector<T> at(k * m);
  transpose(m, k, a, lda, at.data());
  gemm_nn_acc(k, m, n, at.data(), m, b, ldb, c, ldc);
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, std::size_t lds, T* dst) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * lds + j];
  }
}

template <typename T>
void masked_softmax_row(std::size_t n, const T* logits, const std::uint8_t* allowed, T* out) {
  T max_v = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed && !allowed[j]) continue;
    max_v = any ? std::max(max_v, logits[j]) : logits[j];
    any = true;
  }
  if (!any) throw ContractError("softmax_masked: query row has no allowed key");
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed && !allowed[j]) {
      out[j] = T(0);
      continue;
    }
    out[j] = std::exp(logits[j] - max_v);
    sum += out[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) {
    if (!allowed || allowed[j]) out[j] *= inv;
  }
}

#define MEMVIT_INSTANTIATE_KERNELS(T)                                                                     \
  template void gemm_nn_acc<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t, const T*,    \
                               std::size_t, T*, std::size_t);                                             \
  template void gemm_tn_acc<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t, const T*,    \
                               std::size_t, T*, std::size_t);                                             \
  template void transpose<T>(std::size_t, std::size_t, const T*, std::size_t, T*);                        \
  template void masked_softmax_row<T>(std::size_t, const T*, const std::uint8_t*, T*);
MEMVIT_INSTANTIATE_KERNELS(float)
MEMVIT_INSTANTIATE_KERNELS(double)
#undef MEMVIT_INSTANTIATE_KERNELS

}  // namespace memvit::kernels
