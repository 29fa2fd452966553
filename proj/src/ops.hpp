#pragma once

#include <cstddef>
#include <span>

#include "tensor.hpp"

namespace memvit::ops {

// Every op takes an optional tape. When the tape is non-null and some input
// requires a gradient, the output requires one too and a backward closure is
// recorded. With a null tape the op is a plain forward computation.

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

// x[.., K] times columns [col_begin, col_end) of w[K, N], plus the matching
// bias slice when bias is defined.
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t col_begin = 0, std::size_t col_end = static_cast<std::size_t>(-1));

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x);

// Adds rows[S, D] to tokens [offset, offset + S) of every batch element of x[B, T, D].
template <typename T>
Tensor<T> add_rows(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& rows, std::size_t offset);

// x[T, D] repeated over a new leading batch axis.
template <typename T>
Tensor<T> broadcast_batch(Tape<T>* tape, const Tensor<T>& x, std::size_t batch);

template <typename T>
Tensor<T> concat_tokens(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> slice_tokens(Tape<T>* tape, const Tensor<T>& x, std::size_t begin, std::size_t count);

template <typename T>
Tensor<T> truncate_tokens(Tape<T>* tape, const Tensor<T>& x, std::size_t keep) {
  return slice_tokens(tape, x, 0, keep);
}

// x[B, T, D] -> [B, D] at token index.
template <typename T>
Tensor<T> select_token(Tape<T>* tape, const Tensor<T>& x, std::size_t index);

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
Tensor<T> layernorm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(kLayerNormEps));

template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x);

// Softmax over the last axis restricted to mask-allowed keys; mask is Q x K
// and is applied to every leading index.
template <typename T>
Tensor<T> softmax_masked(Tape<T>* tape, const Tensor<T>& logits, const MaskMatrix& mask);

template <typename T>
struct AttentionResult {
  Tensor<T> out;      // [B, T, D]
  Tensor<T> weights;  // [B, H, T, T + S], detached
};

// Multi-head attention. Queries come from the T carried rows of qkv[B, T, 3D]
// (layout q | k | v). Keys and values are the carried rows followed by the
// S input-independent rows of ext_kv[S, 2D] (layout k | v), shared by every
// batch element. mask is T x (T + S); a null mask allows everything.
template <typename T>
AttentionResult<T> masked_attention(Tape<T>* tape, const Tensor<T>& qkv, const Tensor<T>& ext_kv,
                                    std::size_t heads, const MaskMatrix* mask);

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy_logits(Tape<T>* tape, const Tensor<T>& logits, std::span<const int> labels);

}  // namespace memvit::ops
