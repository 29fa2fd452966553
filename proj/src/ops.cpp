#include "ops.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <initializer_list>
#include <numbers>
#include <sstream>
#include <vector>

#include "kernels.hpp"

namespace memvit {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace ops {

namespace {

template <typename T>
bool records(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (!tape) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
bool grad_of(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

// Splits x[.., T, D] into (outer, T, D).
struct TokenDims {
  std::size_t outer, tokens, width;
};

template <typename T>
TokenDims token_dims(const Tensor<T>& x, const char* op) {
  require(x.rank() >= 2, std::string(op) + ": expected [.., T, D], got " + shape_str(x.shape()));
  const std::size_t d = x.dim(x.rank() - 1);
  const std::size_t t = x.dim(x.rank() - 2);
  std::size_t outer = 1;
  for (std::size_t i = 0; i + 2 < x.rank(); ++i) outer *= x.dim(i);
  return {outer, t, d};
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() >= 2 && b.rank() == 2,
          "matmul: expected [.., M, K] x [K, N], got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t k = a.dim(a.rank() - 1);
  require(b.dim(0) == k, "matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = b.dim(1);
  const std::size_t rows = k ? a.numel() / k : 0;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  const bool rec = records(tape, {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(out_shape, rec);
  kernels::gemm_nn_acc(rows, k, n, a.data().data(), k, b.data().data(), n, out.data().data(), n);
  if (rec) {
    tape->record("matmul", [a, b, out, rows, k, n]() mutable {
      const T* dy = out.grad().data();
      if (grad_of(a)) {
        std::vector<T> bt(n * k);
        kernels::transpose(k, n, b.data().data(), n, bt.data());
        kernels::gemm_nn_acc(rows, n, k, dy, n, bt.data(), k, a.grad().data(), k);
      }
      if (grad_of(b)) kernels::gemm_tn_acc(rows, k, n, a.data().data(), k, dy, n, b.grad().data(), n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t col_begin, std::size_t col_end) {
  require(x.rank() >= 1 && w.rank() == 2, "linear: bad ranks " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const std::size_t k = x.dim(x.rank() - 1);
  const std::size_t n_full = w.dim(1);
  if (col_end == static_cast<std::size_t>(-1)) col_end = n_full;
  require(w.dim(0) == k, "linear: input width " + std::to_string(k) + " vs weight " + shape_str(w.shape()));
  require(col_begin <= col_end && col_end <= n_full, "linear: column range out of bounds");
  require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == n_full), "linear: bias shape mismatch");
  const std::size_t n = col_end - col_begin;
  const std::size_t rows = k ? x.numel() / k : 0;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  const bool rec = records(tape, {&x, &w, &bias});
  Tensor<T> out = Tensor<T>::zeros(out_shape, rec);
  T* y = out.data().data();
  if (bias.defined()) {
    const T* bb = bias.data().data() + col_begin;
    for (std::size_t r = 0; r < rows; ++r) std::copy(bb, bb + n, y + r * n);
  }
  kernels::gemm_nn_acc(rows, k, n, x.data().data(), k, w.data().data() + col_begin, n_full, y, n);
  if (rec) {
    tape->record("linear", [x, w, bias, out, rows, k, n, n_full, col_begin]() mutable {
      const T* dy = out.grad().data();
      if (grad_of(x)) {
        std::vector<T> wt(n * k);
        kernels::transpose(k, n, w.data().data() + col_begin, n_full, wt.data());
        kernels::gemm_nn_acc(rows, n, k, dy, n, wt.data(), k, x.grad().data(), k);
      }
      if (grad_of(w)) {
        kernels::gemm_tn_acc(rows, k, n, x.data().data(), k, dy, n, w.grad().data() + col_begin, n_full);
      }
      if (grad_of(bias)) {
        T* db = bias.grad().data() + col_begin;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) db[j] += dy[r * n + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool rec = records(tape, {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rec);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (rec) {
    tape->record("add", [a, b, out]() mutable {
      auto dy = out.grad();
      if (grad_of(a)) {
        auto g = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
      if (grad_of(b)) {
        auto g = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool rec = records(tape, {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rec);
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  if (rec) {
    tape->record("mul", [a, b, out]() mutable {
      auto dy = out.grad();
      if (grad_of(a)) {
        auto g = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * b[i];
      }
      if (grad_of(b)) {
        auto g = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T factor) {
  const bool rec = records(tape, {&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rec);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * factor;
  if (rec) {
    tape->record("scale", [x, out, factor]() mutable {
      auto dy = out.grad();
      auto g = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
  const bool rec = records(tape, {&x});
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out(Shape{}, std::vector<T>{acc}, rec);
  if (rec) {
    tape->record("sum", [x, out]() mutable {
      const T dy = out.grad()[0];
      for (T& g : x.grad()) g += dy;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_rows(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& rows, std::size_t offset) {
  const auto xd = token_dims(x, "add_rows");
  require(rows.rank() == 2 && rows.dim(1) == xd.width, "add_rows: rows must be [S, D]");
  const std::size_t s = rows.dim(0);
  require(offset + s <= xd.tokens, "add_rows: token range exceeds sequence");
  const bool rec = records(tape, {&x, &rows});
  Tensor<T> out(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), rec);
  const std::size_t d = xd.width;
  for (std::size_t o = 0; o < xd.outer; ++o) {
    T* base = out.data().data() + (o * xd.tokens + offset) * d;
    for (std::size_t i = 0; i < s * d; ++i) base[i] += rows[i];
  }
  if (rec) {
    tape->record("add_rows", [x, rows, out, xd, s, offset]() mutable {
      auto dy = out.grad();
      if (grad_of(x)) {
        auto g = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
      if (grad_of(rows)) {
        auto g = rows.grad();
        for (std::size_t o = 0; o < xd.outer; ++o) {
          const T* base = dy.data() + (o * xd.tokens + offset) * xd.width;
          for (std::size_t i = 0; i < s * xd.width; ++i) g[i] += base[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_batch(Tape<T>* tape, const Tensor<T>& x, std::size_t batch) {
  require(x.rank() == 2, "broadcast_batch: expected [T, D], got " + shape_str(x.shape()));
  const bool rec = records(tape, {&x});
  Tensor<T> out = Tensor<T>::zeros({batch, x.dim(0), x.dim(1)}, rec);
  const std::size_t per = x.numel();
  for (std::size_t b = 0; b < batch; ++b) std::copy(x.data().begin(), x.data().end(), out.data().begin() + b * per);
  if (rec) {
    tape->record("broadcast_batch", [x, out, batch, per]() mutable {
      auto g = x.grad();
      auto dy = out.grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < per; ++i) g[i] += dy[b * per + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_tokens(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  const auto ad = token_dims(a, "concat_tokens");
  const auto bd = token_dims(b, "concat_tokens");
  require(a.rank() == b.rank() && ad.width == bd.width && ad.outer == bd.outer &&
              std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
          "concat_tokens: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 2] = ad.tokens + bd.tokens;
  const bool rec = records(tape, {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(out_shape, rec);
  const std::size_t an = ad.tokens * ad.width, bn = bd.tokens * bd.width;
  for (std::size_t o = 0; o < ad.outer; ++o) {
    T* dst = out.data().data() + o * (an + bn);
    std::copy_n(a.data().data() + o * an, an, dst);
    std::copy_n(b.data().data() + o * bn, bn, dst + an);
  }
  if (rec) {
    tape->record("concat_tokens", [a, b, out, an, bn, outer = ad.outer]() mutable {
      const T* dy = out.grad().data();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = dy + o * (an + bn);
        if (grad_of(a)) {
          T* g = a.grad().data() + o * an;
          for (std::size_t i = 0; i < an; ++i) g[i] += src[i];
        }
        if (grad_of(b)) {
          T* g = b.grad().data() + o * bn;
          for (std::size_t i = 0; i < bn; ++i) g[i] += src[an + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_tokens(Tape<T>* tape, const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const auto xd = token_dims(x, "slice_tokens");
  if (begin + count > xd.tokens) {
    throw DimensionError("slice_tokens: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") exceeds " + std::to_string(xd.tokens) + " tokens");
  }
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = count;
  const bool rec = records(tape, {&x});
  Tensor<T> out = Tensor<T>::zeros(out_shape, rec);
  const std::size_t d = xd.width;
  for (std::size_t o = 0; o < xd.outer; ++o) {
    std::copy_n(x.data().data() + (o * xd.tokens + begin) * d, count * d, out.data().data() + o * count * d);
  }
  if (rec) {
    tape->record("slice_tokens", [x, out, xd, begin, count]() mutable {
      const T* dy = out.grad().data();
      T* g = x.grad().data();
      const std::size_t d = xd.width;
      for (std::size_t o = 0; o < xd.outer; ++o) {
        T* dst = g + (o * xd.tokens + begin) * d;
        const T* src = dy + o * count * d;
        for (std::size_t i = 0; i < count * d; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> select_token(Tape<T>* tape, const Tensor<T>& x, std::size_t index) {
  require(x.rank() == 3, "select_token: expected [B, T, D], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (index >= t) throw IndexError("select_token: index " + std::to_string(index) + " >= " + std::to_string(t));
  const bool rec = records(tape, {&x});
  Tensor<T> out = Tensor<T>::zeros({b, d}, rec);
  for (std::size_t i = 0; i < b; ++i) std::copy_n(x.data().data() + (i * t + index) * d, d, out.data().data() + i * d);
  if (rec) {
    tape->record("select_token", [x, out, b, t, d, index]() mutable {
      const T* dy = out.grad().data();
      T* g = x.grad().data();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < d; ++j) g[(i * t + index) * d + j] += dy[i * d + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layernorm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require(x.rank() >= 1, "layernorm: scalar input");
  const std::size_t d = x.dim(x.rank() - 1);
  require(d >= 1, "layernorm: zero width");
  require(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
          "layernorm: gamma/beta must be [" + std::to_string(d) + "]");
  if (!(eps > T(0))) throw ContractError("layernorm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  const bool rec = records(tape, {&x, &gamma, &beta});
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rec);
  std::vector<T> xhat(rec ? x.numel() : 0);
  std::vector<T> rstd(rec ? rows : 0);
  const T* g = gamma.data().data();
  const T* bt = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T* yr = out.data().data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * inv;
      yr[j] = h * g[j] + bt[j];
      if (rec) xhat[r * d + j] = h;
    }
    if (rec) rstd[r] = inv;
  }
  if (rec) {
    tape->record("layernorm", [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
      const T* dy = out.grad().data();
      const T* g = gamma.data().data();
      if (grad_of(gamma) || grad_of(beta)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) {
            if (grad_of(gamma)) gamma.grad()[j] += dy[r * d + j] * xhat[r * d + j];
            if (grad_of(beta)) beta.grad()[j] += dy[r * d + j];
          }
        }
      }
      if (grad_of(x)) {
        T* dx = x.grad().data();
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = dy[r * d + j] * g[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * xhat[r * d + j];
          }
          mean_dh /= T(d);
          mean_dh_h /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            dx[r * d + j] += rstd[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
  const bool rec = records(tape, {&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rec);
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  if (rec) {
    tape->record("gelu", [x, out, inv_sqrt2]() mutable {
      const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
      auto dy = out.grad();
      auto g = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = x[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        g[i] += dy[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_masked(Tape<T>* tape, const Tensor<T>& logits, const MaskMatrix& mask) {
  require(logits.rank() >= 2, "softmax_masked: expected [.., Q, K]");
  const std::size_t q = logits.dim(logits.rank() - 2), k = logits.dim(logits.rank() - 1);
  require(mask.rows == q && mask.cols == k, "softmax_masked: mask is " + std::to_string(mask.rows) + "x" +
                                                std::to_string(mask.cols) + ", logits end in " +
                                                std::to_string(q) + "x" + std::to_string(k));
  const std::size_t rows = k ? logits.numel() / k : 0;
  const bool rec = records(tape, {&logits});
  Tensor<T> out = Tensor<T>::zeros(logits.shape(), rec);
  for (std::size_t r = 0; r < rows; ++r) {
    kernels::masked_softmax_row(k, logits.data().data() + r * k, mask.row(r % q), out.data().data() + r * k);
  }
  if (rec) {
    tape->record("softmax_masked", [logits, out, rows, k]() mutable {
      const T* dy = out.grad().data();
      const T* p = out.data().data();
      T* g = logits.grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < k; ++j) dot += p[r * k + j] * dy[r * k + j];
        for (std::size_t j = 0; j < k; ++j) g[r * k + j] += p[r * k + j] * (dy[r * k + j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
AttentionResult<T> masked_attention(Tape<T>* tape, const Tensor<T>& qkv, const Tensor<T>& ext_kv,
                                    std::size_t heads, const MaskMatrix* mask) {
  require(qkv.rank() == 3 && qkv.dim(2) % 3 == 0, "masked_attention: qkv must be [B, T, 3D], got " + shape_str(qkv.shape()));
  const std::size_t batch = qkv.dim(0), tq = qkv.dim(1), d3 = qkv.dim(2), d = d3 / 3;
  require(heads > 0 && d % heads == 0, "masked_attention: width " + std::to_string(d) + " not divisible by heads");
  const std::size_t s = ext_kv.defined() ? ext_kv.dim(0) : 0;
  if (ext_kv.defined()) {
    require(ext_kv.rank() == 2 && ext_kv.dim(1) == 2 * d, "masked_attention: ext_kv must be [S, 2D], got " + shape_str(ext_kv.shape()));
  }
  const std::size_t tk = tq + s;
  if (mask) {
    require(mask->rows == tq && mask->cols == tk, "masked_attention: mask is " + std::to_string(mask->rows) + "x" +
                                                      std::to_string(mask->cols) + ", expected " + std::to_string(tq) +
                                                      "x" + std::to_string(tk));
  }
  const std::size_t dh = d / heads;
  const T scale_f = T(1) / std::sqrt(T(dh));
  const bool rec = records(tape, {&qkv, &ext_kv});
  Tensor<T> out = Tensor<T>::zeros({batch, tq, d}, rec);
  Tensor<T> weights = Tensor<T>::zeros({batch, heads, tq, tk});

  const T* base = qkv.data().data();
  const T* ext = s ? ext_kv.data().data() : nullptr;
  auto key_ptr = [=](std::size_t b, std::size_t j, std::size_t h) -> const T* {
    return j < tq ? base + (b * tq + j) * d3 + d + h * dh : ext + (j - tq) * 2 * d + h * dh;
  };
  auto value_ptr = [=](std::size_t b, std::size_t j, std::size_t h) -> const T* {
    return j < tq ? base + (b * tq + j) * d3 + 2 * d + h * dh : ext + (j - tq) * 2 * d + d + h * dh;
  };

  std::vector<T> scores(tk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tq; ++i) {
        const std::uint8_t* allow = mask ? mask->row(i) : nullptr;
        const T* q = base + (b * tq + i) * d3 + h * dh;
        for (std::size_t j = 0; j < tk; ++j) {
          if (allow && !allow[j]) {
            scores[j] = T(0);
            continue;
          }
          const T* kp = key_ptr(b, j, h);
          T acc = 0;
          for (std::size_t c = 0; c < dh; ++c) acc += q[c] * kp[c];
          scores[j] = acc * scale_f;
        }
        T* p = weights.data().data() + ((b * heads + h) * tq + i) * tk;
        kernels::masked_softmax_row(tk, scores.data(), allow, p);
        T* o = out.data().data() + (b * tq + i) * d + h * dh;
        for (std::size_t j = 0; j < tk; ++j) {
          if (allow && !allow[j]) continue;
          const T* vp = value_ptr(b, j, h);
          const T pj = p[j];
          for (std::size_t c = 0; c < dh; ++c) o[c] += pj * vp[c];
        }
      }
    }
  }

  if (rec) {
    tape->record("masked_attention", [qkv, ext_kv, out, weights, batch, tq, tk, s, d, d3, dh, heads, scale_f,
                                      mask_copy = mask ? std::optional<MaskMatrix>(*mask) : std::nullopt]() mutable {
      const T* base = qkv.data().data();
      const T* ext = s ? ext_kv.data().data() : nullptr;
      T* gq = grad_of(qkv) ? qkv.grad().data() : nullptr;
      T* ge = (s && grad_of(ext_kv)) ? ext_kv.grad().data() : nullptr;
      const T* dy = out.grad().data();
      std::vector<T> dp(tk);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < tq; ++i) {
            const std::uint8_t* allow = mask_copy ? mask_copy->row(i) : nullptr;
            const T* p = weights.data().data() + ((b * heads + h) * tq + i) * tk;
            const T* dyi = dy + (b * tq + i) * d + h * dh;
            const T* q = base + (b * tq + i) * d3 + h * dh;
            T dot = 0;
            for (std::size_t j = 0; j < tk; ++j) {
              if (allow && !allow[j]) {
                dp[j] = T(0);
                continue;
              }
              const T* vp = j < tq ? base + (b * tq + j) * d3 + 2 * d + h * dh : ext + (j - tq) * 2 * d + d + h * dh;
              T acc = 0;
              for (std::size_t c = 0; c < dh; ++c) acc += dyi[c] * vp[c];
              dp[j] = acc;
              dot += p[j] * acc;
            }
            for (std::size_t j = 0; j < tk; ++j) {
              if (allow && !allow[j]) continue;
              const T ds = p[j] * (dp[j] - dot) * scale_f;
              const T* kp;
              T* gk;
              T* gv;
              if (j < tq) {
                kp = base + (b * tq + j) * d3 + d + h * dh;
                gk = gq ? gq + (b * tq + j) * d3 + d + h * dh : nullptr;
                gv = gq ? gq + (b * tq + j) * d3 + 2 * d + h * dh : nullptr;
              } else {
                kp = ext + (j - tq) * 2 * d + h * dh;
                gk = ge ? ge + (j - tq) * 2 * d + h * dh : nullptr;
                gv = ge ? ge + (j - tq) * 2 * d + d + h * dh : nullptr;
              }
              if (gq) {
                T* gqi = gq + (b * tq + i) * d3 + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kp[c];
              }
              if (gk) {
                for (std::size_t c = 0; c < dh; ++c) gk[c] += ds * q[c];
                for (std::size_t c = 0; c < dh; ++c) gv[c] += p[j] * dyi[c];
              }
            }
          }
        }
      }
    });
  }
  return {std::move(out), std::move(weights)};
}

template <typename T>
Tensor<T> cross_entropy_logits(Tape<T>* tape, const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2, "cross_entropy_logits: expected [B, C], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  require(labels.size() == b, "cross_entropy_logits: " + std::to_string(labels.size()) + " labels for batch " +
                                  std::to_string(b));
  if (b == 0) throw DimensionError("cross_entropy_logits: empty batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("cross_entropy_logits: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  const bool rec = records(tape, {&logits});
  std::vector<T> probs(rec ? b * c : 0);
  T total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const T* z = logits.data().data() + i * c;
    T mx = z[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    T se = 0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(z[j] - mx);
    const T lse = mx + std::log(se);
    total += lse - z[labels[i]];
    if (rec) {
      for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(z[j] - lse);
    }
  }
  Tensor<T> out(Shape{}, std::vector<T>{total / T(b)}, rec);
  if (rec) {
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record("cross_entropy_logits", [logits, out, probs = std::move(probs), lab = std::move(lab), b, c]() mutable {
      const T g = out.grad()[0] / T(b);
      T* dz = logits.grad().data();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          dz[i * c + j] += g * (probs[i * c + j] - (static_cast<int>(j) == lab[i] ? T(1) : T(0)));
        }
      }
    });
  }
  return out;
}

#define MEMVIT_INSTANTIATE_OPS(T)                                                                                 \
  template Tensor<T> matmul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> linear<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,       \
                               std::size_t);                                                                      \
  template Tensor<T> add<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scale<T>(Tape<T>*, const Tensor<T>&, T);                                                     \
  template Tensor<T> sum<T>(Tape<T>*, const Tensor<T>&);                                                          \
  template Tensor<T> add_rows<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, std::size_t);                      \
  template Tensor<T> broadcast_batch<T>(Tape<T>*, const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> concat_tokens<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> slice_tokens<T>(Tape<T>*, const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> select_token<T>(Tape<T>*, const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> layernorm<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);             \
  template Tensor<T> gelu<T>(Tape<T>*, const Tensor<T>&);                                                         \
  template Tensor<T> softmax_masked<T>(Tape<T>*, const Tensor<T>&, const MaskMatrix&);                            \
  template AttentionResult<T> masked_attention<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, std::size_t,      \
                                                  const MaskMatrix*);                                             \
  template Tensor<T> cross_entropy_logits<T>(Tape<T>*, const Tensor<T>&, std::span<const int>);
MEMVIT_INSTANTIATE_OPS(float)
MEMVIT_INSTANTIATE_OPS(double)
#undef MEMVIT_INSTANTIATE_OPS

}  // namespace ops
}  // namespace memvit
