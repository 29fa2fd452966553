#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"

namespace memvit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized like data iff requires_grad
  bool requires_grad = false;
};

// Dense row-major tensor with shared storage. Copies alias; use clone() for a
// deep copy. Extents may be zero (empty token ranges are legal).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(shape_numel(shape), T(0));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : s_(std::make_shared<TensorStorage<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                           std::to_string(data.size()) + " values");
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    set_requires_grad(requires_grad);
  }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  // Handles share storage; gradient accumulation goes through const handles.
  std::span<T> grad() const { return s_->grad; }

  T& operator[](std::size_t i) { return s_->data[i]; }
  T operator[](std::size_t i) const { return s_->data[i]; }

  bool requires_grad() const { return s_ && s_->requires_grad; }

  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (on) {
      s_->grad.assign(s_->data.size(), T(0));
    } else {
      s_->grad.clear();
      s_->grad.shrink_to_fit();
    }
  }

  void zero_grad() {
    std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  Tensor clone() const {
    if (!s_) return {};
    return Tensor(s_->shape, s_->data, false);
  }

  // Same values with a different element type.
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(s_->data.begin(), s_->data.end());
    return Tensor<U>(s_->shape, std::move(out), false);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("reshape: " + shape_str(s_->shape) + " -> " + shape_str(shape));
    }
    return Tensor(std::move(shape), s_->data, false);
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  const std::shared_ptr<TensorStorage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

// Boolean query x key matrix; nonzero cells allow attention.
struct MaskMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> cells;

  MaskMatrix() = default;
  MaskMatrix(std::size_t r, std::size_t c, bool allow) : rows(r), cols(c), cells(r * c, allow ? 1 : 0) {}

  bool at(std::size_t i, std::size_t j) const { return cells[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool allow) { cells[i * cols + j] = allow ? 1 : 0; }
  const std::uint8_t* row(std::size_t i) const { return cells.data() + i * cols; }
  std::size_t allowed_count() const {
    std::size_t n = 0;
    for (auto c : cells) n += c != 0;
    return n;
  }
  friend bool operator==(const MaskMatrix&, const MaskMatrix&) = default;
};

// Ordered record of differentiable operations. Each node's backward closure
// reads the output gradient and accumulates into its inputs' gradients.
// A recording supports exactly one backward pass.
template <typename T>
class Tape {
 public:
  struct Node {
    std::string_view op;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::function<void()> backward) {
    if (consumed_) throw UsageError("tape: recording after backward; start a new tape");
    nodes_.push_back({op, std::move(backward)});
  }

  // Seeds d loss / d loss = 1 and runs every node in reverse order.
  void backward(Tensor<T>& loss) {
    if (consumed_) throw UsageError("tape: backward already ran on this recording");
    if (loss.numel() != 1) throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw UsageError("backward: loss does not depend on any trainable tensor");
    consumed_ = true;
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    nodes_.clear();
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace memvit
