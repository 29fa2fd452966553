#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "maskalg.hpp"
#include "model.hpp"
#include "ops.hpp"

namespace memvit {

template <typename T>
struct ForwardTrace {
  TokenLayout layout;
  std::vector<Tensor<T>> attention;      // per layer [B, H, T, T + S]; empty unless kept
  std::vector<Tensor<T>> layer_outputs;  // per layer [B, T, D]; empty unless kept
  std::vector<std::pair<std::string, Tensor<T>>> logits;  // "base" then task names
  std::vector<std::pair<std::string, Tensor<T>>> features;  // final-norm read-out token per head, [B, D]

  const Tensor<T>& logits_of(std::string_view head) const;
  const Tensor<T>& features_of(std::string_view head) const;
};

struct ForwardOptions {
  MaskPolicy policy = MaskPolicy::full;
  bool keep_trace = false;
  // Restrict read-out to one head ("base" or a task name); empty = all heads.
  std::string only_head;
};

// images[B, h, w, c] -> [B, N + 1, D]: class token, then patches in row-major
// grid order, plus the position embedding on all N + 1 tokens. Pixel values
// are rescaled from [0, 1] to [-1, 1] before the projection.
template <typename T>
Tensor<T> patch_embed(Tape<T>* tape, const Tensor<T>& images, const ModelConfig& config, const Backbone<T>& backbone);

template <typename T>
struct LayerOutput {
  Tensor<T> tokens;     // [B, T, D]
  Tensor<T> attention;  // [B, H, T, T + S]
};

// Pre-norm block over the T carried tokens. `extra` holds this layer's
// memory rows [S, D] (undefined when S = 0); they pass through LN1 and the
// key/value projections only, never produce queries and are not carried.
template <typename T>
LayerOutput<T> encoder_layer(Tape<T>* tape, const Tensor<T>& carried, const LayerParams<T>& layer, std::size_t heads,
                             const MaskMatrix* mask, const Tensor<T>& extra);

template <typename T>
ForwardTrace<T> forward(Tape<T>* tape, const Model<T>& model, const Tensor<T>& images, const ForwardOptions& options = {});

// Plain ViT forward with the memory branch removed: no tasks, no masks, base
// head only. Serves as the reference for the baseline-reduction property.
template <typename T>
Tensor<T> reference_vit_logits(const Model<T>& model, const Tensor<T>& images);

}  // namespace memvit
