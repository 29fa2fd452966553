#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace memvit {

enum class MemoryVariant { per_layer, propagated_first, propagated_added };

std::string_view to_string(MemoryVariant v);
MemoryVariant parse_variant(std::string_view name);

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t depth = 4;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  // Memory tokens per layer for newly attached tasks; empty means none.
  std::vector<std::size_t> mem_counts;
  MemoryVariant variant = MemoryVariant::per_layer;
  std::size_t num_classes = 10;  // classes of the base head

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t hidden() const { return mlp_ratio * width; }
  std::size_t mem_at(std::size_t layer) const { return layer < mem_counts.size() ? mem_counts[layer] : 0; }

  // Throws ConfigError on an inconsistent configuration.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Memory counts for the variants: per_layer uses counts as given;
// propagated_first keeps only layer 0; propagated_added uses m at every layer.
std::vector<std::size_t> uniform_memory(std::size_t depth, std::size_t m, MemoryVariant variant);

template <typename T>
struct LayerParams {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> w_qkv, b_qkv;  // [D, 3D], [3D]
  Tensor<T> w_out, b_out;  // [D, D], [D]
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w_mlp1, b_mlp1;  // [D, rD], [rD]
  Tensor<T> w_mlp2, b_mlp2;  // [rD, D], [D]
};

// Pretrained encoder shared by every task: embeddings, blocks, final norm and
// the base classification head read from the original class token.
template <typename T>
struct Backbone {
  Tensor<T> patch_w, patch_b;  // [P*P*c, D], [D]
  Tensor<T> pos;               // [N + 1, D]
  Tensor<T> cls;               // [1, D]
  std::vector<LayerParams<T>> layers;
  Tensor<T> ln_g, ln_b;
  Tensor<T> head_w, head_b;  // [D, k], [k]
};

// One task's trainables attached to a backbone. memory[l] is [m_l, D] or
// undefined when m_l = 0. For propagated variants memory[0] holds the carried
// slots; under propagated_added memory[l >= 1] is added to those slots before
// layer l.
template <typename T>
struct TaskParams {
  std::string name;
  MemoryVariant variant = MemoryVariant::per_layer;
  Tensor<T> cls;  // [1, D]; undefined for head-only tasks (read-out from the base class token)
  std::vector<Tensor<T>> memory;
  Tensor<T> head_w, head_b;

  bool has_cls() const { return cls.defined(); }
  std::size_t mem_count(std::size_t layer) const {
    return layer < memory.size() && memory[layer].defined() ? memory[layer].dim(0) : 0;
  }
  std::size_t num_classes() const { return head_b.dim(0); }
  // Memory slots carried through the layers (propagated variants only).
  std::size_t carried_slots() const {
    return variant == MemoryVariant::per_layer ? 0 : mem_count(0);
  }
};

template <typename T>
struct Model {
  ModelConfig config;
  Backbone<T> backbone;
  std::vector<TaskParams<T>> tasks;

  const TaskParams<T>& task(std::string_view name) const;
  TaskParams<T>& task(std::string_view name);
  std::optional<std::size_t> task_index(std::string_view name) const;

  Model clone() const;
  template <typename U>
  Model<U> cast() const;
};

// Parameter groups used by regimes, the dependency verifier and packing.
enum class GroupKind { backbone, cls0, input, task_cls, task_memory, task_head };

struct ParamGroup {
  GroupKind kind;
  std::size_t task = 0;  // 1-based for task groups

  friend auto operator<=>(const ParamGroup&, const ParamGroup&) = default;
};

std::string to_string(const ParamGroup& g);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  ParamGroup group;
};

// Every parameter tensor in canonical order: backbone first (embeddings,
// layers, final norm, base head), then tasks in attachment order.
template <typename T>
std::vector<NamedParam<T>> named_parameters(const Model<T>& model);

template <typename T>
std::vector<NamedParam<T>> backbone_parameters(const Backbone<T>& backbone);

template <typename T>
std::vector<NamedParam<T>> task_parameters(const TaskParams<T>& task, std::size_t task_index);

inline constexpr double kInitStd = 0.02;

template <typename T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed);

struct TaskInit {
  std::string name;
  std::size_t num_classes = 0;
  bool with_cls = true;
  std::vector<std::size_t> mem_counts;  // one entry per layer
  MemoryVariant variant = MemoryVariant::per_layer;
  std::uint64_t seed = 0;
  double init_std = kInitStd;
};

// Appends a freshly initialized task. The task class token starts as the base
// class token plus its position embedding, so its first-layer input equals the
// original class token's; memory and head weights are drawn N(0, 0.02^2).
template <typename T>
TaskParams<T>& add_task(Model<T>& model, const TaskInit& init);

std::size_t parameter_count(const auto& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace memvit
