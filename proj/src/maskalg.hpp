#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "model.hpp"
#include "tensor.hpp"

namespace memvit {

enum class RoleKind { input, cls0, task_cls, task_mem };

// Role of one token. Task indices are 1-based; `index` is the patch index
// for inputs and the slot for memory tokens.
struct TokenRole {
  RoleKind kind = RoleKind::input;
  std::size_t task = 0;
  std::size_t layer = 0;
  std::size_t index = 0;

  friend bool operator==(const TokenRole&, const TokenRole&) = default;
};

std::string to_string(const TokenRole& r);

enum class MaskPolicy { full, masked_finetune, extension, concatenation };

std::string_view to_string(MaskPolicy p);
MaskPolicy parse_policy(std::string_view name);

// Token-count summary of one attached task.
struct TaskShape {
  bool has_cls = true;
  MemoryVariant variant = MemoryVariant::per_layer;
  std::vector<std::size_t> mem_counts;  // per layer
};

// Carried tokens: [CLS0, INP x N, TASK_CLS(j) for tasks with a class token,
// carried memory slots of propagated tasks]. Per-layer key extension:
// per_layer memory of task 1, then task 2, ... Memory never queries.
struct TokenLayout {
  std::size_t num_patches = 0;
  std::size_t num_tasks = 0;
  std::vector<TokenRole> carried;
  std::vector<std::vector<TokenRole>> extension;  // one list per layer

  std::size_t depth() const { return extension.size(); }
  std::size_t carried_count() const { return carried.size(); }
  // Position of the token feeding task j's head (0 = CLS0 for tasks
  // without their own class token).
  std::size_t readout(std::size_t task) const;
  // First carried position of task j's propagated memory slots.
  std::size_t carried_memory_offset(std::size_t task) const;
};

TokenLayout make_layout(std::size_t num_patches, std::size_t depth, const std::vector<TaskShape>& tasks);

template <typename T>
std::vector<TaskShape> task_shapes(const Model<T>& model);

template <typename T>
TokenLayout layout_for(const Model<T>& model) {
  return make_layout(model.config.num_patches(), model.config.depth, task_shapes(model));
}

// Query rows = carried tokens; key columns = carried tokens followed by the
// layer's extension tokens.
MaskMatrix build_mask(const TokenLayout& layout, MaskPolicy policy, std::size_t layer);

// Result of the symbolic dependency analysis over the masked attention graph.
struct DependencyReport {
  MaskPolicy policy = MaskPolicy::concatenation;
  std::size_t depth = 0;
  std::size_t num_tasks = 0;
  // Read-out name ("base" or "task<j>") -> parameter groups its logits can depend on.
  std::map<std::string, std::set<ParamGroup>> closure;
  bool base_isolated = false;          // base logits independent of every task group
  bool later_tasks_isolated = false;   // task j independent of tasks > j
  bool tasks_mutually_isolated = false;  // task j independent of every other task

  const std::set<ParamGroup>& of(const std::string& readout) const;
  std::string format() const;
};

// L-layer transitive closure of each read-out token over the mask graph.
// Throws ContractError for the full policy.
DependencyReport verify_reuse(const TokenLayout& layout, MaskPolicy policy, std::size_t depth);

// Text table of a mask using the role names of its rows and columns.
std::string format_mask(const TokenLayout& layout, const MaskMatrix& mask, std::size_t layer);

}  // namespace memvit
