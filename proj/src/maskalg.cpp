#include "maskalg.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace memvit {

std::string to_string(const TokenRole& r) {
  switch (r.kind) {
    case RoleKind::input: return "INP(" + std::to_string(r.index) + ")";
    case RoleKind::cls0: return "CLS0";
    case RoleKind::task_cls: return "TASK_CLS(" + std::to_string(r.task) + ")";
    case RoleKind::task_mem:
      return "TASK_MEM(" + std::to_string(r.task) + "," + std::to_string(r.layer) + "," + std::to_string(r.index) + ")";
  }
  return "?";
}

std::string_view to_string(MaskPolicy p) {
  switch (p) {
    case MaskPolicy::full: return "full";
    case MaskPolicy::masked_finetune: return "masked_finetune";
    case MaskPolicy::extension: return "extension";
    case MaskPolicy::concatenation: return "concatenation";
  }
  return "?";
}

MaskPolicy parse_policy(std::string_view name) {
  if (name == "full") return MaskPolicy::full;
  if (name == "masked_finetune") return MaskPolicy::masked_finetune;
  if (name == "extension") return MaskPolicy::extension;
  if (name == "concatenation") return MaskPolicy::concatenation;
  throw ConfigError("unknown mask policy '" + std::string(name) + "'");
}

std::size_t TokenLayout::readout(std::size_t task) const {
  for (std::size_t i = 0; i < carried.size(); ++i) {
    if (carried[i].kind == RoleKind::task_cls && carried[i].task == task) return i;
  }
  return 0;
}

std::size_t TokenLayout::carried_memory_offset(std::size_t task) const {
  for (std::size_t i = 0; i < carried.size(); ++i) {
    if (carried[i].kind == RoleKind::task_mem && carried[i].task == task) return i;
  }
  throw NotFoundError("task " + std::to_string(task) + " has no carried memory");
}

TokenLayout make_layout(std::size_t num_patches, std::size_t depth, const std::vector<TaskShape>& tasks) {
  TokenLayout layout;
  layout.num_patches = num_patches;
  layout.num_tasks = tasks.size();
  layout.carried.push_back({RoleKind::cls0, 0, 0, 0});
  for (std::size_t i = 0; i < num_patches; ++i) layout.carried.push_back({RoleKind::input, 0, 0, i});
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    if (tasks[j].has_cls) layout.carried.push_back({RoleKind::task_cls, j + 1, 0, 0});
  }
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    if (tasks[j].variant == MemoryVariant::per_layer) continue;
    const std::size_t m = tasks[j].mem_counts.empty() ? 0 : tasks[j].mem_counts[0];
    for (std::size_t s = 0; s < m; ++s) layout.carried.push_back({RoleKind::task_mem, j + 1, 0, s});
  }
  layout.extension.resize(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    for (std::size_t j = 0; j < tasks.size(); ++j) {
      if (tasks[j].variant != MemoryVariant::per_layer) continue;
      const std::size_t m = l < tasks[j].mem_counts.size() ? tasks[j].mem_counts[l] : 0;
      for (std::size_t s = 0; s < m; ++s) layout.extension[l].push_back({RoleKind::task_mem, j + 1, l, s});
    }
  }
  return layout;
}

template <typename T>
std::vector<TaskShape> task_shapes(const Model<T>& model) {
  std::vector<TaskShape> out;
  for (const auto& t : model.tasks) {
    TaskShape s;
    s.has_cls = t.has_cls();
    s.variant = t.variant;
    for (std::size_t l = 0; l < model.config.depth; ++l) s.mem_counts.push_back(t.mem_count(l));
    out.push_back(std::move(s));
  }
  return out;
}

template std::vector<TaskShape> task_shapes<float>(const Model<float>&);
template std::vector<TaskShape> task_shapes<double>(const Model<double>&);

namespace {

// 0 for backbone tokens (CLS0, INP), otherwise the task index.
std::size_t owner(const TokenRole& r) {
  return (r.kind == RoleKind::input || r.kind == RoleKind::cls0) ? 0 : r.task;
}

bool allowed(std::size_t q_owner, std::size_t k_owner, MaskPolicy policy) {
  if (policy == MaskPolicy::full) return true;
  if (q_owner == 0) return k_owner == 0;
  if (k_owner == 0 || k_owner == q_owner) return true;
  return policy == MaskPolicy::extension && k_owner < q_owner;
}

const TokenRole& key_role(const TokenLayout& layout, std::size_t layer, std::size_t col) {
  return col < layout.carried.size() ? layout.carried[col] : layout.extension[layer][col - layout.carried.size()];
}

}  // namespace

MaskMatrix build_mask(const TokenLayout& layout, MaskPolicy policy, std::size_t layer) {
  if (layer >= layout.depth()) throw IndexError("build_mask: layer " + std::to_string(layer) + " out of range");
  const std::size_t rows = layout.carried.size();
  const std::size_t cols = rows + layout.extension[layer].size();
  MaskMatrix mask(rows, cols, false);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t qo = owner(layout.carried[i]);
    for (std::size_t j = 0; j < cols; ++j) mask.set(i, j, allowed(qo, owner(key_role(layout, layer, j)), policy));
  }
  return mask;
}

const std::set<ParamGroup>& DependencyReport::of(const std::string& readout) const {
  auto it = closure.find(readout);
  if (it == closure.end()) throw NotFoundError("no read-out named '" + readout + "'");
  return it->second;
}

DependencyReport verify_reuse(const TokenLayout& layout, MaskPolicy policy, std::size_t depth) {
  if (policy == MaskPolicy::full) throw ContractError("verify_reuse: the full policy gives no reuse guarantee");
  if (depth > layout.depth()) throw DimensionError("verify_reuse: depth exceeds layout");
  const std::size_t n = layout.carried.size();
  std::vector<std::set<ParamGroup>> deps(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = layout.carried[i];
    switch (r.kind) {
      case RoleKind::cls0: deps[i] = {{GroupKind::backbone}, {GroupKind::cls0}}; break;
      case RoleKind::input: deps[i] = {{GroupKind::backbone}, {GroupKind::input}}; break;
      case RoleKind::task_cls: deps[i] = {{GroupKind::task_cls, r.task}}; break;
      case RoleKind::task_mem: deps[i] = {{GroupKind::task_memory, r.task}}; break;
    }
  }
  for (std::size_t l = 0; l < depth; ++l) {
    const MaskMatrix mask = build_mask(layout, policy, l);
    std::vector<std::set<ParamGroup>> next = deps;
    for (std::size_t i = 0; i < n; ++i) {
      next[i].insert({GroupKind::backbone});
      // Propagated memory slots pick up their per-layer additions.
      if (layout.carried[i].kind == RoleKind::task_mem && l > 0) next[i].insert({GroupKind::task_memory, layout.carried[i].task});
      for (std::size_t j = 0; j < mask.cols; ++j) {
        if (!mask.at(i, j)) continue;
        if (j < n) {
          next[i].insert(deps[j].begin(), deps[j].end());
        } else {
          next[i].insert({GroupKind::task_memory, layout.extension[l][j - n].task});
        }
      }
    }
    deps = std::move(next);
  }

  DependencyReport report;
  report.policy = policy;
  report.depth = depth;
  report.num_tasks = layout.num_tasks;
  report.closure["base"] = deps[0];
  for (std::size_t j = 1; j <= layout.num_tasks; ++j) {
    auto c = deps[layout.readout(j)];
    c.insert({GroupKind::task_head, j});
    report.closure["task" + std::to_string(j)] = std::move(c);
  }

  auto touches = [](const std::set<ParamGroup>& c, auto pred) {
    return std::any_of(c.begin(), c.end(), pred);
  };
  auto is_task = [](const ParamGroup& g) {
    return g.kind == GroupKind::task_cls || g.kind == GroupKind::task_memory || g.kind == GroupKind::task_head;
  };
  report.base_isolated = !touches(report.closure["base"], is_task);
  report.later_tasks_isolated = true;
  report.tasks_mutually_isolated = true;
  for (std::size_t j = 1; j <= layout.num_tasks; ++j) {
    const auto& c = report.closure["task" + std::to_string(j)];
    if (touches(c, [&](const ParamGroup& g) { return is_task(g) && g.task > j; })) report.later_tasks_isolated = false;
    if (touches(c, [&](const ParamGroup& g) { return is_task(g) && g.task != j; })) report.tasks_mutually_isolated = false;
  }
  return report;
}

std::string DependencyReport::format() const {
  std::ostringstream os;
  os << "dependency closure (policy=" << to_string(policy) << ", depth=" << depth << ", tasks=" << num_tasks << ")\n";
  std::vector<std::string> names = {"base"};
  for (std::size_t j = 1; j <= num_tasks; ++j) names.push_back("task" + std::to_string(j));
  for (const auto& name : names) {
    os << "  " << std::left << std::setw(8) << name << " <- {";
    bool first = true;
    for (const auto& g : closure.at(name)) {
      os << (first ? "" : ", ") << to_string(g);
      first = false;
    }
    os << "}\n";
  }
  os << "  base output isolated from tasks: " << (base_isolated ? "yes" : "NO") << "\n";
  os << "  tasks isolated from later tasks: " << (later_tasks_isolated ? "yes" : "NO") << "\n";
  os << "  tasks mutually isolated:         " << (tasks_mutually_isolated ? "yes" : "NO") << "\n";
  return os.str();
}

std::string format_mask(const TokenLayout& layout, const MaskMatrix& mask, std::size_t layer) {
  // Collapse tokens into the role classes INP, CLS, C_j, M_j.
  auto label = [](const TokenRole& r) -> std::string {
    switch (r.kind) {
      case RoleKind::input: return "INP";
      case RoleKind::cls0: return "CLS";
      case RoleKind::task_cls: return "C" + std::to_string(r.task);
      case RoleKind::task_mem: return "M" + std::to_string(r.task);
    }
    return "?";
  };
  std::vector<std::string> row_labels, col_labels;
  auto add_unique = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& r : layout.carried) add_unique(row_labels, label(r));
  for (std::size_t j = 0; j < mask.cols; ++j) add_unique(col_labels, label(key_role(layout, layer, j)));

  std::ostringstream os;
  os << "Q\\K ";
  for (const auto& c : col_labels) os << std::setw(5) << c;
  os << "\n";
  for (const auto& rl : row_labels) {
    os << std::left << std::setw(4) << rl << std::right;
    for (const auto& cl : col_labels) {
      std::size_t yes = 0, total = 0;
      for (std::size_t i = 0; i < mask.rows; ++i) {
        if (label(layout.carried[i]) != rl) continue;
        for (std::size_t j = 0; j < mask.cols; ++j) {
          if (label(key_role(layout, layer, j)) != cl) continue;
          ++total;
          yes += mask.at(i, j);
        }
      }
      const char* cell = yes == 0 ? "-" : (yes == total ? "Y" : "~");
      os << std::setw(5) << cell;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace memvit
