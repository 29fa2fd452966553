#include "diagnostics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace memvit {

template <typename T>
std::vector<AttnMemStat> attention_stats(const ForwardTrace<T>& trace, double threshold) {
  if (trace.attention.empty()) throw UsageError("attention_stats: trace holds no attention weights");
  const auto& layout = trace.layout;
  std::vector<std::size_t> inputs;
  for (std::size_t i = 0; i < layout.carried.size(); ++i) {
    if (layout.carried[i].kind == RoleKind::input) inputs.push_back(i);
  }
  std::vector<AttnMemStat> out;
  for (std::size_t l = 0; l < trace.attention.size(); ++l) {
    const auto& a = trace.attention[l];
    const std::size_t batch = a.dim(0), heads = a.dim(1), rows = a.dim(2), cols = a.dim(3);
    std::vector<char> is_mem(cols, 0), is_cls(cols, 0);
    for (std::size_t c = 0; c < cols; ++c) {
      const auto& role = c < rows ? layout.carried[c] : layout.extension[l][c - rows];
      is_mem[c] = role.kind == RoleKind::task_mem;
      is_cls[c] = role.kind == RoleKind::cls0 || role.kind == RoleKind::task_cls;
    }
    const bool any_mem = std::find(is_mem.begin(), is_mem.end(), 1) != is_mem.end();
    const bool any_cls = std::find(is_cls.begin(), is_cls.end(), 1) != is_cls.end();
    for (std::size_t h = 0; h < heads; ++h) {
      std::size_t n_mem = 0, n_cls = 0, n_self = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        bool hit_mem = false, hit_cls = false, hit_self = false;
        for (std::size_t r : inputs) {
          const T* row = a.data().data() + ((b * heads + h) * rows + r) * cols;
          double mem = 0, cls = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            if (is_mem[c]) mem += double(row[c]);
            if (is_cls[c]) cls += double(row[c]);
          }
          hit_mem |= any_mem && mem >= threshold;
          hit_cls |= any_cls && cls >= threshold;
          hit_self |= double(row[r]) >= threshold;
        }
        n_mem += hit_mem;
        n_cls += hit_cls;
        n_self += hit_self && !inputs.empty();
      }
      out.push_back({l, h, double(n_mem) / double(batch), double(n_cls) / double(batch), double(n_self) / double(batch)});
    }
  }
  return out;
}

template std::vector<AttnMemStat> attention_stats<float>(const ForwardTrace<float>&, double);
template std::vector<AttnMemStat> attention_stats<double>(const ForwardTrace<double>&, double);

std::string format_attention_table(const std::vector<double>& thresholds,
                                   const std::vector<std::vector<AttnMemStat>>& init_stats,
                                   const std::vector<std::vector<AttnMemStat>>& trained_stats) {
  if (init_stats.size() != thresholds.size() || trained_stats.size() != thresholds.size()) {
    throw DimensionError("format_attention_table: one stat list per threshold required");
  }
  auto per_layer = [](const std::vector<AttnMemStat>& stats) {
    std::vector<double> sum;
    std::vector<std::size_t> n;
    for (const auto& s : stats) {
      if (s.layer >= sum.size()) {
        sum.resize(s.layer + 1, 0.0);
        n.resize(s.layer + 1, 0);
      }
      sum[s.layer] += s.fraction_memory;
      ++n[s.layer];
    }
    for (std::size_t l = 0; l < sum.size(); ++l) sum[l] /= double(std::max<std::size_t>(n[l], 1));
    return sum;
  };
  std::string s = "threshold  layer  init_fraction_memory  trained_fraction_memory\n";
  char buf[128];
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    const auto a = per_layer(init_stats[t]), b = per_layer(trained_stats[t]);
    for (std::size_t l = 0; l < std::max(a.size(), b.size()); ++l) {
      std::snprintf(buf, sizeof buf, "%9.2f  %5zu  %20.4f  %23.4f\n", thresholds[t], l, l < a.size() ? a[l] : 0.0,
                    l < b.size() ? b[l] : 0.0);
      s += buf;
    }
  }
  return s;
}

std::size_t backbone_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.width, hd = c.hidden(), n = c.num_patches();
  const std::size_t embed = c.patch_dim() * d + d + (n + 1) * d + d;
  const std::size_t layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hd + hd) + (hd * d + d);
  return embed + c.depth * layer + 2 * d + d * c.num_classes + c.num_classes;
}

ParamBreakdown param_count(const ModelConfig& config, Regime regime, std::size_t num_classes,
                           const std::vector<std::size_t>& mem_counts) {
  config.validate();
  ParamBreakdown p;
  const std::size_t d = config.width;
  p.head_weights = d * num_classes;
  p.head_bias = num_classes;
  if (regime != Regime::head_only) p.task_cls = d;
  if (uses_memory(regime)) {
    const std::size_t m = std::accumulate(mem_counts.begin(), mem_counts.end(), std::size_t(0));
    if (m == 0) throw ConfigError("regime " + std::string(to_string(regime)) + " requires memory but m = 0");
    p.memory = m * d;
  }
  if (regime == Regime::full) p.backbone = backbone_parameter_count(config);
  return p;
}

std::size_t incremental_parameters(std::size_t width, const std::vector<std::size_t>& mem_counts,
                                   std::size_t num_classes) {
  const std::size_t m = std::accumulate(mem_counts.begin(), mem_counts.end(), std::size_t(0));
  return width + m * width + width * num_classes + num_classes;
}

std::uint64_t precomputed_memory_macs(std::size_t width, std::size_t carried_queries,
                                      const std::vector<std::size_t>& mem_counts) {
  std::uint64_t total = 0;
  for (std::size_t m : mem_counts) total += 2ull * carried_queries * m * width;
  return total;
}

std::uint64_t naive_memory_macs(std::size_t width, std::size_t carried_queries,
                                const std::vector<std::size_t>& mem_counts) {
  std::uint64_t total = precomputed_memory_macs(width, carried_queries, mem_counts);
  for (std::size_t m : mem_counts) total += std::uint64_t(m) * width + 2ull * m * width * width;
  return total;
}

std::uint64_t forward_macs(const ModelConfig& c) {
  const std::uint64_t d = c.width, hd = c.hidden(), n = c.num_patches(), t = n + 1;
  const std::uint64_t layer = 3 * t * d * d + 2 * t * t * d + t * d * d + 2 * t * d * hd;
  return n * c.patch_dim() * d + c.depth * layer + d * c.num_classes;
}

CostReport flops_report(const ModelConfig& config, std::size_t mem_count, std::size_t num_classes) {
  config.validate();
  CostReport r;
  r.config = config;
  r.num_classes = num_classes;
  r.mem_counts.assign(config.depth, mem_count);
  r.carried_queries = config.num_patches() + 1;
  r.head_only = param_count(config, Regime::head_only, num_classes);
  r.head_cls = param_count(config, Regime::head_cls, num_classes);
  r.memory = mem_count > 0 ? param_count(config, Regime::memory_masked, num_classes, r.mem_counts) : r.head_cls;
  r.full = param_count(config, Regime::full, num_classes);
  r.forward_macs = forward_macs(config);
  r.naive_macs = naive_memory_macs(config.width, r.carried_queries, r.mem_counts);
  r.precomputed_macs = precomputed_memory_macs(config.width, r.carried_queries, r.mem_counts);
  r.masked_macs = precomputed_memory_macs(config.width, 1, r.mem_counts);
  return r;
}

std::string CostReport::format() const {
  std::string s;
  char buf[256];
  auto line = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    s += buf;
  };
  line("shape: D=%zu L=%zu N=%zu heads=%zu mlp=%zu classes=%zu m=%zu per layer\n", config.width, config.depth,
       config.num_patches(), config.heads, config.hidden(), num_classes, mem_counts.empty() ? 0 : mem_counts[0]);
  line("\n%-18s %12s %10s %12s %12s %10s %14s\n", "regime", "backbone", "class", "memory", "head_w", "head_b", "total");
  for (auto [name, p] : {std::pair{"head_only", head_only}, std::pair{"head_cls", head_cls},
                         std::pair{"memory", memory}, std::pair{"full", full}}) {
    line("%-18s %12zu %10zu %12zu %12zu %10zu %14zu\n", name, p.backbone, p.task_cls, p.memory, p.head_weights,
         p.head_bias, p.total());
  }
  line("\n%-34s %16s %16s %10s\n", "cost per image", "MACs", "FLOPs", "ratio");
  line("%-34s %16llu %16llu %10s\n", "forward (no memory)", (unsigned long long)forward_macs,
       2ull * (unsigned long long)forward_macs, "-");
  line("%-34s %16llu %16llu %9.3f%%\n", "memory, precomputed keys/values", (unsigned long long)precomputed_macs,
       2ull * (unsigned long long)precomputed_macs, 100.0 * precomputed_ratio());
  line("%-34s %16llu %16llu %9.3f%%\n", "memory, naive", (unsigned long long)naive_macs,
       2ull * (unsigned long long)naive_macs, 100.0 * naive_ratio());
  line("%-34s %16llu %16llu %9.3f%%\n", "memory, masked (task class only)", (unsigned long long)masked_macs,
       2ull * (unsigned long long)masked_macs, 100.0 * double(masked_macs) / double(forward_macs));
  line("%-34s %16s %16.3g %10s\n", "quoted reference (m = 5)", "-", reference_flops, "-");
  line("without masks memory is read by %zu query tokens per layer; the quoted figure matches no mode\n",
       carried_queries);
  return s;
}

}  // namespace memvit
