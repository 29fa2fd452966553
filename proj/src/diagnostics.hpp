#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "encoder.hpp"
#include "trainer.hpp"

namespace memvit {

// For one layer and head: fraction of samples with at least one input-patch
// query whose total attention to the group reaches the threshold.
struct AttnMemStat {
  std::size_t layer = 0;
  std::size_t head = 0;
  double fraction_memory = 0;
  double fraction_cls = 0;  // CLS0 and task class tokens
  double fraction_self = 0;
};

// Requires a trace recorded with keep_trace. Empty groups score 0.
template <typename T>
std::vector<AttnMemStat> attention_stats(const ForwardTrace<T>& trace, double threshold = 0.5);

// Side-by-side memory fractions of two models per layer (averaged over heads)
// at each threshold.
std::string format_attention_table(const std::vector<double>& thresholds,
                                   const std::vector<std::vector<AttnMemStat>>& init_stats,
                                   const std::vector<std::vector<AttnMemStat>>& trained_stats);

struct ParamBreakdown {
  std::size_t backbone = 0;  // encoder, embeddings and base head
  std::size_t task_cls = 0;
  std::size_t memory = 0;
  std::size_t head_weights = 0;
  std::size_t head_bias = 0;

  std::size_t total() const { return backbone + task_cls + memory + head_weights + head_bias; }
};

std::size_t backbone_parameter_count(const ModelConfig& config);

// Trainable parameters of a regime fine-tuning a task with the given class
// count and per-layer memory (memory regimes only).
ParamBreakdown param_count(const ModelConfig& config, Regime regime, std::size_t num_classes,
                           const std::vector<std::size_t>& mem_counts = {});

// Parameters one task pack adds: D + sum(m_l) D + D k + k.
std::size_t incremental_parameters(std::size_t width, const std::vector<std::size_t>& mem_counts,
                                   std::size_t num_classes);

// Multiply-accumulates of extra work caused by memory. Precomputed mode
// treats memory keys and values as constants: 2 * carried * m_l * D per layer.
std::uint64_t precomputed_memory_macs(std::size_t width, std::size_t carried_queries,
                                      const std::vector<std::size_t>& mem_counts);
// Naive mode adds the memory layernorm (one MAC per element) and the key and
// value projections of the memory rows.
std::uint64_t naive_memory_macs(std::size_t width, std::size_t carried_queries,
                                const std::vector<std::size_t>& mem_counts);

struct CostReport {
  ModelConfig config;
  std::size_t num_classes = 0;
  std::vector<std::size_t> mem_counts;
  std::size_t carried_queries = 0;  // query rows that read memory without masks
  ParamBreakdown head_only, head_cls, memory, full;
  std::uint64_t forward_macs = 0;  // plain encoder forward for one image
  std::uint64_t naive_macs = 0;
  std::uint64_t precomputed_macs = 0;
  std::uint64_t masked_macs = 0;  // precomputed, task class token as the only reader
  double reference_flops = 25e6;  // externally quoted incremental figure for m = 5

  double precomputed_ratio() const { return double(precomputed_macs) / double(forward_macs); }
  double naive_ratio() const { return double(naive_macs) / double(forward_macs); }
  std::string format() const;
};

// Analytic MAC counts for one image (1 MAC = 2 FLOPs). Without masks the
// class token and all N patches read memory, N + 1 query rows; under masking
// only the task class token does.
std::uint64_t forward_macs(const ModelConfig& config);
CostReport flops_report(const ModelConfig& config, std::size_t mem_count, std::size_t num_classes);

}  // namespace memvit
