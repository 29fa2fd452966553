#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "composer.hpp"
#include "config.hpp"
#include "trainer.hpp"

namespace memvit {

// Trains a fresh model end to end on the base head (full regime, full policy).
struct PretrainResult {
  Model<float> model;
  TrainResult train;
};
PretrainResult pretrain(const ModelConfig& config, std::uint64_t init_seed, const Dataset& data, TrainConfig cfg,
                        std::ostream* log = nullptr);

// Fine-tunes a copy of the backbone's base model (its tasks are dropped)
// under cfg.regime. The result is a one-task composite annotated with the
// training policy, or a task-free model when cfg.task_name is "base".
struct FinetuneResult {
  Composite composite;
  TrainResult train;
};
FinetuneResult finetune(const Model<float>& backbone, const Dataset& data, const TrainConfig& cfg,
                        std::ostream* log = nullptr);

struct SweepRow {
  Regime regime = Regime::head_cls;
  std::size_t mem_count = 0;
  MemoryVariant variant = MemoryVariant::per_layer;
  std::string placement;  // memory layers, e.g. "all", "first-2", "last-2", "none"
  double lr = 0;
  double best_holdout = 0;
  double test_acc = 0;
  std::size_t best_step = 0;
};

std::string format_rows(const std::vector<SweepRow>& rows);

// Regimes x learning rates (memory regimes also x memory counts).
// `each` receives every finished row and its metric log.
std::vector<SweepRow> sweep(const Model<float>& backbone, const Dataset& data, const TrainConfig& base,
                            const std::vector<Regime>& regimes, const std::vector<double>& learning_rates,
                            const std::vector<std::size_t>& mem_counts,
                            const std::function<void(const SweepRow&, const TrainResult&)>& each = {});

// Best holdout row per (regime, memory count); ties keep the earlier row.
std::vector<SweepRow> best_per_setting(const std::vector<SweepRow>& rows);

// Memory placement study under base.regime (a memory regime) with
// base.mem_count slots: first-K and last-K layers for each K, plus the three
// variants with memory everywhere. K = 0 has no memory, so it trains the
// head_cls regime under the memory regime's mask policy.
std::vector<SweepRow> ablate(const Model<float>& backbone, const Dataset& data, const TrainConfig& base,
                             const std::vector<std::size_t>& layer_counts, const std::vector<double>& learning_rates,
                             const std::function<void(const SweepRow&, const TrainResult&)>& each = {});

// Memory counts per layer for a placement: layers [0, K) or [L - K, L).
std::vector<std::size_t> placed_memory(std::size_t depth, std::size_t m, std::size_t k, bool first);

// Finite-difference check of every parameter tensor of a composed model in
// double precision.
struct GradcheckEntry {
  std::string tensor;
  std::size_t coords = 0;
  double max_rel_error = 0;
  std::size_t size = 0;  // elements in the tensor
};
struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double seconds = 0;
  double max_rel_error() const;
  std::string format() const;
};
// Depth-2, width-16 model with one task (class token, 2 memory slots per
// layer, 2 classes) evaluated under `policy`; the loss sums both heads'
// cross entropies. At least `min_coords` coordinates per tensor.
GradcheckReport run_gradcheck(std::uint64_t seed, MaskPolicy policy = MaskPolicy::masked_finetune,
                              std::size_t min_coords = 20, double step = 1e-5);

}  // namespace memvit
