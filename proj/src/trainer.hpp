#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "encoder.hpp"
#include "maskalg.hpp"
#include "model.hpp"
#include "tasks.hpp"

namespace memvit {

enum class Regime { full, head_only, head_cls, memory_full_attn, memory_masked };

std::string_view to_string(Regime r);
Regime parse_regime(std::string_view name);
// memory_masked trains under masked_finetune; every other regime under full.
MaskPolicy default_policy(Regime r);
bool uses_memory(Regime r);

struct TrainConfig {
  Regime regime = Regime::memory_masked;
  double base_lr = 0.1;
  double momentum = 0.9;
  std::size_t total_steps = 500;
  std::size_t warmup_steps = 5;
  std::size_t batch_size = 16;
  double grad_clip_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  double init_std = kInitStd;
  std::size_t mem_count = 5;               // uniform per layer
  std::vector<std::size_t> mem_counts;     // per-layer override; empty = uniform mem_count
  MemoryVariant variant = MemoryVariant::per_layer;
  double eval_fraction = 0.05;
  std::size_t eval_interval = 100;
  std::size_t train_eval_samples = 256;  // fixed train subset scored at each evaluation
  std::optional<MaskPolicy> policy;      // overrides default_policy(regime)
  bool flip = false;
  std::size_t crop_pad = 0;
  std::string task_name = "task";  // "base" trains the base head
  bool cache_features = true;      // head_only without augmentation reuses frozen read-out features

  void validate() const;
  MaskPolicy effective_policy() const { return policy.value_or(default_policy(regime)); }
  // Memory counts per layer for a model of the given depth.
  std::vector<std::size_t> memory_layout(std::size_t depth) const;
};

// Linear warmup to base_lr over warmup_steps, then cosine decay to 0.
double lr_at(const TrainConfig& cfg, std::size_t step);

// Attaches the task the regime trains: head only (read-out from CLS0), or a
// fresh task class token, plus memory for the memory regimes.
template <typename T>
TaskParams<T>& attach_task(Model<T>& model, const TrainConfig& cfg, std::size_t num_classes);

// Parameters updated by the regime for the named task ("base" = base head).
template <typename T>
std::vector<NamedParam<T>> select_trainable(const Model<T>& model, Regime regime, const std::string& task_name);

template <typename T>
std::set<ParamGroup> trainable_groups(const Model<T>& model, Regime regime, const std::string& task_name);

// SGD with momentum and optional global-norm clipping. Velocity buffers are
// owned here and persist across steps.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<NamedParam<T>> params, double momentum, double clip_norm);

  // Applies one update from the accumulated gradients and returns their
  // global norm before clipping. Throws ContractError on a non-finite gradient.
  double step(double lr);
  void zero_grad();
  const std::vector<NamedParam<T>>& params() const { return params_; }

 private:
  std::vector<NamedParam<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_, clip_norm_;
};

struct MetricRecord {
  std::size_t step = 0;
  double lr = 0;
  std::string split;
  double acc = 0;
  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

// One log line: step=<n> lr=<f> split=<train|holdout|test> acc=<f>
std::string format_record(const MetricRecord& r);

struct TrainResult {
  std::vector<MetricRecord> log;
  std::size_t best_step = 0;
  double best_holdout = 0;
  double test_acc = 0;
};

// Trains the regime's parameters of the named head on data.train, evaluates
// train/holdout accuracy every eval_interval steps, and leaves the model at
// the best-holdout snapshot. Records are also written to `log` when given.
template <typename T>
TrainResult train(Model<T>& model, const Dataset& data, const TrainConfig& cfg, std::ostream* log = nullptr);

// Top-1 accuracy of one head over the given dataset indices.
template <typename T>
double evaluate(const Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                const std::string& head, MaskPolicy policy, std::size_t batch_size = 64);

// Predicted class per index.
template <typename T>
std::vector<int> predict(const Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                         const std::string& head, MaskPolicy policy, std::size_t batch_size = 64);

}  // namespace memvit
