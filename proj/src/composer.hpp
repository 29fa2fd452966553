#pragma once

#include <string>
#include <vector>

#include "maskalg.hpp"
#include "model.hpp"
#include "tasks.hpp"
#include "trainer.hpp"

namespace memvit {

// SHA-256 (lowercase hex) over the little-endian f32 bytes of the backbone
// tensors in canonical order.
std::string backbone_fingerprint(const Backbone<float>& backbone);

// Everything one fine-tuned task adds to a frozen backbone.
struct TaskPack {
  std::string task_name;
  MemoryVariant variant = MemoryVariant::per_layer;
  Tensor<float> cls;                  // [1, D]
  std::vector<Tensor<float>> memory;  // L entries, [m_l, D]; undefined when m_l = 0
  Tensor<float> head_w, head_b;       // [D, k], [k]
  MaskPolicy trained_policy = MaskPolicy::masked_finetune;
  std::string base_fingerprint;
  // Tasks this pack attended to while training, in order (extension packs only).
  std::vector<std::string> prerequisites;

  std::size_t depth() const { return memory.size(); }
  std::size_t width() const { return cls.dim(1); }
  std::size_t num_classes() const { return head_b.numel(); }
  std::vector<std::size_t> mem_counts() const;
  std::size_t parameter_count() const;
};

// A backbone with tasks attached and the mask policy it is evaluated under.
// Fine-tuned standalone models are composites of one task under their
// training policy; compose() builds multi-task ones.
struct Composite {
  Model<float> model;
  MaskPolicy policy = MaskPolicy::full;
  std::vector<MaskPolicy> trained_policies;  // one per task
  std::vector<std::vector<std::string>> prerequisites;  // one per task

  // True when every task was trained behind masks, so the composite leaves
  // the base model and the other tasks untouched.
  bool preserving() const;
  std::size_t num_tasks() const { return model.tasks.size(); }
  TaskPack pack(std::size_t j) const;  // 0-based
};

// Deep copy of the named task's class token, memory and head. Throws
// NotFoundError for an unknown task and ConfigError for a task without its
// own class token.
TaskPack extract_pack(const Model<float>& model, const std::string& task_name, MaskPolicy trained_policy);

// Attaches packs to a copy of base's backbone (base's own tasks are ignored).
// policy is concatenation or extension. Throws FingerprintError when a pack
// was trained against another backbone and ConfigError for duplicate names,
// shape mismatches, or extension packs out of training order.
Composite compose(const Model<float>& base, const std::vector<TaskPack>& packs, MaskPolicy policy);

inline Composite concat(const Model<float>& base, const std::vector<TaskPack>& packs) {
  return compose(base, packs, MaskPolicy::concatenation);
}

// Trains a new task on top of an extension composite. Its tokens see every
// existing token; existing tokens never see it. cfg.regime must attach a task
// class token without touching the backbone (head_cls or a memory regime).
Composite extend(const Composite& composite, const Dataset& data, const TrainConfig& cfg,
                 TrainResult* result = nullptr, std::ostream* log = nullptr);

struct DeviationReport {
  double base = 0;  // max |composite CLS0 logits - backbone logits|
  std::vector<std::pair<std::string, double>> tasks;  // vs the task's standalone reference

  double max() const;
  std::string format() const;
};

// Compares the composite on a probe batch against references built from the
// same packs: the bare backbone for CLS0; for concatenation the single-pack
// model under the pack's training policy; for extension the composite of the
// packs up to and including the task.
DeviationReport verify_composite(const Composite& composite, const Tensor<float>& probe);

}  // namespace memvit
