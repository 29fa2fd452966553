#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>

namespace memvit {

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::full: return "full";
    case Regime::head_only: return "head_only";
    case Regime::head_cls: return "head_cls";
    case Regime::memory_full_attn: return "memory_full_attn";
    case Regime::memory_masked: return "memory_masked";
  }
  return "?";
}

Regime parse_regime(std::string_view name) {
  for (auto r : {Regime::full, Regime::head_only, Regime::head_cls, Regime::memory_full_attn, Regime::memory_masked}) {
    if (to_string(r) == name) return r;
  }
  throw ConfigError("unknown regime '" + std::string(name) +
                    "' (expected full, head_only, head_cls, memory_full_attn or memory_masked)");
}

MaskPolicy default_policy(Regime r) {
  return r == Regime::memory_masked ? MaskPolicy::masked_finetune : MaskPolicy::full;
}

bool uses_memory(Regime r) { return r == Regime::memory_full_attn || r == Regime::memory_masked; }

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
  if (!(base_lr > 0)) fail("base_lr must be positive");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum must lie in [0, 1)");
  if (total_steps > 0 && warmup_steps >= total_steps) fail("warmup_steps must be below total_steps");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(grad_clip_norm >= 0)) fail("grad_clip_norm must be non-negative");
  if (!(init_std > 0)) fail("init_std must be positive");
  if (!(eval_fraction >= 0 && eval_fraction < 1)) fail("eval_fraction must lie in [0, 1)");
  if (eval_interval == 0) fail("eval_interval must be positive");
  if (task_name.empty()) fail("task_name must be non-empty");
  if (task_name == "base" && regime != Regime::full && regime != Regime::head_only) {
    fail("the base head can only be trained with the full or head_only regime");
  }
}

std::vector<std::size_t> TrainConfig::memory_layout(std::size_t depth) const {
  if (!mem_counts.empty()) {
    if (mem_counts.size() != depth) {
      throw ConfigError("train: mem_counts has " + std::to_string(mem_counts.size()) + " entries for depth " +
                        std::to_string(depth));
    }
    return mem_counts;
  }
  return uniform_memory(depth, mem_count, variant);
}

double lr_at(const TrainConfig& cfg, std::size_t step) {
  if (step >= cfg.total_steps) {
    throw IndexError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + ")");
  }
  if (step < cfg.warmup_steps) return cfg.base_lr * double(step + 1) / double(cfg.warmup_steps);
  const double t = double(step - cfg.warmup_steps) / double(cfg.total_steps - cfg.warmup_steps);
  return 0.5 * cfg.base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
TaskParams<T>& attach_task(Model<T>& model, const TrainConfig& cfg, std::size_t num_classes) {
  TaskInit init;
  init.name = cfg.task_name;
  init.num_classes = num_classes;
  init.seed = cfg.seed * 0x9E3779B97F4A7C15ull + 0x7A5C;
  init.init_std = cfg.init_std;
  init.with_cls = cfg.regime != Regime::head_only;
  init.variant = cfg.variant;
  if (uses_memory(cfg.regime)) {
    init.mem_counts = cfg.memory_layout(model.config.depth);
    std::size_t total = 0;
    for (auto m : init.mem_counts) total += m;
    if (total == 0) throw ConfigError("regime " + std::string(to_string(cfg.regime)) + " requires memory but m = 0");
  }
  return add_task(model, init);
}

template <typename T>
std::vector<NamedParam<T>> select_trainable(const Model<T>& model, Regime regime, const std::string& task_name) {
  if (task_name == "base") {
    auto all = backbone_parameters(model.backbone);
    if (regime == Regime::full) return all;
    if (regime == Regime::head_only) {
      std::vector<NamedParam<T>> out;
      for (auto& p : all) {
        if (p.name == "backbone/head_w" || p.name == "backbone/head_b") out.push_back(p);
      }
      return out;
    }
    throw ConfigError("regime " + std::string(to_string(regime)) + " has no parameters on the base head");
  }
  const auto idx = model.task_index(task_name);
  if (!idx) throw NotFoundError("no task named '" + task_name + "'");
  const auto& task = model.tasks[*idx];
  auto own = task_parameters(task, *idx + 1);
  if (regime == Regime::full) {
    auto out = backbone_parameters(model.backbone);
    out.insert(out.end(), own.begin(), own.end());
    return out;
  }
  if ((regime == Regime::head_cls || uses_memory(regime)) && !task.has_cls()) {
    throw ConfigError("regime " + std::string(to_string(regime)) + " needs a task class token on '" + task_name + "'");
  }
  if (uses_memory(regime)) {
    bool any = false;
    for (std::size_t l = 0; l < model.config.depth; ++l) any |= task.mem_count(l) > 0;
    if (!any) throw ConfigError("regime " + std::string(to_string(regime)) + " requires memory but m = 0");
  }
  std::vector<NamedParam<T>> out;
  for (auto& p : own) {
    const auto k = p.group.kind;
    const bool take = k == GroupKind::task_head || (k == GroupKind::task_cls && regime != Regime::head_only) ||
                      (k == GroupKind::task_memory && uses_memory(regime));
    if (take) out.push_back(p);
  }
  return out;
}

template <typename T>
std::set<ParamGroup> trainable_groups(const Model<T>& model, Regime regime, const std::string& task_name) {
  std::set<ParamGroup> out;
  for (const auto& p : select_trainable(model, regime, task_name)) out.insert(p.group);
  return out;
}

template <typename T>
Sgd<T>::Sgd(std::vector<NamedParam<T>> params, double momentum, double clip_norm)
    : params_(std::move(params)), momentum_(momentum), clip_norm_(clip_norm) {
  for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), T(0));
}

template <typename T>
double Sgd<T>::step(double lr) {
  double sq = 0;
  for (const auto& p : params_) {
    if (!p.tensor.requires_grad()) throw UsageError("sgd: parameter " + p.name + " has no gradient buffer");
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(double(g))) throw ContractError("sgd: non-finite gradient in " + p.name);
      sq += double(g) * double(g);
    }
  }
  const double norm = std::sqrt(sq);
  const T factor = (clip_norm_ > 0 && norm > clip_norm_) ? T(clip_norm_ / norm) : T(1);
  const T mu = T(momentum_), rate = T(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto data = params_[i].tensor.data();
    auto grad = params_[i].tensor.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = mu * v[j] + factor * grad[j];
      data[j] -= rate * v[j];
    }
  }
  return norm;
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::string format_record(const MetricRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "step=%zu lr=%.6g split=%s acc=%.6f", r.step, r.lr, r.split.c_str(), r.acc);
  return buf;
}

namespace {

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j) {
    if (logits[row * c + j] > logits[row * c + best]) best = j;
  }
  return best;
}

template <typename T>
std::vector<T> snapshot(const std::vector<NamedParam<T>>& params) {
  std::vector<T> out;
  for (const auto& p : params) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

template <typename T>
void restore(const std::vector<NamedParam<T>>& params, const std::vector<T>& values) {
  std::size_t at = 0;
  for (auto p : params) {
    auto d = p.tensor.data();
    std::copy_n(values.begin() + std::ptrdiff_t(at), d.size(), d.begin());
    at += d.size();
  }
}

// Read-out features of the frozen encoder for the given indices.
template <typename T>
Tensor<T> frozen_features(const Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                          const std::string& head, MaskPolicy policy) {
  const std::size_t d = model.config.width;
  Tensor<T> out = Tensor<T>::zeros({indices.size(), d});
  ForwardOptions opts;
  opts.policy = policy;
  opts.only_head = head;
  for (std::size_t b = 0; b < indices.size(); b += 64) {
    const auto chunk = indices.subspan(b, std::min<std::size_t>(64, indices.size() - b));
    auto tr = forward<T>(nullptr, model, data.images<T>(chunk), opts);
    const auto& f = tr.features_of(head);
    std::copy(f.data().begin(), f.data().end(), out.data().begin() + std::ptrdiff_t(b * d));
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t d = x.dim(1);
  Tensor<T> out = Tensor<T>::zeros({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.data().begin() + std::ptrdiff_t(rows[i] * d), d, out.data().begin() + std::ptrdiff_t(i * d));
  }
  return out;
}

template <typename T>
double accuracy_of(const Tensor<T>& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += int(argmax_row(logits, i)) == labels[i];
  return double(hits) / double(labels.size());
}

}  // namespace

template <typename T>
std::vector<int> predict(const Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                         const std::string& head, MaskPolicy policy, std::size_t batch_size) {
  if (indices.empty()) throw UsageError("evaluate: empty dataset");
  ForwardOptions opts;
  opts.policy = policy;
  opts.only_head = head;
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t b = 0; b < indices.size(); b += batch_size) {
    const auto chunk = indices.subspan(b, std::min(batch_size, indices.size() - b));
    auto tr = forward<T>(nullptr, model, data.images<T>(chunk), opts);
    const auto& logits = tr.logits_of(head);
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(int(argmax_row(logits, i)));
  }
  return out;
}

template <typename T>
double evaluate(const Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                const std::string& head, MaskPolicy policy, std::size_t batch_size) {
  const auto pred = predict(model, data, indices, head, policy, batch_size);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) hits += pred[i] == data.labels[indices[i]];
  return double(hits) / double(indices.size());
}

template <typename T>
TrainResult train(Model<T>& model, const Dataset& data, const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  const std::string& head = cfg.task_name;
  const MaskPolicy policy = cfg.effective_policy();
  const std::size_t head_classes = head == "base" ? model.backbone.head_b.numel() : model.task(head).num_classes();
  if (head_classes < data.num_classes) {
    throw ConfigError("head '" + head + "' has " + std::to_string(head_classes) + " classes, dataset has " +
                      std::to_string(data.num_classes));
  }
  if (data.train.empty()) throw UsageError("train: empty training split");

  auto params = select_trainable(model, cfg.regime, head);
  for (auto& p : named_parameters(model)) p.tensor.set_requires_grad(false);
  for (auto& p : params) p.tensor.set_requires_grad(true);
  Sgd<T> opt(params, cfg.momentum, cfg.grad_clip_norm);

  TrainResult result;
  auto emit = [&](MetricRecord r) {
    if (log) *log << format_record(r) << '\n';
    result.log.push_back(std::move(r));
  };

  // Head-only training without augmentation sees fixed read-out features of
  // the frozen encoder; computing them once yields the same per-row values.
  const bool cached = cfg.cache_features && cfg.regime == Regime::head_only && !cfg.flip && cfg.crop_pad == 0;
  const Tensor<T>& head_w = head == "base" ? model.backbone.head_w : model.task(head).head_w;
  const Tensor<T>& head_b = head == "base" ? model.backbone.head_b : model.task(head).head_b;
  Tensor<T> feat_train, feat_hold;
  if (cached) {
    feat_train = frozen_features(model, data, data.train, head, policy);
    if (!data.holdout.empty()) feat_hold = frozen_features(model, data, data.holdout, head, policy);
  }

  // Positions into data.train scored as the train split at each evaluation.
  std::vector<std::size_t> train_eval(std::min(cfg.train_eval_samples, data.train.size()));
  for (std::size_t i = 0; i < train_eval.size(); ++i) train_eval[i] = i;
  std::vector<std::size_t> holdout_pos(data.holdout.size());
  for (std::size_t i = 0; i < holdout_pos.size(); ++i) holdout_pos[i] = i;

  auto score = [&](const std::vector<std::size_t>& split, const std::vector<std::size_t>& positions) {
    if (positions.empty()) return 0.0;
    if (cached) {
      std::vector<int> labels;
      for (std::size_t p : positions) labels.push_back(data.labels[split[p]]);
      const Tensor<T>& f = &split == &data.train ? feat_train : feat_hold;
      return accuracy_of(ops::linear<T>(nullptr, gather_rows(f, positions), head_w, head_b), labels);
    }
    std::vector<std::size_t> indices;
    for (std::size_t p : positions) indices.push_back(split[p]);
    return evaluate(model, data, indices, head, policy);
  };

  std::vector<T> best;
  result.best_holdout = -1;
  std::mt19937_64 sampler(cfg.seed * 0xBF58476D1CE4E5B9ull + 0x5EED);
  std::mt19937_64 aug_rng(cfg.seed * 0x94D049BB133111EBull + 0xA06);
  std::vector<std::size_t> order(data.train.size());
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    std::vector<std::size_t> batch;
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[sampler() % i]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    std::vector<int> labels;
    for (std::size_t p : batch) labels.push_back(data.labels[data.train[p]]);

    Tape<T> tape;
    Tensor<T> loss;
    if (cached) {
      auto logits = ops::linear(&tape, gather_rows(feat_train, batch), head_w, head_b);
      loss = ops::cross_entropy_logits<T>(&tape, logits, labels);
    } else {
      std::vector<std::size_t> indices;
      for (std::size_t p : batch) indices.push_back(data.train[p]);
      auto images = data.images<T>(indices);
      if (cfg.flip || cfg.crop_pad) images = augment(images, cfg.flip, cfg.crop_pad, aug_rng);
      ForwardOptions opts;
      opts.policy = policy;
      opts.only_head = head;
      auto tr = forward(&tape, model, images, opts);
      loss = ops::cross_entropy_logits<T>(&tape, tr.logits_of(head), labels);
    }
    opt.zero_grad();
    tape.backward(loss);
    const double lr = lr_at(cfg, step);
    opt.step(lr);

    const std::size_t done = step + 1;
    if (done % cfg.eval_interval == 0 || done == cfg.total_steps) {
      emit({done, lr, "train", score(data.train, train_eval)});
      const double hold = data.holdout.empty() ? 0.0 : score(data.holdout, holdout_pos);
      emit({done, lr, "holdout", hold});
      if (hold > result.best_holdout) {
        result.best_holdout = hold;
        result.best_step = done;
        best = snapshot(params);
      }
    }
  }
  if (!best.empty()) restore(params, best);
  for (auto& p : params) p.tensor.set_requires_grad(false);
  if (!data.test.empty()) {
    result.test_acc = evaluate(model, data, data.test, head, policy);
    emit({result.best_step, result.best_step ? lr_at(cfg, result.best_step - 1) : 0.0, "test", result.test_acc});
  }
  if (result.best_holdout < 0) result.best_holdout = 0;
  return result;
}

#define MEMVIT_INSTANTIATE_TRAINER(T)                                                                              \
  template TaskParams<T>& attach_task<T>(Model<T>&, const TrainConfig&, std::size_t);                             \
  template std::vector<NamedParam<T>> select_trainable<T>(const Model<T>&, Regime, const std::string&);           \
  template std::set<ParamGroup> trainable_groups<T>(const Model<T>&, Regime, const std::string&);                 \
  template class Sgd<T>;                                                                                           \
  template TrainResult train<T>(Model<T>&, const Dataset&, const TrainConfig&, std::ostream*);                     \
  template double evaluate<T>(const Model<T>&, const Dataset&, std::span<const std::size_t>, const std::string&,   \
                              MaskPolicy, std::size_t);                                                            \
  template std::vector<int> predict<T>(const Model<T>&, const Dataset&, std::span<const std::size_t>,              \
                                       const std::string&, MaskPolicy, std::size_t);
MEMVIT_INSTANTIATE_TRAINER(float)
MEMVIT_INSTANTIATE_TRAINER(double)
#undef MEMVIT_INSTANTIATE_TRAINER

}  // namespace memvit
