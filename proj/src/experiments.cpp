#include "experiments.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <tuple>

#include "encoder.hpp"

namespace memvit {

PretrainResult pretrain(const ModelConfig& config, std::uint64_t init_seed, const Dataset& data, TrainConfig cfg,
                        std::ostream* log) {
  cfg.regime = Regime::full;
  cfg.task_name = "base";
  cfg.policy = MaskPolicy::full;
  PretrainResult r{init_model<float>(config, init_seed), {}};
  r.train = train(r.model, data, cfg, log);
  return r;
}

FinetuneResult finetune(const Model<float>& backbone, const Dataset& data, const TrainConfig& cfg, std::ostream* log) {
  FinetuneResult r;
  auto& c = r.composite;
  c.model.config = backbone.config;
  c.model.backbone = backbone.clone().backbone;
  c.policy = cfg.effective_policy();
  if (cfg.task_name != "base") {
    attach_task(c.model, cfg, data.num_classes);
    c.trained_policies.push_back(c.policy);
    c.prerequisites.emplace_back();
  }
  r.train = train(c.model, data, cfg, log);
  return r;
}

std::string format_rows(const std::vector<SweepRow>& rows) {
  std::string s = "regime            m  variant           placement       lr  best_step  holdout     test\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %2zu  %-16s  %-9s %8.4g  %9zu  %7.4f  %7.4f\n",
                  std::string(to_string(r.regime)).c_str(), r.mem_count, std::string(to_string(r.variant)).c_str(),
                  r.placement.c_str(), r.lr, r.best_step, r.best_holdout, r.test_acc);
    s += buf;
  }
  return s;
}

namespace {

SweepRow run_row(const Model<float>& backbone, const Dataset& data, const TrainConfig& cfg, std::size_t m,
                 const std::string& placement, const std::function<void(const SweepRow&, const TrainResult&)>& each) {
  auto res = finetune(backbone, data, cfg);
  SweepRow row{cfg.regime, m, cfg.variant, placement, cfg.base_lr, res.train.best_holdout, res.train.test_acc,
               res.train.best_step};
  if (each) each(row, res.train);
  return row;
}

}  // namespace

std::vector<SweepRow> sweep(const Model<float>& backbone, const Dataset& data, const TrainConfig& base,
                            const std::vector<Regime>& regimes, const std::vector<double>& learning_rates,
                            const std::vector<std::size_t>& mem_counts,
                            const std::function<void(const SweepRow&, const TrainResult&)>& each) {
  std::vector<SweepRow> rows;
  for (auto regime : regimes) {
    const auto ms = uses_memory(regime) ? mem_counts : std::vector<std::size_t>{0};
    for (std::size_t m : ms) {
      for (double lr : learning_rates) {
        TrainConfig cfg = base;
        cfg.regime = regime;
        cfg.mem_count = m;
        cfg.mem_counts.clear();
        cfg.base_lr = lr;
        cfg.policy.reset();
        rows.push_back(run_row(backbone, data, cfg, m, uses_memory(regime) ? "all" : "none", each));
      }
    }
  }
  return rows;
}

std::vector<SweepRow> best_per_setting(const std::vector<SweepRow>& rows) {
  std::vector<SweepRow> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SweepRow& o) {
      return o.regime == r.regime && o.mem_count == r.mem_count && o.variant == r.variant && o.placement == r.placement;
    });
    if (it == out.end()) {
      out.push_back(r);
    } else if (r.best_holdout > it->best_holdout) {
      *it = r;
    }
  }
  return out;
}

std::vector<std::size_t> placed_memory(std::size_t depth, std::size_t m, std::size_t k, bool first) {
  if (k > depth) throw ConfigError("placement of " + std::to_string(k) + " layers exceeds depth " + std::to_string(depth));
  std::vector<std::size_t> out(depth, 0);
  for (std::size_t i = 0; i < k; ++i) out[first ? i : depth - 1 - i] = m;
  return out;
}

std::vector<SweepRow> ablate(const Model<float>& backbone, const Dataset& data, const TrainConfig& base,
                             const std::vector<std::size_t>& layer_counts, const std::vector<double>& learning_rates,
                             const std::function<void(const SweepRow&, const TrainResult&)>& each) {
  if (!uses_memory(base.regime)) throw ConfigError("ablate: regime must be a memory regime");
  if (base.mem_count == 0) throw ConfigError("ablate: mem_count must be positive");
  const std::size_t depth = backbone.config.depth, m = base.mem_count;
  const MaskPolicy policy = base.effective_policy();
  std::vector<SweepRow> rows;
  auto run = [&](TrainConfig cfg, const std::string& placement) {
    for (double lr : learning_rates) {
      cfg.base_lr = lr;
      rows.push_back(run_row(backbone, data, cfg, m, placement, each));
    }
  };
  for (std::size_t k : layer_counts) {
    if (k == 0) {
      TrainConfig cfg = base;
      cfg.regime = Regime::head_cls;
      cfg.policy = policy;
      cfg.mem_counts.clear();
      cfg.variant = MemoryVariant::per_layer;
      run(cfg, "none");
      continue;
    }
    for (bool first : {true, false}) {
      if (!first && k == depth) break;
      TrainConfig cfg = base;
      cfg.variant = MemoryVariant::per_layer;
      cfg.mem_counts = placed_memory(depth, m, k, first);
      run(cfg, k == depth ? "all" : (first ? "first-" : "last-") + std::to_string(k));
    }
  }
  for (auto v : {MemoryVariant::per_layer, MemoryVariant::propagated_first, MemoryVariant::propagated_added}) {
    const bool covered = v == MemoryVariant::per_layer &&
                         std::find(layer_counts.begin(), layer_counts.end(), depth) != layer_counts.end();
    if (covered) continue;
    TrainConfig cfg = base;
    cfg.variant = v;
    cfg.mem_counts.clear();
    run(cfg, "all");
  }
  return rows;
}

double GradcheckReport::max_rel_error() const {
  double m = 0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

std::string GradcheckReport::format() const {
  std::string s = "tensor                         coords  max_rel_error\n";
  char buf[160];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%-30s %6zu  %.3e\n", e.tensor.c_str(), e.coords, e.max_rel_error);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "worst %.3e over %zu tensors in %.2f s\n", max_rel_error(), entries.size(), seconds);
  return s + buf;
}

GradcheckReport run_gradcheck(std::uint64_t seed, MaskPolicy policy, std::size_t min_coords, double step) {
  const auto start = std::chrono::steady_clock::now();
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.depth = 2;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.num_classes = 2;
  auto model = init_model<double>(cfg, seed);
  TaskInit init;
  init.name = "task";
  init.num_classes = 2;
  init.mem_counts = {2, 2};
  init.seed = seed + 1;
  init.init_std = 0.5;  // large enough that memory rows carry real attention mass
  add_task(model, init);

  std::mt19937_64 rng(seed * 31 + 7);
  std::normal_distribution<double> noise(0.0, 1.0);
  // Scale every tensor up so layernorm gains, biases and attention are away
  // from degenerate values and gradients are well above rounding noise.
  for (auto& p : named_parameters(model)) {
    for (auto& v : p.tensor.data()) v += 0.3 * noise(rng);
  }
  const std::size_t batch = 3;
  auto images = Tensor<double>::zeros({batch, cfg.image_size, cfg.image_size, cfg.channels});
  for (auto& v : images.data()) v = std::uniform_real_distribution<double>(0, 1)(rng);
  const std::vector<int> base_labels = {0, 1, 1}, task_labels = {1, 0, 1};

  ForwardOptions opts;
  opts.policy = policy;
  auto loss_of = [&](Tape<double>* tape) {
    auto tr = forward(tape, model, images, opts);
    auto a = ops::cross_entropy_logits<double>(tape, tr.logits_of("base"), base_labels);
    auto b = ops::cross_entropy_logits<double>(tape, tr.logits_of("task"), task_labels);
    return ops::add(tape, a, b);
  };

  auto params = named_parameters(model);
  for (auto& p : params) p.tensor.set_requires_grad(true);
  {
    Tape<double> tape;
    auto loss = loss_of(&tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> grads;
  for (auto& p : params) {
    grads.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    p.tensor.set_requires_grad(false);
  }

  GradcheckReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    auto t = p.tensor;
    const std::size_t n = t.numel(), count = std::min(n, std::max<std::size_t>(min_coords, 24));
    const std::size_t offset = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    const auto& analytic = grads[pi];
    GradcheckEntry e{p.name, count, 0.0, n};
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t i = n == count ? c : (offset + c * n / count) % n;
      const double orig = t[i];
      t[i] = orig + step;
      const double up = loss_of(nullptr)[0];
      t[i] = orig - step;
      const double down = loss_of(nullptr)[0];
      t[i] = orig;
      const double numeric = (up - down) / (2 * step);
      // Both below the difference-quotient noise floor: an exact zero (the key
      // bias, for one, cannot move a softmax), which relative error cannot score.
      const double scale = std::max(std::abs(analytic[i]), std::abs(numeric));
      if (scale < 1e-8) continue;
      e.max_rel_error = std::max(e.max_rel_error, std::abs(analytic[i] - numeric) / scale);
    }
    rep.entries.push_back(std::move(e));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace memvit
