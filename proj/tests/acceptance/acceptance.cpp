#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "checkpoint.hpp"
#include "composer.hpp"
#include "diagnostics.hpp"
#include "experiments.hpp"

using namespace memvit;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string summary;
  std::string detail;
};

constexpr std::size_t kSeeds = 3;

// Reference toy shape: 32x32x3 images in 8x8 patches, D=64, L=4, H=4.
ModelConfig toy_model() { return ModelConfig{}; }

SyntheticTaskSpec task_spec(std::uint64_t seed, std::uint64_t family, std::size_t per_class) {
  SyntheticTaskSpec s;
  s.seed = seed;
  s.family_seed = family;
  s.samples_per_class = per_class;
  return s;
}

TrainConfig train_config(Regime regime, double lr, std::size_t steps, std::uint64_t seed) {
  TrainConfig c;
  c.regime = regime;
  c.base_lr = lr;
  c.total_steps = steps;
  c.seed = seed;
  c.mem_count = 5;
  c.grad_clip_norm = 1.0;
  c.eval_interval = steps >= 1000 ? 250 : 100;
  return c;
}

ForwardOptions under(MaskPolicy policy, std::string head = "") {
  ForwardOptions o;
  o.policy = policy;
  o.only_head = std::move(head);
  return o;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

Tensor<float> random_images(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  auto t = Tensor<float>::zeros({n, c.image_size, c.image_size, c.channels});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

std::vector<std::size_t> first_n(const std::vector<std::size_t>& v, std::size_t n) {
  return {v.begin(), v.begin() + std::min(n, v.size())};
}

// Shared fixtures, built on first use so single criteria can run alone.
struct Fixtures {
  // Transfer pair per seed: backbone pretrained on task A, fine-tuning task B.
  struct Seed {
    Dataset a, b;
    Model<float> backbone;
    double pretrain_test = 0;
    double pretrain_seconds = 0;
  };
  std::map<std::size_t, Seed> seeds;

  // Distinct synthetic tasks for packs: per seed, 4 tasks.
  std::map<std::size_t, std::vector<Dataset>> pack_tasks;
  // Per seed: packs trained under memory_masked and memory_full_attn.
  struct Packs {
    std::vector<FinetuneResult> masked, full_attn;
  };
  std::map<std::size_t, Packs> packs;

  // Criterion 6 sweep rows and their logs, per seed.
  struct SweepOut {
    std::vector<SweepRow> rows;
    std::map<std::pair<Regime, double>, TrainResult> runs;
    double seconds = 0;
  };
  std::map<std::size_t, SweepOut> sweeps;

  Seed& seed(std::size_t s) {
    auto it = seeds.find(s);
    if (it != seeds.end()) return it->second;
    Seed out;
    out.a = generate(task_spec(100 + s, 7 + s, 200));
    out.b = generate(task_spec(200 + s, 7 + s, 200));
    const auto t0 = Clock::now();
    auto pc = train_config(Regime::full, 0.1, 3000, s);
    pc.eval_interval = 500;
    auto pre = pretrain(toy_model(), s, out.a, pc);
    out.pretrain_seconds = since(t0);
    out.pretrain_test = pre.train.test_acc;
    out.backbone = std::move(pre.model);
    std::printf("  [seed %zu] backbone: task A test accuracy %.3f after 3000 steps (%.0f s)\n", s, out.pretrain_test,
                out.pretrain_seconds);
    std::fflush(stdout);
    return seeds.emplace(s, std::move(out)).first->second;
  }

  const std::vector<Dataset>& tasks(std::size_t s) {
    auto it = pack_tasks.find(s);
    if (it != pack_tasks.end()) return it->second;
    std::vector<Dataset> out;
    for (std::size_t i = 0; i < 4; ++i) out.push_back(generate(task_spec(300 + 10 * s + i, 7 + s, 100)));
    return pack_tasks.emplace(s, std::move(out)).first->second;
  }

  FinetuneResult train_pack(std::size_t s, std::size_t i, Regime regime) {
    auto cfg = train_config(regime, 0.1, 500, 10 * s + i);
    cfg.task_name = "t" + std::to_string(i + 1);
    return finetune(seed(s).backbone, tasks(s)[i], cfg);
  }

  Packs& packs_of(std::size_t s, std::size_t masked_count) {
    auto& p = packs[s];
    while (p.masked.size() < masked_count) p.masked.push_back(train_pack(s, p.masked.size(), Regime::memory_masked));
    return p;
  }

  Packs& full_attn_packs(std::size_t s) {
    auto& p = packs[s];
    while (p.full_attn.size() < 3) p.full_attn.push_back(train_pack(s, p.full_attn.size(), Regime::memory_full_attn));
    return p;
  }

  SweepOut& sweep_of(std::size_t s) {
    auto it = sweeps.find(s);
    if (it != sweeps.end()) return it->second;
    const auto t0 = Clock::now();
    auto& sd = seed(s);
    SweepOut out;
    const auto base = train_config(Regime::head_cls, 0.1, 1500, s);
    out.rows = sweep(sd.backbone, sd.b, base, {Regime::head_only, Regime::head_cls, Regime::memory_full_attn, Regime::full},
                     {0.3, 0.1, 0.03, 0.01}, {5}, [&](const SweepRow& r, const TrainResult& t) {
                       out.runs[{r.regime, r.lr}] = t;
                       std::printf("  [seed %zu] %-17s lr %-5g holdout %.3f test %.3f\n", s,
                                   std::string(to_string(r.regime)).c_str(), r.lr, r.best_holdout, r.test_acc);
                       std::fflush(stdout);
                     });
    out.seconds = since(t0) + sd.pretrain_seconds;
    return sweeps.emplace(s, std::move(out)).first->second;
  }
};

Fixtures fx;

// 1. Finite-difference gradient check of the composed model under every policy.
Outcome gradients() {
  const auto t0 = Clock::now();
  Outcome o;
  double worst = 0;
  std::size_t tensors = 0;
  bool covered = true;
  for (auto p : {MaskPolicy::full, MaskPolicy::masked_finetune, MaskPolicy::concatenation, MaskPolicy::extension}) {
    const auto rep = run_gradcheck(1, p);
    worst = std::max(worst, rep.max_rel_error());
    for (const auto& e : rep.entries) covered = covered && e.coords >= std::min<std::size_t>(20, e.size);
    tensors = rep.entries.size();
    o.detail += "policy " + std::string(to_string(p)) + "\n" + rep.format();
  }
  const double secs = since(t0);
  o.pass = worst < 1e-4 && covered && secs < 60;
  o.summary = fmt("max relative error %.2e over %zu tensors x 4 policies, min(20, size) coordinates per tensor: %s, "
                  "%.1f s",
                  worst, tensors, covered ? "yes" : "no", secs);
  return o;
}

// 2. Zero memory reduces to the plain encoder, bit for bit.
Outcome baseline_reduction() {
  auto& sd = fx.seed(0);
  std::size_t checked = 0, equal = 0;
  for (bool with_cls : {false, true}) {
    auto m = sd.backbone.clone();
    add_task(m, {"zero", 10, with_cls, std::vector<std::size_t>(m.config.depth, 0), MemoryVariant::per_layer, 5});
    ForwardOptions opts;
    opts.policy = with_cls ? MaskPolicy::masked_finetune : MaskPolicy::full;
    opts.only_head = "base";
    for (std::size_t b = 0; b < 10; ++b) {
      const auto img = random_images(m.config, 10, 1000 + b);
      const auto got = forward<float>(nullptr, m, img, opts).logits_of("base");
      const auto ref = reference_vit_logits(sd.backbone, img);
      for (std::size_t i = 0; i < 10; ++i) {
        const std::size_t k = got.dim(1);
        ++checked;
        equal += std::memcmp(got.data().data() + i * k, ref.data().data() + i * k, k * sizeof(float)) == 0;
      }
    }
  }
  Outcome o;
  o.pass = checked == 200 && equal == checked;
  o.summary = fmt("%zu / %zu inputs bit-identical to the memory-free encoder (head-only task under full, "
                  "class-token task under masked fine-tuning)",
                  equal, checked);
  return o;
}

// 3. Masked fine-tuning and masked composition leave CLS0 untouched.
Outcome preservation() {
  const auto t0 = Clock::now();
  auto& sd = fx.seed(0);
  auto& p = fx.packs_of(0, 4);
  const auto probe = sd.b.images<float>(first_n(sd.b.test, 64));
  const auto frozen = forward<float>(nullptr, sd.backbone, probe).logits_of("base");

  Outcome o;
  double worst = 0;
  const auto& ft = p.masked[0].composite;
  const double after_ft =
      max_abs_diff(forward<float>(nullptr, ft.model, probe, under(MaskPolicy::masked_finetune, "base")).logits_of("base"),
                   frozen);
  worst = std::max(worst, after_ft);
  o.detail += fmt("after 500 masked fine-tuning steps: max |CLS0 deviation| %g\n", after_ft);
  for (std::size_t k = 1; k <= 4; ++k) {
    std::vector<TaskPack> packs;
    for (std::size_t j = 0; j < k; ++j) packs.push_back(p.masked[j].composite.pack(0));
    const auto comp = concat(sd.backbone, packs);
    const auto rep = verify_composite(comp, probe);
    const double direct = max_abs_diff(
        forward<float>(nullptr, comp.model, probe, under(comp.policy, "base")).logits_of("base"), frozen);
    worst = std::max({worst, rep.base, direct});
    o.detail += fmt("%zu packs: max |CLS0 deviation| %g\n", k, direct);
  }
  const double secs = since(t0);
  o.pass = worst == 0.0 && secs < 300;
  o.summary = fmt("64-image probe, fine-tune plus 1-4 packs: max CLS0 deviation %g (strict: must be 0), %.0f s", worst,
                  secs);
  return o;
}

// 4. Composite task logits equal standalone logits, in any pack order.
Outcome equivalence() {
  auto& sd = fx.seed(0);
  auto& p = fx.packs_of(0, 3);
  const auto probe = sd.b.images<float>(first_n(sd.b.test, 64));
  std::vector<TaskPack> packs;
  for (std::size_t j = 0; j < 3; ++j) packs.push_back(p.masked[j].composite.pack(0));

  Outcome o;
  double worst = 0;
  const auto comp = concat(sd.backbone, packs);
  const auto ref = forward<float>(nullptr, comp.model, probe, under(comp.policy));
  for (std::size_t j = 0; j < 3; ++j) {
    const auto& alone = p.masked[j].composite;
    const auto name = alone.model.tasks[0].name;
    const double d = max_abs_diff(
        ref.logits_of(name), forward<float>(nullptr, alone.model, probe, under(MaskPolicy::masked_finetune)).logits_of(name));
    worst = std::max(worst, d);
    o.detail += fmt("%s: composite vs standalone %g\n", name.c_str(), d);
  }
  std::vector<std::size_t> order = {0, 1, 2};
  std::size_t perms = 0;
  double perm_worst = 0;
  do {
    std::vector<TaskPack> shuffled;
    for (auto j : order) shuffled.push_back(packs[j]);
    const auto c = concat(sd.backbone, shuffled);
    const auto tr = forward<float>(nullptr, c.model, probe, under(c.policy));
    for (const auto& t : comp.model.tasks) perm_worst = std::max(perm_worst, max_abs_diff(tr.logits_of(t.name), ref.logits_of(t.name)));
    ++perms;
  } while (std::next_permutation(order.begin(), order.end()));
  o.detail += fmt("%zu pack orders: max task logit change %g\n", perms, perm_worst);
  o.pass = worst <= 1e-6 && perm_worst <= 1e-6;
  o.summary = fmt("3 masked packs: composite vs standalone %g, over %zu orders %g (tolerance 1e-6)", worst, perms,
                  perm_worst);
  return o;
}

// 5. All-visible composition of full-attention packs interferes; masked does not.
Outcome interference() {
  Outcome o;
  double naive_sum = 0, masked_sum = 0;
  bool masked_exact = true;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    auto& sd = fx.seed(s);
    auto& p = fx.full_attn_packs(s);
    fx.packs_of(s, 3);
    const auto& t1 = fx.tasks(s)[0];

    std::vector<TaskPack> full_packs, masked_packs;
    for (std::size_t j = 0; j < 3; ++j) {
      full_packs.push_back(p.full_attn[j].composite.pack(0));
      masked_packs.push_back(p.masked[j].composite.pack(0));
    }
    // Naive composition: the same token layout with every attention allowed.
    auto naive = concat(sd.backbone, full_packs);
    naive.policy = MaskPolicy::full;
    const auto& alone = p.full_attn[0].composite;
    const double alone_acc = evaluate(alone.model, t1, t1.test, "t1", MaskPolicy::full);
    const double naive_acc = evaluate(naive.model, t1, t1.test, "t1", MaskPolicy::full);

    const auto masked = concat(sd.backbone, masked_packs);
    const auto& m_alone = p.masked[0].composite;
    const double m_alone_acc = evaluate(m_alone.model, t1, t1.test, "t1", MaskPolicy::masked_finetune);
    const double m_comp_acc = evaluate(masked.model, t1, t1.test, "t1", masked.policy);
    const auto preds_alone = predict(m_alone.model, t1, t1.test, "t1", MaskPolicy::masked_finetune);
    const auto preds_comp = predict(masked.model, t1, t1.test, "t1", masked.policy);
    masked_exact = masked_exact && preds_alone == preds_comp && m_alone_acc == m_comp_acc;

    naive_sum += alone_acc - naive_acc;
    masked_sum += m_alone_acc - m_comp_acc;
    o.detail += fmt("seed %zu: full attention %.3f alone -> %.3f naive (drop %.1f points); masked %.3f alone -> %.3f "
                    "composed (drop %.1f points)\n",
                    s, alone_acc, naive_acc, 100 * (alone_acc - naive_acc), m_alone_acc, m_comp_acc,
                    100 * (m_alone_acc - m_comp_acc));
  }
  const double naive_drop = naive_sum / kSeeds, masked_drop = masked_sum / kSeeds;
  o.pass = naive_drop >= 0.05 && masked_exact && masked_drop == 0.0;
  o.summary = fmt("task-1 drop over %zu seeds: naive %.1f points (need >= 5), masked %.1f points (need exactly 0)",
                  kSeeds, 100 * naive_drop, 100 * masked_drop);
  return o;
}

// 6. Regime ordering on the transfer pair.
Outcome regime_ordering() {
  std::map<Regime, double> mean;
  double seconds = 0;
  Outcome o;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    auto& sw = fx.sweep_of(s);
    seconds += sw.seconds;
    const auto best = best_per_setting(sw.rows);
    o.detail += fmt("seed %zu (backbone task A test %.3f)\n", s, fx.seed(s).pretrain_test) + format_rows(best);
    for (const auto& r : best) mean[r.regime] += r.test_acc / kSeeds;
  }
  const double ho = mean[Regime::head_only], hc = mean[Regime::head_cls], mem = mean[Regime::memory_full_attn],
               full = mean[Regime::full];
  const bool ordered = ho <= hc && hc <= mem && mem <= full + 0.02;
  o.pass = ordered && seconds < 1800;
  o.summary = fmt("mean test: head_only %.3f, head_cls %.3f, memory(m=5) %.3f, full %.3f; %.1f min for 3 seeds", ho,
                  hc, mem, full, seconds / 60);
  return o;
}

// 7. Parameter accounting at the ViT-B/32 shape.
Outcome param_accounting() {
  ModelConfig b32;
  b32.image_size = 224;
  b32.patch_size = 32;
  b32.depth = 12;
  b32.width = 768;
  b32.heads = 12;
  b32.mlp_ratio = 4;
  b32.num_classes = 1000;
  Outcome o;
  bool ok = true;
  for (std::size_t k : {2ul, 10ul, 100ul, 1000ul}) {
    const auto mem = param_count(b32, Regime::memory_masked, k, std::vector<std::size_t>(12, 5));
    const auto hc = param_count(b32, Regime::head_cls, k);
    const auto ho = param_count(b32, Regime::head_only, k);
    const bool row = mem.memory == 46080 && mem.task_cls == 768 && mem.head_weights == 768 * k && mem.head_bias == k &&
                     mem.backbone == 0 && hc.memory == 0 && hc.task_cls == 768 && ho.task_cls == 0 &&
                     ho.head_weights == 768 * k && ho.head_bias == k &&
                     incremental_parameters(768, std::vector<std::size_t>(12, 5), k) == 46080 + 768 + 768 * k + k;
    ok = ok && row;
    o.detail += fmt("k=%zu: memory %zu, class token %zu, head %zu + %zu bias\n", k, mem.memory, mem.task_cls,
                    mem.head_weights, mem.head_bias);
  }
  o.pass = ok;
  o.summary = "memory 768*12*5 = 46080, class token 768, head 768k + k bias for k in {2, 10, 100, 1000}";
  return o;
}

// 8. Warmup and cosine schedule against the closed form.
Outcome schedule() {
  TrainConfig c;
  c.base_lr = 0.3;
  c.warmup_steps = 5;
  c.total_steps = 1005;
  const double tol = 1e-9 * c.base_lr;
  Outcome o;
  bool ok = true;
  for (std::size_t s = 0; s < 5; ++s) ok = ok && std::abs(lr_at(c, s) - c.base_lr * double(s + 1) / 5.0) <= tol;
  const double peak = lr_at(c, 5), mid = lr_at(c, 505), last = lr_at(c, 1004);
  const double w = 5, t = 1005;
  const double residual = 0.5 * c.base_lr * (1 + std::cos(std::numbers::pi * (t - w - 1) / (t - w)));
  ok = ok && std::abs(peak - c.base_lr) <= tol && std::abs(lr_at(c, 4) - peak) <= tol &&
       std::abs(mid - 0.5 * c.base_lr) <= tol && std::abs(last - residual) <= tol && last <= residual + tol;
  o.pass = ok;
  o.summary = fmt("warmup base*(s+1)/5, peak %.12g at step 5, midpoint %.12g, final %.3g (cosine residual %.3g)", peak,
                  mid, last, residual);
  return o;
}

// Changes each parameter group in turn and checks which read-outs move.
bool reuse_agrees(const Composite& comp, std::string& detail) {
  const auto rep = verify_reuse(layout_for(comp.model), comp.policy, comp.model.config.depth);
  const auto img = random_images(comp.model.config, 8, 77);
  const auto before = forward<float>(nullptr, comp.model, img, under(comp.policy));
  std::set<ParamGroup> groups;
  for (const auto& p : named_parameters(comp.model)) groups.insert(p.group);

  bool ok = true;
  std::size_t zero_checks = 0, moved_checks = 0;
  for (const auto& g : groups) {
    auto m = comp.model.clone();
    std::mt19937_64 rng(std::hash<std::string>{}(to_string(g)));
    std::normal_distribution<float> n(0.0f, 0.5f);
    for (auto& p : named_parameters(m)) {
      if (p.group != g) continue;
      for (auto& v : p.tensor.data()) v += n(rng);
    }
    const auto after = forward<float>(nullptr, m, img, under(comp.policy));
    for (const auto& [readout, closure] : rep.closure) {
      const std::string head = readout == "base" ? "base" : comp.model.tasks[std::stoul(readout.substr(4)) - 1].name;
      const double d = max_abs_diff(before.logits_of(head), after.logits_of(head));
      const bool inside = closure.count(g) > 0;
      if (inside ? d > 0 : d == 0) {
        (inside ? moved_checks : zero_checks)++;
      } else {
        ok = false;
        detail += fmt("  %s vs %s: closure says %s, change %g\n", readout.c_str(), to_string(g).c_str(),
                      inside ? "dependent" : "independent", d);
      }
    }
  }
  detail += fmt("%s, %zu tasks: %zu groups, %zu independent pairs unchanged, %zu dependent pairs moved\n",
                std::string(to_string(comp.policy)).c_str(), comp.num_tasks(), groups.size(), zero_checks,
                moved_checks);
  return ok;
}

// 9. Dependency closure against numeric perturbation.
Outcome reuse_soundness() {
  auto& sd = fx.seed(0);
  auto& p = fx.packs_of(0, 3);
  std::vector<TaskPack> packs;
  for (std::size_t j = 0; j < 3; ++j) packs.push_back(p.masked[j].composite.pack(0));
  const auto cat = concat(sd.backbone, packs);

  auto cfg = train_config(Regime::memory_masked, 0.1, 200, 40);
  cfg.policy = MaskPolicy::extension;
  cfg.task_name = "e1";
  const auto first = finetune(sd.backbone, fx.tasks(0)[0], cfg);
  const auto one = compose(sd.backbone, {first.composite.pack(0)}, MaskPolicy::extension);
  cfg.task_name = "e2";
  cfg.seed = 41;
  const auto ext = extend(one, fx.tasks(0)[1], cfg);

  Outcome o;
  const bool a = reuse_agrees(cat, o.detail);
  const bool b = reuse_agrees(ext, o.detail);
  o.pass = a && b;
  o.summary = "closure matches perturbation for concatenation (k=3) and extension (k=2)";
  return o;
}

// 10. Placement and variant ablation.
Outcome ablation() {
  Outcome o;
  bool k0_match = true, complete = true;
  double per_layer = 0, propagated = 0;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    auto& sd = fx.seed(s);
    auto& sw = fx.sweep_of(s);
    double lr = 0.1, best = -1;
    for (const auto& r : sw.rows) {
      if (r.regime == Regime::memory_full_attn && r.best_holdout > best) best = r.best_holdout, lr = r.lr;
    }
    const std::size_t depth = sd.backbone.config.depth;
    std::vector<TrainResult> runs;
    const auto rows = ablate(sd.backbone, sd.b, train_config(Regime::memory_full_attn, 0.1, 1500, s), {0, depth / 2, depth},
                             {lr}, [&](const SweepRow& r, const TrainResult& t) {
                               runs.push_back(t);
                               std::printf("  [seed %zu] ablate %-16s %-8s holdout %.3f test %.3f\n", s,
                                           std::string(to_string(r.variant)).c_str(), r.placement.c_str(),
                                           r.best_holdout, r.test_acc);
                               std::fflush(stdout);
                             });
    std::set<std::string> seen;
    for (const auto& r : rows) seen.insert(std::string(to_string(r.variant)) + ":" + r.placement);
    const std::string half = std::to_string(depth / 2);
    const std::vector<std::string> wanted = {"per_layer:none", "per_layer:first-" + half, "per_layer:last-" + half,
                                             "per_layer:all",  "propagated_first:all",   "propagated_added:all"};
    for (const auto& want : wanted) {
      complete = complete && seen.count(want);
    }
    const auto& ref = sw.runs.at({Regime::head_cls, lr});
    const bool match = !rows.empty() && rows[0].placement == "none" && rows[0].test_acc == ref.test_acc &&
                       rows[0].best_holdout == ref.best_holdout && runs[0].log == ref.log;
    k0_match = k0_match && match;
    for (const auto& r : rows) {
      if (r.placement != "all") continue;
      if (r.variant == MemoryVariant::per_layer) per_layer += r.test_acc / kSeeds;
      if (r.variant == MemoryVariant::propagated_first) propagated += r.test_acc / kSeeds;
    }
    o.detail += fmt("seed %zu at lr %g, K=0 %s head_cls\n", s, lr, match ? "matches" : "DIFFERS from") + format_rows(rows);
  }
  const bool soft = per_layer >= propagated;
  o.detail += fmt("per_layer mean %.3f vs propagated_first mean %.3f: ordering %s (soft)\n", per_layer, propagated,
                  soft ? "holds" : "does not hold");
  o.pass = complete && k0_match;
  o.summary = fmt("first/last-K for K in {0, L/2, L} and 3 variants %s; K=0 %s head_cls; per_layer %.3f vs "
                  "propagated_first %.3f (soft, %s)",
                  complete ? "complete" : "INCOMPLETE", k0_match ? "equals" : "differs from", per_layer, propagated,
                  soft ? "holds" : "not held");
  return o;
}

// 11. Attention-to-memory statistics.
Outcome attention_diagnostic() {
  auto& sd = fx.seed(0);
  auto& p = fx.full_attn_packs(0);
  const auto& t1 = fx.tasks(0)[0];
  const auto images = t1.images<float>(first_n(t1.test, 64));
  const std::vector<double> thresholds = {0.25, 0.5, 0.75};
  ForwardOptions opts;
  opts.keep_trace = true;

  auto stats_of = [&](const Model<float>& m) {
    const auto tr = forward<float>(nullptr, m, images, opts);
    std::vector<std::vector<AttnMemStat>> out;
    for (double t : thresholds) out.push_back(attention_stats(tr, t));
    return out;
  };

  bool zero = true;
  for (const auto& row : stats_of(sd.backbone)) {
    for (const auto& st : row) zero = zero && st.fraction_memory == 0.0;
  }
  const auto& trained = p.full_attn[0].composite.model;
  auto init = sd.backbone.clone();
  auto cfg = train_config(Regime::memory_full_attn, 0.1, 500, 0);
  cfg.task_name = "t1";
  attach_task(init, cfg, t1.num_classes);
  const auto after = stats_of(trained), before = stats_of(init);

  bool bounded = true, monotone = true;
  for (std::size_t i = 0; i < after[0].size(); ++i) {
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const double f = after[t][i].fraction_memory;
      bounded = bounded && f >= 0 && f <= 1;
      if (t > 0) monotone = monotone && f <= after[t - 1][i].fraction_memory;
    }
  }
  Outcome o;
  o.detail = format_attention_table(thresholds, before, after);
  o.pass = zero && bounded && monotone;
  o.summary = fmt("m=0 fractions all zero: %s; trained fractions in [0, 1]: %s; non-increasing in threshold: %s",
                  zero ? "yes" : "no", bounded ? "yes" : "no", monotone ? "yes" : "no");
  return o;
}

// 12. Checkpoint round trips and foreign-backbone rejection.
Outcome persistence() {
  auto& p = fx.packs_of(0, 3);
  auto& other = fx.seed(1);
  const auto dir = std::filesystem::temp_directory_path() / "memvit_acceptance";
  std::filesystem::create_directories(dir);

  Outcome o;
  bool ok = true;
  std::vector<TaskPack> packs;
  for (std::size_t j = 0; j < 3; ++j) packs.push_back(p.masked[j].composite.pack(0));
  const auto comp = concat(fx.seed(0).backbone, packs);

  const ModelCheckpoint mc{comp, "train: {seed: 0}\n"};
  const auto bytes = encode_model(mc);
  save_model(dir / "composite.mvck", mc);
  const auto again = encode_model(load_model(dir / "composite.mvck"));
  ok = ok && read_file(dir / "composite.mvck") == bytes && again == bytes;

  const PackCheckpoint pc{packs[0], comp.model.config, "train: {seed: 0}\n"};
  const auto pbytes = encode_pack(pc);
  save_pack(dir / "pack.mvck", pc);
  ok = ok && encode_pack(load_pack(dir / "pack.mvck")) == pbytes;
  o.detail += fmt("composite: %zu bytes, pack: %zu bytes, re-encoded byte-identical: %s\n", bytes.size(),
                  pbytes.size(), ok ? "yes" : "no");

  bool rejected = false;
  try {
    concat(other.backbone, {load_pack(dir / "pack.mvck").pack});
  } catch (const FingerprintError& e) {
    rejected = true;
    o.detail += std::string("foreign backbone: ") + e.what() + "\n";
  }
  std::filesystem::remove_all(dir);
  o.pass = ok && rejected;
  o.summary = fmt("save/load byte-identical: %s; pack on another backbone rejected: %s", ok ? "yes" : "no",
                  rejected ? "yes" : "no");
  return o;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite: one PASS/FAIL line per criterion"};
  std::vector<int> only;
  std::string report_path = "acceptance_report.txt";
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--report", report_path, "Report file");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all = {
      {1, "gradient correctness", gradients},
      {2, "baseline reduction", baseline_reduction},
      {3, "output preservation", preservation},
      {4, "standalone/composite equivalence", equivalence},
      {5, "interference", interference},
      {6, "regime ordering", regime_ordering},
      {7, "parameter accounting", param_accounting},
      {8, "schedule", schedule},
      {9, "mask/dependency soundness", reuse_soundness},
      {10, "ablation harness", ablation},
      {11, "attention diagnostic", attention_diagnostic},
      {12, "persistence", persistence},
  };

  const auto t0 = Clock::now();
  std::string details, lines;
  std::size_t run = 0, passed = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto tc = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("error: ") + e.what();
    }
    ++run;
    passed += o.pass;
    const auto line = fmt("%s %2d %s: ", o.pass ? "PASS" : "FAIL", c.id, c.name) + o.summary;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    lines += line + "\n";
    details += "== " + std::to_string(c.id) + " " + c.name + fmt(" (%.1f s)\n", since(tc)) + o.detail + "\n";
  }
  const auto total = fmt("%zu / %zu criteria passed in %.1f min\n", passed, run, since(t0) / 60);
  std::printf("%s", total.c_str());
  std::ofstream(report_path) << lines << total << "\n" << details;
  return passed == run ? 0 : 1;
}
