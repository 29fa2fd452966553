#include "composer.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <memory>
#include <set>

#include "encoder.hpp"

namespace memvit {

static_assert(std::endian::native == std::endian::little, "checkpoint bytes assume a little-endian host");

std::string backbone_fingerprint(const Backbone<float>& backbone) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: digest init failed");
  for (const auto& p : backbone_parameters(backbone)) {
    const auto d = p.tensor.data();
    if (EVP_DigestUpdate(ctx.get(), d.data(), d.size() * sizeof(float)) != 1) throw Error("sha256: update failed");
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) throw Error("sha256: final failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::vector<std::size_t> TaskPack::mem_counts() const {
  std::vector<std::size_t> out;
  for (const auto& m : memory) out.push_back(m.defined() ? m.dim(0) : 0);
  return out;
}

std::size_t TaskPack::parameter_count() const {
  std::size_t n = cls.numel() + head_w.numel() + head_b.numel();
  for (const auto& m : memory) n += m.defined() ? m.numel() : 0;
  return n;
}

bool Composite::preserving() const {
  return std::all_of(trained_policies.begin(), trained_policies.end(),
                     [](MaskPolicy p) { return p != MaskPolicy::full; }) &&
         (policy != MaskPolicy::full || model.tasks.empty());
}

TaskPack Composite::pack(std::size_t j) const {
  if (j >= model.tasks.size()) throw IndexError("composite has no task " + std::to_string(j));
  auto p = extract_pack(model, model.tasks[j].name, trained_policies[j]);
  p.prerequisites = prerequisites[j];
  return p;
}

TaskPack extract_pack(const Model<float>& model, const std::string& task_name, MaskPolicy trained_policy) {
  const auto& t = model.task(task_name);
  if (!t.has_cls()) throw ConfigError("task '" + task_name + "' has no task class token to pack");
  TaskPack p;
  p.task_name = t.name;
  p.variant = t.variant;
  p.cls = t.cls.clone();
  p.memory.resize(model.config.depth);
  for (std::size_t l = 0; l < model.config.depth; ++l) {
    if (t.mem_count(l) > 0) p.memory[l] = t.memory[l].clone();
  }
  p.head_w = t.head_w.clone();
  p.head_b = t.head_b.clone();
  p.trained_policy = trained_policy;
  p.base_fingerprint = backbone_fingerprint(model.backbone);
  return p;
}

namespace {

void check_pack_shape(const TaskPack& p, const ModelConfig& cfg) {
  const std::size_t d = cfg.width;
  auto fail = [&](const std::string& m) { throw ConfigError("pack '" + p.task_name + "': " + m); };
  if (!p.cls.defined() || p.cls.shape() != Shape{1, d}) fail("class token must be [1, " + std::to_string(d) + "]");
  if (p.memory.size() != cfg.depth) {
    fail("memory lists " + std::to_string(p.memory.size()) + " layers, backbone has " + std::to_string(cfg.depth));
  }
  for (const auto& m : p.memory) {
    if (m.defined() && (m.rank() != 2 || m.dim(1) != d)) fail("memory rows must have width " + std::to_string(d));
  }
  if (p.head_w.rank() != 2 || p.head_w.dim(0) != d || p.head_b.rank() != 1 || p.head_b.dim(0) != p.head_w.dim(1)) {
    fail("head must be [D, k] with a [k] bias");
  }
  if (p.variant != MemoryVariant::per_layer && p.mem_counts()[0] == 0) fail("propagated memory needs layer-0 slots");
}

TaskParams<float> to_task(const TaskPack& p) {
  TaskParams<float> t;
  t.name = p.task_name;
  t.variant = p.variant;
  t.cls = p.cls.clone();
  for (const auto& m : p.memory) t.memory.push_back(m.defined() && m.dim(0) > 0 ? m.clone() : Tensor<float>());
  t.head_w = p.head_w.clone();
  t.head_b = p.head_b.clone();
  return t;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) throw DimensionError("deviation: shapes differ");
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

Composite compose(const Model<float>& base, const std::vector<TaskPack>& packs, MaskPolicy policy) {
  if (policy != MaskPolicy::concatenation && policy != MaskPolicy::extension) {
    throw ConfigError("compose: policy must be concatenation or extension, got " + std::string(to_string(policy)));
  }
  Composite c;
  c.model.config = base.config;
  c.model.backbone = base.clone().backbone;
  c.policy = policy;
  const std::string fp = backbone_fingerprint(base.backbone);
  std::set<std::string> names;
  for (const auto& p : packs) {
    if (p.base_fingerprint != fp) {
      throw FingerprintError("pack '" + p.task_name + "' was trained against backbone " + p.base_fingerprint.substr(0, 12) +
                             "..., not " + fp.substr(0, 12) + "...");
    }
    if (p.task_name.empty() || p.task_name == "base") throw ConfigError("pack names must be non-empty and not 'base'");
    if (!names.insert(p.task_name).second) throw ConfigError("duplicate task name '" + p.task_name + "'");
    check_pack_shape(p, base.config);
    if (policy == MaskPolicy::extension) {
      if (p.trained_policy != MaskPolicy::extension) {
        throw ConfigError("pack '" + p.task_name + "' was trained under " + std::string(to_string(p.trained_policy)) +
                          ", an extension composite needs extension packs");
      }
      std::vector<std::string> before;
      for (const auto& t : c.model.tasks) before.push_back(t.name);
      if (p.prerequisites != before) {
        throw ConfigError("pack '" + p.task_name + "' was trained after a different task sequence");
      }
    } else if (p.trained_policy == MaskPolicy::extension && !p.prerequisites.empty()) {
      throw ConfigError("pack '" + p.task_name + "' depends on earlier tasks and cannot be concatenated");
    }
    c.model.tasks.push_back(to_task(p));
    c.trained_policies.push_back(p.trained_policy);
    c.prerequisites.push_back(p.prerequisites);
  }
  return c;
}

Composite extend(const Composite& composite, const Dataset& data, const TrainConfig& cfg, TrainResult* result,
                 std::ostream* log) {
  if (composite.policy != MaskPolicy::extension) {
    throw ConfigError("extend: composite uses the " + std::string(to_string(composite.policy)) +
                      " policy, extension required");
  }
  if (cfg.regime != Regime::head_cls && !uses_memory(cfg.regime)) {
    throw ConfigError("extend: regime " + std::string(to_string(cfg.regime)) +
                      " does not train a task class token on a frozen backbone");
  }
  if (cfg.policy && *cfg.policy != MaskPolicy::extension) {
    throw ConfigError("extend: training policy must be extension");
  }
  Composite out;
  out.model = composite.model.clone();
  out.policy = MaskPolicy::extension;
  out.trained_policies = composite.trained_policies;
  out.prerequisites = composite.prerequisites;
  std::vector<std::string> before;
  for (const auto& t : out.model.tasks) before.push_back(t.name);

  TrainConfig tc = cfg;
  tc.policy = MaskPolicy::extension;
  attach_task(out.model, tc, data.num_classes);
  auto res = train(out.model, data, tc, log);
  if (result) *result = std::move(res);
  out.trained_policies.push_back(MaskPolicy::extension);
  out.prerequisites.push_back(std::move(before));
  return out;
}

double DeviationReport::max() const {
  double m = base;
  for (const auto& [name, v] : tasks) m = std::max(m, v);
  return m;
}

std::string DeviationReport::format() const {
  std::string s = "head        max_abs_deviation\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-11s %.9g\n", "base", base);
  s += buf;
  for (const auto& [name, v] : tasks) {
    std::snprintf(buf, sizeof buf, "%-11s %.9g\n", name.c_str(), v);
    s += buf;
  }
  return s;
}

DeviationReport verify_composite(const Composite& composite, const Tensor<float>& probe) {
  ForwardOptions opts;
  opts.policy = composite.policy;
  const auto out = forward<float>(nullptr, composite.model, probe, opts);

  Model<float> bare;
  bare.config = composite.model.config;
  bare.backbone = composite.model.backbone;
  DeviationReport rep;
  rep.base = max_abs_diff(out.logits_of("base"), forward<float>(nullptr, bare, probe).logits_of("base"));

  std::vector<TaskPack> packs;
  for (std::size_t j = 0; j < composite.num_tasks(); ++j) packs.push_back(composite.pack(j));
  for (std::size_t j = 0; j < packs.size(); ++j) {
    const auto& name = packs[j].task_name;
    Model<float> ref = bare;
    ForwardOptions ro;
    ro.only_head = name;
    if (composite.policy == MaskPolicy::extension) {
      for (std::size_t i = 0; i <= j; ++i) ref.tasks.push_back(composite.model.tasks[i]);
      ro.policy = MaskPolicy::extension;
    } else {
      ref.tasks.push_back(composite.model.tasks[j]);
      ro.policy = packs[j].trained_policy;
    }
    rep.tasks.emplace_back(name, max_abs_diff(out.logits_of(name), forward<float>(nullptr, ref, probe, ro).logits_of(name)));
  }
  return rep;
}

}  // namespace memvit
