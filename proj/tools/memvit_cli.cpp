#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "memvit/memvit.h"

namespace fs = std::filesystem;

namespace {

// Carries a failed C API call up to main with its exit code.
struct Failure : std::runtime_error {
  int code;
  Failure(int c, const std::string& what) : std::runtime_error(what), code(c) {}
};

void check(memvit_status s) {
  if (s == MEMVIT_OK) return;
  const bool user = s == MEMVIT_ERR_CONFIG || s == MEMVIT_ERR_USAGE || s == MEMVIT_ERR_FINGERPRINT;
  throw Failure(user ? 2 : 1, memvit_last_error());
}

// Owns a string returned by the library.
struct Text {
  char* s = nullptr;
  ~Text() { memvit_string_free(s); }
  std::string str() const { return s ? s : ""; }
};

struct Config {
  memvit_config* cfg = nullptr;
  ~Config() { memvit_config_free(cfg); }
};
struct Data {
  memvit_dataset* data = nullptr;
  ~Data() { memvit_dataset_free(data); }
};
struct ModelH {
  memvit_model* m = nullptr;
  ~ModelH() { memvit_model_free(m); }
};
struct PackH {
  memvit_pack* p = nullptr;
  ~PackH() { memvit_pack_free(p); }
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string regime;
  std::optional<std::size_t> mem_count;
  std::string policy;
  std::string task;
};

void resolve(const Options& o, Config& c) {
  check(memvit_config_load(o.config.empty() ? nullptr : o.config.c_str(), &c.cfg));
  if (o.seed) check(memvit_config_set_seed(c.cfg, *o.seed));
  if (!o.regime.empty()) check(memvit_config_set_regime(c.cfg, o.regime.c_str()));
  if (o.mem_count) check(memvit_config_set_mem_count(c.cfg, *o.mem_count));
  if (!o.policy.empty()) check(memvit_config_set_policy(c.cfg, o.policy.c_str()));
  if (!o.task.empty()) check(memvit_config_set_task_name(c.cfg, o.task.c_str()));
  if (!o.out.empty()) check(memvit_config_set_output_dir(c.cfg, o.out.c_str()));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Failure(1, "cannot write " + path.string());
  out << text;
}

// Creates the output directory and echoes the resolved configuration there.
fs::path prepare(const Config& c) {
  Text dir, yaml;
  check(memvit_config_output_dir(c.cfg, &dir.s));
  check(memvit_config_dump(c.cfg, &yaml.s));
  const fs::path out = dir.str();
  fs::create_directories(out);
  write_text(out / "config.yaml", yaml.str());
  return out;
}

std::string config_text(const Config& c) {
  Text yaml;
  check(memvit_config_dump(c.cfg, &yaml.s));
  return yaml.str();
}

void save_log(const fs::path& out, const Text& log) {
  write_text(out / "metrics.log", log.str());
  std::cout << log.str();
}

// Saves the trained task of a one-task model as a pack when it has its own
// class token.
void save_pack_of(const ModelH& m, const fs::path& out, const std::string& run_config) {
  std::size_t n = 0;
  check(memvit_model_num_tasks(m.m, &n));
  if (n == 0) return;
  Text name;
  check(memvit_model_task_name(m.m, n - 1, &name.s));
  PackH p;
  const auto s = memvit_model_extract_pack(m.m, name.str().c_str(), &p.p);
  if (s == MEMVIT_ERR_CONFIG) return;  // head-only task: nothing beyond the head
  check(s);
  check(memvit_pack_save(p.p, (out / "pack.mvck").c_str(), run_config.c_str()));
  std::cout << "pack " << (out / "pack.mvck").string() << "\n";
}

int cmd_pretrain(const Options& o) {
  Config c;
  resolve(o, c);
  const auto out = prepare(c);
  Data d;
  check(memvit_dataset_create(c.cfg, &d.data));
  ModelH m;
  Text log;
  check(memvit_pretrain(c.cfg, d.data, &m.m, &log.s));
  save_log(out, log);
  check(memvit_model_save(m.m, (out / "model.mvck").c_str(), nullptr));
  std::cout << "model " << (out / "model.mvck").string() << "\n";
  return 0;
}

int cmd_finetune(const Options& o, const std::string& backbone) {
  Config c;
  resolve(o, c);
  const auto out = prepare(c);
  Data d;
  check(memvit_dataset_create(c.cfg, &d.data));
  ModelH base, m;
  check(memvit_model_load(backbone.c_str(), &base.m));
  Text log;
  check(memvit_finetune(c.cfg, base.m, d.data, &m.m, &log.s));
  save_log(out, log);
  check(memvit_model_save(m.m, (out / "model.mvck").c_str(), nullptr));
  std::cout << "model " << (out / "model.mvck").string() << "\n";
  save_pack_of(m, out, config_text(c));
  return 0;
}

int cmd_extend(const Options& o, const std::string& composite) {
  Config c;
  resolve(o, c);
  const auto out = prepare(c);
  Data d;
  check(memvit_dataset_create(c.cfg, &d.data));
  ModelH base, m;
  check(memvit_model_load(composite.c_str(), &base.m));
  Text log;
  check(memvit_extend(c.cfg, base.m, d.data, &m.m, &log.s));
  save_log(out, log);
  check(memvit_model_save(m.m, (out / "model.mvck").c_str(), nullptr));
  std::cout << "model " << (out / "model.mvck").string() << "\n";
  save_pack_of(m, out, config_text(c));
  return 0;
}

int cmd_concat(const Options& o, const std::string& backbone, const std::vector<std::string>& packs,
               std::size_t probe) {
  Options quiet = o;
  quiet.policy.clear();  // --policy names the composition policy here
  Config c;
  resolve(quiet, c);
  const auto out = prepare(c);
  ModelH base, m;
  check(memvit_model_load(backbone.c_str(), &base.m));
  std::vector<PackH> held(packs.size());
  std::vector<const memvit_pack*> list;
  for (std::size_t i = 0; i < packs.size(); ++i) {
    check(memvit_pack_load(packs[i].c_str(), &held[i].p));
    list.push_back(held[i].p);
  }
  const std::string policy = o.policy.empty() ? "concatenation" : o.policy;
  check(memvit_compose(base.m, list.data(), list.size(), policy.c_str(), &m.m));
  check(memvit_model_save(m.m, (out / "model.mvck").c_str(), config_text(c).c_str()));
  Data d;
  check(memvit_dataset_create(c.cfg, &d.data));
  Text report;
  double worst = 0;
  check(memvit_preservation_report(m.m, d.data, probe, &report.s, &worst));
  std::cout << "composite " << (out / "model.mvck").string() << " (" << policy << ", " << packs.size()
            << " packs)\n"
            << report.str();
  return 0;
}

int cmd_eval(const Options& o, const std::string& model) {
  Config c;
  resolve(o, c);
  Data d;
  check(memvit_dataset_create(c.cfg, &d.data));
  ModelH m;
  check(memvit_model_load(model.c_str(), &m.m));
  Text report;
  check(memvit_eval_report(m.m, d.data, &report.s));
  std::cout << report.str();
  return 0;
}

int cmd_inspect(const std::string& file) {
  Text report;
  check(memvit_inspect_file(file.c_str(), &report.s));
  std::cout << report.str();
  return 0;
}

const char* kVitB32 =
    "model: {image_size: 224, patch_size: 32, depth: 12, width: 768, heads: 12, mlp_ratio: 4, num_classes: 1000}\n"
    "data: {image_size: 224}\n";

int cmd_flops(const Options& o, bool vit_b32, std::optional<std::size_t> classes) {
  Config c;
  if (vit_b32) {
    check(memvit_config_parse(kVitB32, &c.cfg));
  } else {
    resolve(o, c);
  }
  Text report;
  const std::size_t* m = o.mem_count ? &*o.mem_count : nullptr;
  const std::size_t* k = classes ? &*classes : nullptr;
  check(memvit_flops_report(c.cfg, m, k, &report.s));
  std::cout << report.str();
  return 0;
}

int cmd_gradcheck(const Options& o) {
  Text report;
  double worst = 0;
  check(memvit_gradcheck(o.seed.value_or(0), &report.s, &worst));
  std::cout << report.str();
  const bool ok = worst < 1e-4;
  std::printf("max relative error %.3e (%s 1e-4)\n", worst, ok ? "<" : ">=");
  return ok ? 0 : 1;
}

int cmd_experiment(const Options& o, const std::string& backbone, bool ablation) {
  Config c;
  resolve(o, c);
  const auto out = prepare(c);
  Data d;
  check(memvit_dataset_create(c.cfg, &d.data));
  ModelH base;
  check(memvit_model_load(backbone.c_str(), &base.m));
  Text summary;
  if (ablation) {
    check(memvit_ablate(c.cfg, base.m, d.data, out.c_str(), &summary.s));
  } else {
    check(memvit_sweep(c.cfg, base.m, d.data, out.c_str(), &summary.s));
  }
  std::cout << summary.str();
  return 0;
}

void add_common(CLI::App* cmd, Options& o, bool training) {
  cmd->add_option("--config", o.config, "Run configuration (YAML)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Training seed");
  cmd->add_option("--out", o.out, "Output directory");
  if (training) {
    cmd->add_option("--regime", o.regime, "head_only, head_cls, memory_full_attn, memory_masked or full");
    cmd->add_option("--mem-count", o.mem_count, "Memory tokens per layer");
    cmd->add_option("--policy", o.policy, "Mask policy: full, masked_finetune, extension, concatenation or default");
    cmd->add_option("--task", o.task, "Name of the trained task (\"base\" trains the base head)");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memory-token vision transformer: training, composition and diagnostics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", memvit_version());
  Options o;
  std::string backbone, model, file;
  std::vector<std::string> packs;
  std::size_t probe = 64;
  bool vit_b32 = false;
  std::optional<std::size_t> classes;

  auto* pretrain = app.add_subcommand("pretrain", "Train a backbone end to end on the configured task");
  add_common(pretrain, o, true);
  auto* finetune = app.add_subcommand("finetune", "Fine-tune a task on a frozen or trainable backbone");
  add_common(finetune, o, true);
  finetune->add_option("backbone", backbone, "Backbone checkpoint")->required()->check(CLI::ExistingFile);
  auto* eval = app.add_subcommand("eval", "Test accuracy of every head");
  add_common(eval, o, false);
  eval->add_option("model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
  auto* concat = app.add_subcommand("concat", "Compose task packs onto a backbone");
  add_common(concat, o, false);
  concat->add_option("--policy", o.policy, "concatenation (default) or extension");
  concat->add_option("--probe", probe, "Probe images for the preservation report");
  concat->add_option("backbone", backbone, "Backbone checkpoint")->required()->check(CLI::ExistingFile);
  concat->add_option("packs", packs, "Task pack checkpoints")->check(CLI::ExistingFile);
  auto* extend = app.add_subcommand("extend", "Train one more task on an extension composite");
  add_common(extend, o, true);
  extend->add_option("composite", model, "Composite checkpoint")->required()->check(CLI::ExistingFile);
  auto* inspect = app.add_subcommand("inspect", "Print a checkpoint's manifest and summaries");
  inspect->add_option("file", file, "Checkpoint")->required()->check(CLI::ExistingFile);
  auto* flops = app.add_subcommand("flops", "Parameter and compute cost of memory");
  add_common(flops, o, false);
  flops->add_option("--mem-count", o.mem_count, "Memory tokens per layer");
  flops->add_option("--classes", classes, "Classes of the task head");
  flops->add_flag("--vit-b32", vit_b32, "Use the ViT-B/32 shape at 224 pixels");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  gradcheck->add_option("--seed", o.seed, "Model seed");
  auto* ablate = app.add_subcommand("ablate", "Memory placement and variant study");
  add_common(ablate, o, true);
  ablate->add_option("backbone", backbone, "Backbone checkpoint")->required()->check(CLI::ExistingFile);
  auto* sweep = app.add_subcommand("sweep", "Regime x learning rate x memory count sweep");
  add_common(sweep, o, true);
  sweep->add_option("backbone", backbone, "Backbone checkpoint")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pretrain) return cmd_pretrain(o);
    if (*finetune) return cmd_finetune(o, backbone);
    if (*eval) return cmd_eval(o, model);
    if (*concat) return cmd_concat(o, backbone, packs, probe);
    if (*extend) return cmd_extend(o, model);
    if (*inspect) return cmd_inspect(file);
    if (*flops) return cmd_flops(o, vit_b32, classes);
    if (*gradcheck) return cmd_gradcheck(o);
    if (*ablate) return cmd_experiment(o, backbone, true);
    if (*sweep) return cmd_experiment(o, backbone, false);
  } catch (const Failure& f) {
    std::cerr << "error: " << f.what() << "\n";
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
