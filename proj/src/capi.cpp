#include "memvit/memvit.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "checkpoint.hpp"
#include "config.hpp"
#include "diagnostics.hpp"
#include "experiments.hpp"

struct memvit_config {
  memvit::RunConfig cfg;
};

struct memvit_dataset {
  memvit::Dataset data;
};

struct memvit_model {
  memvit::Composite composite;
  std::string run_config;
};

struct memvit_pack {
  memvit::PackCheckpoint ckpt;
};

namespace {

using namespace memvit;

thread_local std::string g_last_error;

memvit_status fail(memvit_status code, const char* what) {
  g_last_error = what;
  return code;
}

template <typename F>
memvit_status guard(F&& body) {
  try {
    body();
    g_last_error.clear();
    return MEMVIT_OK;
  } catch (const DimensionError& e) {
    return fail(MEMVIT_ERR_DIMENSION, e.what());
  } catch (const ContractError& e) {
    return fail(MEMVIT_ERR_CONTRACT, e.what());
  } catch (const IndexError& e) {
    return fail(MEMVIT_ERR_INDEX, e.what());
  } catch (const UsageError& e) {
    return fail(MEMVIT_ERR_USAGE, e.what());
  } catch (const ConfigError& e) {
    return fail(MEMVIT_ERR_CONFIG, e.what());
  } catch (const FormatError& e) {
    return fail(MEMVIT_ERR_FORMAT, e.what());
  } catch (const IoError& e) {
    return fail(MEMVIT_ERR_IO, e.what());
  } catch (const FingerprintError& e) {
    return fail(MEMVIT_ERR_FINGERPRINT, e.what());
  } catch (const NotFoundError& e) {
    return fail(MEMVIT_ERR_NOT_FOUND, e.what());
  } catch (const std::exception& e) {
    return fail(MEMVIT_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(MEMVIT_ERR_INTERNAL, "unknown error");
  }
}

template <typename... P>
void require(const char* fn, const P*... ptrs) {
  if (((ptrs == nullptr) || ...)) throw UsageError(std::string(fn) + ": null argument");
}

char* dup(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void emit(char** out, const std::string& s) {
  if (out) *out = dup(s);
}

void update(memvit_config* c, const std::function<void(RunConfig&)>& change) {
  RunConfig next = c->cfg;
  change(next);
  next.validate();
  c->cfg = std::move(next);
}

std::size_t task_index(const Composite& c, const std::string& name) {
  for (std::size_t j = 0; j < c.num_tasks(); ++j) {
    if (c.model.tasks[j].name == name) return j;
  }
  throw NotFoundError("no task named '" + name + "'");
}

std::string group_summary(const Model<float>& model) {
  std::map<std::string, std::size_t> counts;
  std::vector<std::string> order;
  for (const auto& p : named_parameters(model)) {
    const auto g = to_string(p.group);
    if (!counts.count(g)) order.push_back(g);
    counts[g] += p.tensor.numel();
  }
  std::string s = "parameter group            count\n";
  char buf[128];
  for (const auto& g : order) {
    std::snprintf(buf, sizeof buf, "%-24s %9zu\n", g.c_str(), counts[g]);
    s += buf;
  }
  return s;
}

std::string inspect_model(const ModelCheckpoint& ck) {
  const auto& c = ck.composite;
  std::ostringstream s;
  s << "policy: " << to_string(c.policy) << "\n";
  s << "backbone fingerprint: " << backbone_fingerprint(c.model.backbone) << "\n";
  for (std::size_t j = 0; j < c.num_tasks(); ++j) {
    const auto& t = c.model.tasks[j];
    s << "task " << j + 1 << ": " << t.name << " trained under " << to_string(c.trained_policies[j]) << ", "
      << (t.cls.defined() ? "own class token" : "reads CLS0") << ", memory per layer [";
    for (std::size_t l = 0; l < c.model.config.depth; ++l) s << (l ? " " : "") << t.mem_count(l);
    s << "]\n";
  }
  s << "\n" << group_summary(c.model);
  if (c.num_tasks() > 0) {
    const auto layout = layout_for(c.model);
    s << "\nlayer 0 attention mask (" << to_string(c.policy) << ")\n" << format_mask(layout, build_mask(layout, c.policy, 0), 0);
    if (c.policy != MaskPolicy::full) {
      s << "\n" << verify_reuse(layout, c.policy, c.model.config.depth).format();
    }
  }
  return s.str();
}

std::string inspect_pack(const PackCheckpoint& ck) {
  const auto& p = ck.pack;
  std::ostringstream s;
  s << "task: " << p.task_name << "\nvariant: " << to_string(p.variant) << "\ntrained policy: "
    << to_string(p.trained_policy) << "\nbase fingerprint: " << p.base_fingerprint << "\nmemory per layer [";
  const auto mems = p.mem_counts();
  for (std::size_t l = 0; l < mems.size(); ++l) s << (l ? " " : "") << mems[l];
  s << "]\nprerequisites:";
  for (const auto& r : p.prerequisites) s << " " << r;
  s << "\nparameters: " << p.parameter_count() << "\n";
  return s.str();
}

using RowSink = std::function<void(const SweepRow&, const TrainResult&)>;

// Writes each run's metric log under dir and returns the sink.
RowSink log_writer(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  return [dir](const SweepRow& r, const TrainResult& res) {
    char name[160];
    std::snprintf(name, sizeof name, "%s_m%zu_%s_%s_lr%g.log", std::string(to_string(r.regime)).c_str(), r.mem_count,
                  std::string(to_string(r.variant)).c_str(), r.placement.c_str(), r.lr);
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    for (const auto& rec : res.log) out << format_record(rec) << "\n";
  };
}

std::string summarize(const std::vector<SweepRow>& rows, const std::filesystem::path& dir) {
  const std::string text = "all runs\n" + format_rows(rows) + "\nbest learning rate per setting (holdout)\n" +
                           format_rows(best_per_setting(rows));
  std::ofstream out(dir / "summary.txt");
  if (!out) throw IoError("cannot write " + (dir / "summary.txt").string());
  out << text;
  return text;
}

}  // namespace

extern "C" {

const char* memvit_last_error(void) { return g_last_error.c_str(); }

const char* memvit_version(void) { return "1.0.0"; }

void memvit_string_free(char* s) { std::free(s); }

memvit_status memvit_config_load(const char* path, memvit_config** out) {
  return guard([&] {
    require("memvit_config_load", out);
    auto c = std::make_unique<memvit_config>();
    if (path) c->cfg = load_run_config(path);
    *out = c.release();
  });
}

memvit_status memvit_config_parse(const char* yaml_text, memvit_config** out) {
  return guard([&] {
    require("memvit_config_parse", out);
    auto c = std::make_unique<memvit_config>();
    if (yaml_text) c->cfg = parse_run_config(yaml_text);
    *out = c.release();
  });
}

void memvit_config_free(memvit_config* cfg) { delete cfg; }

memvit_status memvit_config_dump(const memvit_config* cfg, char** yaml_text) {
  return guard([&] {
    require("memvit_config_dump", cfg, yaml_text);
    *yaml_text = dup(dump_run_config(cfg->cfg));
  });
}

memvit_status memvit_config_set_seed(memvit_config* cfg, uint64_t seed) {
  return guard([&] {
    require("memvit_config_set_seed", cfg);
    update(cfg, [&](RunConfig& c) { c.train.seed = seed; });
  });
}

memvit_status memvit_config_set_regime(memvit_config* cfg, const char* regime) {
  return guard([&] {
    require("memvit_config_set_regime", cfg, regime);
    update(cfg, [&](RunConfig& c) { c.train.regime = parse_regime(regime); });
  });
}

memvit_status memvit_config_set_mem_count(memvit_config* cfg, size_t m) {
  return guard([&] {
    require("memvit_config_set_mem_count", cfg);
    update(cfg, [&](RunConfig& c) {
      c.train.mem_count = m;
      c.train.mem_counts.clear();
    });
  });
}

memvit_status memvit_config_set_policy(memvit_config* cfg, const char* policy) {
  return guard([&] {
    require("memvit_config_set_policy", cfg, policy);
    update(cfg, [&](RunConfig& c) {
      if (std::string(policy) == "default") {
        c.train.policy.reset();
      } else {
        c.train.policy = parse_policy(policy);
      }
    });
  });
}

memvit_status memvit_config_set_output_dir(memvit_config* cfg, const char* dir) {
  return guard([&] {
    require("memvit_config_set_output_dir", cfg, dir);
    update(cfg, [&](RunConfig& c) { c.output_dir = dir; });
  });
}

memvit_status memvit_config_set_task_name(memvit_config* cfg, const char* name) {
  return guard([&] {
    require("memvit_config_set_task_name", cfg, name);
    update(cfg, [&](RunConfig& c) { c.train.task_name = name; });
  });
}

memvit_status memvit_config_output_dir(const memvit_config* cfg, char** dir) {
  return guard([&] {
    require("memvit_config_output_dir", cfg, dir);
    *dir = dup(cfg->cfg.output_dir);
  });
}

memvit_status memvit_dataset_create(const memvit_config* cfg, memvit_dataset** out) {
  return guard([&] {
    require("memvit_dataset_create", cfg, out);
    *out = new memvit_dataset{load_data(cfg->cfg)};
  });
}

void memvit_dataset_free(memvit_dataset* data) { delete data; }

memvit_status memvit_dataset_save(const memvit_dataset* data, const char* path) {
  return guard([&] {
    require("memvit_dataset_save", data, path);
    save_binary(data->data, path);
  });
}

memvit_status memvit_pretrain(const memvit_config* cfg, const memvit_dataset* data, memvit_model** out, char** log) {
  return guard([&] {
    require("memvit_pretrain", cfg, data, out);
    std::ostringstream records;
    auto r = pretrain(cfg->cfg.model, cfg->cfg.init_seed, data->data, cfg->cfg.train, &records);
    auto m = std::make_unique<memvit_model>();
    m->composite.model = std::move(r.model);
    m->run_config = dump_run_config(cfg->cfg);
    emit(log, records.str());
    *out = m.release();
  });
}

memvit_status memvit_finetune(const memvit_config* cfg, const memvit_model* backbone, const memvit_dataset* data,
                              memvit_model** out, char** log) {
  return guard([&] {
    require("memvit_finetune", cfg, backbone, data, out);
    std::ostringstream records;
    auto r = finetune(backbone->composite.model, data->data, cfg->cfg.train, &records);
    auto m = std::make_unique<memvit_model>(memvit_model{std::move(r.composite), dump_run_config(cfg->cfg)});
    emit(log, records.str());
    *out = m.release();
  });
}

memvit_status memvit_extend(const memvit_config* cfg, const memvit_model* composite, const memvit_dataset* data,
                            memvit_model** out, char** log) {
  return guard([&] {
    require("memvit_extend", cfg, composite, data, out);
    std::ostringstream records;
    auto c = extend(composite->composite, data->data, cfg->cfg.train, nullptr, &records);
    auto m = std::make_unique<memvit_model>(memvit_model{std::move(c), dump_run_config(cfg->cfg)});
    emit(log, records.str());
    *out = m.release();
  });
}

memvit_status memvit_model_load(const char* path, memvit_model** out) {
  return guard([&] {
    require("memvit_model_load", path, out);
    auto ck = load_model(path);
    *out = new memvit_model{std::move(ck.composite), std::move(ck.run_config)};
  });
}

memvit_status memvit_model_save(const memvit_model* model, const char* path, const char* run_config) {
  return guard([&] {
    require("memvit_model_save", model, path);
    save_model(path, {model->composite, run_config ? std::string(run_config) : model->run_config});
  });
}

void memvit_model_free(memvit_model* model) { delete model; }

memvit_status memvit_model_num_tasks(const memvit_model* model, size_t* count) {
  return guard([&] {
    require("memvit_model_num_tasks", model, count);
    *count = model->composite.num_tasks();
  });
}

memvit_status memvit_model_task_name(const memvit_model* model, size_t index, char** name) {
  return guard([&] {
    require("memvit_model_task_name", model, name);
    if (index >= model->composite.num_tasks()) {
      throw IndexError("task index " + std::to_string(index) + " out of range");
    }
    *name = dup(model->composite.model.tasks[index].name);
  });
}

memvit_status memvit_model_fingerprint(const memvit_model* model, char** hex) {
  return guard([&] {
    require("memvit_model_fingerprint", model, hex);
    *hex = dup(backbone_fingerprint(model->composite.model.backbone));
  });
}

memvit_status memvit_model_extract_pack(const memvit_model* model, const char* task_name, memvit_pack** out) {
  return guard([&] {
    require("memvit_model_extract_pack", model, task_name, out);
    const auto& c = model->composite;
    auto p = std::make_unique<memvit_pack>();
    p->ckpt.pack = c.pack(task_index(c, task_name));
    p->ckpt.config = c.model.config;
    p->ckpt.run_config = model->run_config;
    *out = p.release();
  });
}

memvit_status memvit_pack_load(const char* path, memvit_pack** out) {
  return guard([&] {
    require("memvit_pack_load", path, out);
    *out = new memvit_pack{load_pack(path)};
  });
}

memvit_status memvit_pack_save(const memvit_pack* pack, const char* path, const char* run_config) {
  return guard([&] {
    require("memvit_pack_save", pack, path);
    auto ck = pack->ckpt;
    if (run_config) ck.run_config = run_config;
    save_pack(path, ck);
  });
}

void memvit_pack_free(memvit_pack* pack) { delete pack; }

memvit_status memvit_compose(const memvit_model* base, const memvit_pack* const* packs, size_t count,
                             const char* policy, memvit_model** out) {
  return guard([&] {
    require("memvit_compose", base, policy, out);
    if (count > 0 && !packs) throw UsageError("memvit_compose: null pack array");
    std::vector<TaskPack> list;
    for (size_t i = 0; i < count; ++i) {
      if (!packs[i]) throw UsageError("memvit_compose: null pack " + std::to_string(i));
      if (packs[i]->ckpt.config.width != base->composite.model.config.width ||
          packs[i]->ckpt.config.depth != base->composite.model.config.depth) {
        throw ConfigError("pack '" + packs[i]->ckpt.pack.task_name + "' belongs to a different model shape");
      }
      list.push_back(packs[i]->ckpt.pack);
    }
    try {
      *out = new memvit_model{compose(base->composite.model, list, parse_policy(policy)), base->run_config};
    } catch (const FingerprintError& e) {
      // Name the offending pack.
      const auto fp = backbone_fingerprint(base->composite.model.backbone);
      for (const auto& p : list) {
        if (p.base_fingerprint != fp) {
          throw FingerprintError("pack '" + p.task_name + "' was trained on backbone " + p.base_fingerprint +
                                 ", not " + fp);
        }
      }
      throw;
    }
  });
}

memvit_status memvit_preservation_report(const memvit_model* composite, const memvit_dataset* data, size_t probe_size,
                                         char** report, double* max_deviation) {
  return guard([&] {
    require("memvit_preservation_report", composite, data);
    const auto& d = data->data;
    const std::size_t n = std::min(probe_size, d.test.size());
    if (n == 0) throw UsageError("preservation report needs a non-empty probe batch");
    const std::vector<std::size_t> idx(d.test.begin(), d.test.begin() + static_cast<std::ptrdiff_t>(n));
    const auto rep = verify_composite(composite->composite, d.images<float>(idx));
    emit(report, "probe: " + std::to_string(n) + " test images\n" + rep.format());
    if (max_deviation) *max_deviation = rep.max();
  });
}

memvit_status memvit_eval_report(const memvit_model* model, const memvit_dataset* data, char** report) {
  return guard([&] {
    require("memvit_eval_report", model, data, report);
    const auto& c = model->composite;
    const auto& d = data->data;
    std::vector<std::string> heads = {"base"};
    for (const auto& t : c.model.tasks) heads.push_back(t.name);
    std::string s = "head                 classes  test_acc\n";
    char buf[160];
    for (const auto& h : heads) {
      const std::size_t k = h == "base" ? c.model.config.num_classes : c.model.tasks[task_index(c, h)].head_b.numel();
      const double acc = evaluate(c.model, d, d.test, h, c.policy);
      std::snprintf(buf, sizeof buf, "%-20s %8zu  %8.4f\n", h.c_str(), k, acc);
      s += buf;
    }
    std::snprintf(buf, sizeof buf, "policy %s, %zu test images, %zu data classes\n",
                  std::string(to_string(c.policy)).c_str(), d.test.size(), d.num_classes);
    *report = dup(s + buf);
  });
}

memvit_status memvit_evaluate(const memvit_model* model, const memvit_dataset* data, const char* head,
                              double* accuracy) {
  return guard([&] {
    require("memvit_evaluate", model, data, head, accuracy);
    const auto& c = model->composite;
    if (std::string(head) != "base") task_index(c, head);
    *accuracy = evaluate(c.model, data->data, data->data.test, head, c.policy);
  });
}

memvit_status memvit_inspect_file(const char* path, char** report) {
  return guard([&] {
    require("memvit_inspect_file", path, report);
    const auto bytes = read_file(path);
    std::string s = "manifest\n" + manifest_text(bytes) + "\n\n";
    if (peek_kind(bytes) == CheckpointKind::model) {
      s += inspect_model(decode_model(bytes));
    } else {
      s += inspect_pack(decode_pack(bytes));
    }
    *report = dup(s);
  });
}

memvit_status memvit_flops_report(const memvit_config* cfg, const size_t* mem_count, const size_t* num_classes,
                                  char** report) {
  return guard([&] {
    require("memvit_flops_report", cfg, report);
    const auto& c = cfg->cfg;
    const std::size_t m = mem_count ? *mem_count : c.train.mem_count;
    const std::size_t k = num_classes ? *num_classes : c.model.num_classes;
    *report = dup(flops_report(c.model, m, k).format());
  });
}

memvit_status memvit_gradcheck(uint64_t seed, char** report, double* max_rel_error) {
  return guard([&] {
    std::string text;
    double worst = 0;
    for (auto policy : {MaskPolicy::full, MaskPolicy::masked_finetune, MaskPolicy::concatenation, MaskPolicy::extension}) {
      const auto rep = run_gradcheck(seed, policy);
      text += "policy " + std::string(to_string(policy)) + "\n" + rep.format() + "\n";
      worst = std::max(worst, rep.max_rel_error());
    }
    emit(report, text);
    if (max_rel_error) *max_rel_error = worst;
  });
}

memvit_status memvit_sweep(const memvit_config* cfg, const memvit_model* backbone, const memvit_dataset* data,
                           const char* out_dir, char** summary) {
  return guard([&] {
    require("memvit_sweep", cfg, backbone, data, out_dir);
    const auto& s = cfg->cfg.sweep;
    const auto rows = sweep(backbone->composite.model, data->data, cfg->cfg.train, s.regimes, s.learning_rates,
                            s.mem_counts, log_writer(out_dir));
    emit(summary, summarize(rows, out_dir));
  });
}

memvit_status memvit_ablate(const memvit_config* cfg, const memvit_model* backbone, const memvit_dataset* data,
                            const char* out_dir, char** summary) {
  return guard([&] {
    require("memvit_ablate", cfg, backbone, data, out_dir);
    const auto& c = cfg->cfg;
    auto ks = c.sweep.layer_counts;
    if (ks.empty()) ks = {0, c.model.depth / 2, c.model.depth};
    const auto rows =
        ablate(backbone->composite.model, data->data, c.train, ks, c.sweep.learning_rates, log_writer(out_dir));
    emit(summary, summarize(rows, out_dir));
  });
}

}  // extern "C"
