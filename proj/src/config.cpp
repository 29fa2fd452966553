#include "config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace memvit {

namespace {

std::string where(const YAML::Node& node, const std::string& field) {
  const auto mark = node.Mark();
  if (mark.line < 0) return field;
  return "line " + std::to_string(mark.line + 1) + ": " + field;
}

[[noreturn]] void bad(const YAML::Node& node, const std::string& field, const std::string& what) {
  throw ConfigError("config " + where(node, field) + ": " + what);
}

template <typename T>
T scalar(const YAML::Node& node, const std::string& field, const char* expected) {
  if (!node.IsScalar()) bad(node, field, std::string("expected ") + expected);
  if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (!node.Scalar().empty() && node.Scalar()[0] == '-') bad(node, field, "must be non-negative");
  }
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    bad(node, field, std::string("expected ") + expected + ", got '" + node.Scalar() + "'");
  }
}

template <typename T>
std::vector<T> sequence(const YAML::Node& node, const std::string& field, const char* expected) {
  if (!node.IsSequence()) bad(node, field, std::string("expected a list of ") + expected);
  std::vector<T> out;
  for (std::size_t i = 0; i < node.size(); ++i) {
    out.push_back(scalar<T>(node[i], field + "[" + std::to_string(i) + "]", expected));
  }
  return out;
}

// Wraps a parser so its ConfigError carries the line and field.
template <typename F>
auto named(const YAML::Node& node, const std::string& field, F&& parse) {
  const auto text = scalar<std::string>(node, field, "a name");
  try {
    return parse(text);
  } catch (const ConfigError& e) {
    bad(node, field, e.what());
  }
}

struct Field {
  std::string name;
  std::function<void(const YAML::Node&, const std::string&)> read;
  std::function<void(YAML::Emitter&)> write;
};

template <typename T>
const char* type_name() {
  if constexpr (std::is_same_v<T, bool>) return "true or false";
  else if constexpr (std::is_unsigned_v<T>) return "a non-negative integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else return "a string";
}

// Doubles in their shortest round-trip form, so 0.1 dumps as 0.1.
template <typename T>
void emit(YAML::Emitter& e, const T& v) {
  if constexpr (std::is_floating_point_v<T>) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    e << std::string(buf, r.ptr);
  } else {
    e << v;
  }
}

template <typename T>
Field field(std::string name, T& ref) {
  return {name, [&ref](const YAML::Node& n, const std::string& f) { ref = scalar<T>(n, f, type_name<T>()); },
          [&ref](YAML::Emitter& e) { emit(e, ref); }};
}

template <typename T>
Field field(std::string name, std::vector<T>& ref) {
  return {name, [&ref](const YAML::Node& n, const std::string& f) { ref = sequence<T>(n, f, type_name<T>()); },
          [&ref](YAML::Emitter& e) {
            e << YAML::Flow << YAML::BeginSeq;
            for (const auto& v : ref) emit(e, v);
            e << YAML::EndSeq;
          }};
}

Field bind_regime(std::string name, Regime& ref) {
  return {name, [&ref](const YAML::Node& n, const std::string& f) { ref = named(n, f, parse_regime); },
          [&ref](YAML::Emitter& e) { e << std::string(to_string(ref)); }};
}

Field bind_variant(std::string name, MemoryVariant& ref) {
  return {name, [&ref](const YAML::Node& n, const std::string& f) { ref = named(n, f, parse_variant); },
          [&ref](YAML::Emitter& e) { e << std::string(to_string(ref)); }};
}

Field bind_policy(std::string name, std::optional<MaskPolicy>& ref) {
  return {name,
          [&ref](const YAML::Node& n, const std::string& f) {
            if (n.IsNull() || (n.IsScalar() && n.Scalar() == "default")) {
              ref.reset();
            } else {
              ref = named(n, f, parse_policy);
            }
          },
          [&ref](YAML::Emitter& e) { e << (ref ? std::string(to_string(*ref)) : std::string("default")); }};
}

Field bind_regimes(std::string name, std::vector<Regime>& ref) {
  return {name,
          [&ref](const YAML::Node& n, const std::string& f) {
            if (!n.IsSequence()) bad(n, f, "expected a list of regime names");
            ref.clear();
            for (std::size_t i = 0; i < n.size(); ++i) ref.push_back(named(n[i], f + "[" + std::to_string(i) + "]", parse_regime));
          },
          [&ref](YAML::Emitter& e) {
            e << YAML::Flow << YAML::BeginSeq;
            for (auto r : ref) e << std::string(to_string(r));
            e << YAML::EndSeq;
          }};
}

struct Section {
  std::string name;
  std::vector<Field> fields;
};

std::vector<Section> sections(RunConfig& c) {
  auto& m = c.model;
  auto& t = c.train;
  auto& d = c.data.synthetic;
  auto& s = c.sweep;
  return {
      {"model",
       {field("image_size", m.image_size), field("channels", m.channels), field("patch_size", m.patch_size),
        field("depth", m.depth), field("width", m.width), field("heads", m.heads), field("mlp_ratio", m.mlp_ratio),
        field("num_classes", m.num_classes), field("init_seed", c.init_seed)}},
      {"train",
       {bind_regime("regime", t.regime), field("base_lr", t.base_lr), field("momentum", t.momentum),
        field("total_steps", t.total_steps), field("warmup_steps", t.warmup_steps), field("batch_size", t.batch_size),
        field("grad_clip_norm", t.grad_clip_norm), field("seed", t.seed), field("init_std", t.init_std),
        field("mem_count", t.mem_count), field("mem_counts", t.mem_counts), bind_variant("variant", t.variant),
        field("eval_fraction", t.eval_fraction), field("eval_interval", t.eval_interval),
        field("train_eval_samples", t.train_eval_samples), bind_policy("policy", t.policy), field("flip", t.flip),
        field("crop_pad", t.crop_pad), field("task_name", t.task_name), field("cache_features", t.cache_features)}},
      {"data",
       {field("path", c.data.path), field("seed", d.seed), field("family_seed", d.family_seed),
        field("num_classes", d.num_classes), field("image_size", d.image_size), field("channels", d.channels),
        field("samples_per_class", d.samples_per_class), field("freq_min", d.freq_min), field("freq_max", d.freq_max),
        field("pool_size", d.pool_size), field("gratings_per_class", d.gratings_per_class),
        field("noise_std", d.noise_std), field("overlap", d.overlap), field("amplitude_jitter", d.amplitude_jitter),
        field("test_fraction", d.test_fraction)}},
      {"sweep",
       {field("learning_rates", s.learning_rates), field("mem_counts", s.mem_counts), bind_regimes("regimes", s.regimes),
        field("layer_counts", s.layer_counts)}},
      {"output", {field("dir", c.output_dir)}},
  };
}

std::string known(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += (s.empty() ? "" : ", ") + n;
  return s;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.path.empty()) {
    data.synthetic.validate();
    if (data.synthetic.image_size != model.image_size || data.synthetic.channels != model.channels) {
      throw ConfigError("config: data images (" + std::to_string(data.synthetic.image_size) + "x" +
                        std::to_string(data.synthetic.channels) + " channels) do not match the model (" +
                        std::to_string(model.image_size) + "x" + std::to_string(model.channels) + ")");
    }
  }
  for (double lr : sweep.learning_rates) {
    if (!(lr > 0)) throw ConfigError("config: sweep.learning_rates must be positive");
  }
  for (std::size_t k : sweep.layer_counts) {
    if (k > model.depth) throw ConfigError("config: sweep.layer_counts entry " + std::to_string(k) + " exceeds depth");
  }
  if (output_dir.empty()) throw ConfigError("config: output.dir must be non-empty");
}

RunConfig parse_run_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("config line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  RunConfig cfg;
  if (root.IsNull()) {
    cfg.validate();
    return cfg;
  }
  if (!root.IsMap()) bad(root, "<root>", "expected a mapping of sections");
  auto secs = sections(cfg);
  std::vector<std::string> section_names;
  for (const auto& s : secs) section_names.push_back(s.name);
  for (const auto& entry : root) {
    const auto key = entry.first.as<std::string>();
    auto it = std::find_if(secs.begin(), secs.end(), [&](const Section& s) { return s.name == key; });
    if (it == secs.end()) bad(entry.first, key, "unknown section (expected one of " + known(section_names) + ")");
    if (entry.second.IsNull()) continue;
    if (!entry.second.IsMap()) bad(entry.second, key, "expected a mapping");
    std::vector<std::string> field_names;
    for (const auto& f : it->fields) field_names.push_back(f.name);
    for (const auto& kv : entry.second) {
      const auto name = kv.first.as<std::string>();
      auto f = std::find_if(it->fields.begin(), it->fields.end(), [&](const Field& x) { return x.name == name; });
      if (f == it->fields.end()) bad(kv.first, key + "." + name, "unknown key (expected one of " + known(field_names) + ")");
      f->read(kv.second, key + "." + name);
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string dump_run_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  YAML::Emitter e;
  e << YAML::BeginMap;
  for (auto& s : sections(copy)) {
    e << YAML::Key << s.name << YAML::Value << YAML::BeginMap;
    for (auto& f : s.fields) {
      e << YAML::Key << f.name << YAML::Value;
      f.write(e);
    }
    e << YAML::EndMap;
  }
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

Dataset load_data(const RunConfig& cfg) {
  if (!cfg.data.path.empty()) {
    return load_binary(cfg.data.path, cfg.data.synthetic.seed, cfg.data.synthetic.test_fraction, cfg.train.eval_fraction);
  }
  auto spec = cfg.data.synthetic;
  spec.holdout_fraction = cfg.train.eval_fraction;
  return generate(spec);
}

}  // namespace memvit
