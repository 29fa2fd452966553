#include "model.hpp"

#include <random>

namespace memvit {

std::string_view to_string(MemoryVariant v) {
  switch (v) {
    case MemoryVariant::per_layer: return "per_layer";
    case MemoryVariant::propagated_first: return "propagated_first";
    case MemoryVariant::propagated_added: return "propagated_added";
  }
  return "?";
}

MemoryVariant parse_variant(std::string_view name) {
  if (name == "per_layer") return MemoryVariant::per_layer;
  if (name == "propagated_first") return MemoryVariant::propagated_first;
  if (name == "propagated_added") return MemoryVariant::propagated_added;
  throw ConfigError("unknown memory variant '" + std::string(name) + "'");
}

std::string to_string(const ParamGroup& g) {
  switch (g.kind) {
    case GroupKind::backbone: return "backbone";
    case GroupKind::cls0: return "CLS0";
    case GroupKind::input: return "INP";
    case GroupKind::task_cls: return "TASK_CLS(" + std::to_string(g.task) + ")";
    case GroupKind::task_memory: return "TASK_MEM(" + std::to_string(g.task) + ")";
    case GroupKind::task_head: return "TASK_HEAD(" + std::to_string(g.task) + ")";
  }
  return "?";
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
  if (image_size == 0 || patch_size == 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) fail("patch_size must divide image_size");
  if (channels == 0) fail("channels must be positive");
  if (depth == 0) fail("depth must be positive");
  if (width == 0 || heads == 0 || width % heads != 0) fail("width must be a positive multiple of heads");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (num_classes == 0) fail("num_classes must be positive");
  if (!mem_counts.empty() && mem_counts.size() != depth) {
    fail("mem_counts has " + std::to_string(mem_counts.size()) + " entries for depth " + std::to_string(depth));
  }
  if (variant == MemoryVariant::propagated_first) {
    for (std::size_t l = 1; l < mem_counts.size(); ++l) {
      if (mem_counts[l] != 0) fail("propagated_first requires memory only at layer 0");
    }
  }
  if (variant == MemoryVariant::propagated_added) {
    for (std::size_t l = 1; l < mem_counts.size(); ++l) {
      if (mem_counts[l] != mem_counts[0]) fail("propagated_added requires the same memory count at every layer");
    }
  }
}

std::vector<std::size_t> uniform_memory(std::size_t depth, std::size_t m, MemoryVariant variant) {
  std::vector<std::size_t> counts(depth, m);
  if (variant == MemoryVariant::propagated_first) {
    for (std::size_t l = 1; l < depth; ++l) counts[l] = 0;
  }
  return counts;
}

template <typename T>
const TaskParams<T>& Model<T>::task(std::string_view name) const {
  for (const auto& t : tasks) {
    if (t.name == name) return t;
  }
  throw NotFoundError("no task named '" + std::string(name) + "'");
}

template <typename T>
TaskParams<T>& Model<T>::task(std::string_view name) {
  return const_cast<TaskParams<T>&>(std::as_const(*this).task(name));
}

template <typename T>
std::optional<std::size_t> Model<T>::task_index(std::string_view name) const {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].name == name) return i;
  }
  return std::nullopt;
}

namespace {

template <typename T, typename U, typename F>
LayerParams<U> map_layer(const LayerParams<T>& l, F f) {
  return {f(l.ln1_g), f(l.ln1_b), f(l.w_qkv), f(l.b_qkv), f(l.w_out), f(l.b_out),
          f(l.ln2_g), f(l.ln2_b), f(l.w_mlp1), f(l.b_mlp1), f(l.w_mlp2), f(l.b_mlp2)};
}

template <typename T, typename U, typename F>
Model<U> map_model(const Model<T>& m, F f) {
  Model<U> out;
  out.config = m.config;
  const auto& b = m.backbone;
  auto& o = out.backbone;
  o.patch_w = f(b.patch_w);
  o.patch_b = f(b.patch_b);
  o.pos = f(b.pos);
  o.cls = f(b.cls);
  for (const auto& l : b.layers) o.layers.push_back(map_layer<T, U>(l, f));
  o.ln_g = f(b.ln_g);
  o.ln_b = f(b.ln_b);
  o.head_w = f(b.head_w);
  o.head_b = f(b.head_b);
  for (const auto& t : m.tasks) {
    TaskParams<U> nt;
    nt.name = t.name;
    nt.variant = t.variant;
    if (t.cls.defined()) nt.cls = f(t.cls);
    for (const auto& mem : t.memory) nt.memory.push_back(mem.defined() ? f(mem) : Tensor<U>());
    nt.head_w = f(t.head_w);
    nt.head_b = f(t.head_b);
    out.tasks.push_back(std::move(nt));
  }
  return out;
}

class NormalSource {
 public:
  explicit NormalSource(std::uint64_t seed) : gen_(seed) {}

  template <typename T>
  Tensor<T> normal(Shape shape, double std) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    std::normal_distribution<double> dist(0.0, std);
    for (auto& v : t.data()) v = static_cast<T>(dist(gen_));
    return t;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace

template <typename T>
Model<T> Model<T>::clone() const {
  return map_model<T, T>(*this, [](const Tensor<T>& t) { return t.clone(); });
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  return map_model<T, U>(*this, [](const Tensor<T>& t) { return t.template cast<U>(); });
}

template <typename T>
std::vector<NamedParam<T>> backbone_parameters(const Backbone<T>& b) {
  const ParamGroup bb{GroupKind::backbone};
  std::vector<NamedParam<T>> out = {
      {"backbone/patch_w", b.patch_w, bb},
      {"backbone/patch_b", b.patch_b, bb},
      {"backbone/pos", b.pos, bb},
      {"backbone/cls", b.cls, ParamGroup{GroupKind::cls0}},
  };
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    const auto& L = b.layers[l];
    const std::string p = "backbone/layer" + std::to_string(l) + "/";
    out.push_back({p + "ln1_g", L.ln1_g, bb});
    out.push_back({p + "ln1_b", L.ln1_b, bb});
    out.push_back({p + "w_qkv", L.w_qkv, bb});
    out.push_back({p + "b_qkv", L.b_qkv, bb});
    out.push_back({p + "w_out", L.w_out, bb});
    out.push_back({p + "b_out", L.b_out, bb});
    out.push_back({p + "ln2_g", L.ln2_g, bb});
    out.push_back({p + "ln2_b", L.ln2_b, bb});
    out.push_back({p + "w_mlp1", L.w_mlp1, bb});
    out.push_back({p + "b_mlp1", L.b_mlp1, bb});
    out.push_back({p + "w_mlp2", L.w_mlp2, bb});
    out.push_back({p + "b_mlp2", L.b_mlp2, bb});
  }
  out.push_back({"backbone/ln_g", b.ln_g, bb});
  out.push_back({"backbone/ln_b", b.ln_b, bb});
  out.push_back({"backbone/head_w", b.head_w, bb});
  out.push_back({"backbone/head_b", b.head_b, bb});
  return out;
}

template <typename T>
std::vector<NamedParam<T>> task_parameters(const TaskParams<T>& t, std::size_t task_index) {
  std::vector<NamedParam<T>> out;
  const std::string p = "task/" + t.name + "/";
  if (t.cls.defined()) out.push_back({p + "cls", t.cls, {GroupKind::task_cls, task_index}});
  for (std::size_t l = 0; l < t.memory.size(); ++l) {
    if (t.memory[l].defined()) out.push_back({p + "mem" + std::to_string(l), t.memory[l], {GroupKind::task_memory, task_index}});
  }
  out.push_back({p + "head_w", t.head_w, {GroupKind::task_head, task_index}});
  out.push_back({p + "head_b", t.head_b, {GroupKind::task_head, task_index}});
  return out;
}

template <typename T>
std::vector<NamedParam<T>> named_parameters(const Model<T>& model) {
  auto out = backbone_parameters(model.backbone);
  for (std::size_t i = 0; i < model.tasks.size(); ++i) {
    auto tp = task_parameters(model.tasks[i], i + 1);
    out.insert(out.end(), tp.begin(), tp.end());
  }
  return out;
}

template <typename T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  NormalSource rng(seed);
  const std::size_t d = config.width, hd = config.hidden();
  Model<T> m;
  m.config = config;
  auto& b = m.backbone;
  b.patch_w = rng.normal<T>({config.patch_dim(), d}, kInitStd);
  b.patch_b = Tensor<T>::zeros({d});
  b.pos = rng.normal<T>({config.num_patches() + 1, d}, kInitStd);
  b.cls = rng.normal<T>({1, d}, kInitStd);
  for (std::size_t l = 0; l < config.depth; ++l) {
    LayerParams<T> L;
    L.ln1_g = Tensor<T>::full({d}, T(1));
    L.ln1_b = Tensor<T>::zeros({d});
    L.w_qkv = rng.normal<T>({d, 3 * d}, kInitStd);
    L.b_qkv = Tensor<T>::zeros({3 * d});
    L.w_out = rng.normal<T>({d, d}, kInitStd);
    L.b_out = Tensor<T>::zeros({d});
    L.ln2_g = Tensor<T>::full({d}, T(1));
    L.ln2_b = Tensor<T>::zeros({d});
    L.w_mlp1 = rng.normal<T>({d, hd}, kInitStd);
    L.b_mlp1 = Tensor<T>::zeros({hd});
    L.w_mlp2 = rng.normal<T>({hd, d}, kInitStd);
    L.b_mlp2 = Tensor<T>::zeros({d});
    b.layers.push_back(std::move(L));
  }
  b.ln_g = Tensor<T>::full({d}, T(1));
  b.ln_b = Tensor<T>::zeros({d});
  b.head_w = rng.normal<T>({d, config.num_classes}, kInitStd);
  b.head_b = Tensor<T>::zeros({config.num_classes});
  return m;
}

template <typename T>
TaskParams<T>& add_task(Model<T>& model, const TaskInit& init) {
  const auto& cfg = model.config;
  if (init.name.empty() || init.name == "base") throw ConfigError("task name must be non-empty and not 'base'");
  if (model.task_index(init.name)) throw ConfigError("duplicate task name '" + init.name + "'");
  if (init.num_classes == 0) throw ConfigError("task '" + init.name + "' needs at least one class");
  if (!init.mem_counts.empty() && init.mem_counts.size() != cfg.depth) {
    throw ConfigError("task '" + init.name + "': memory counts must list every layer");
  }
  ModelConfig check = cfg;
  check.mem_counts = init.mem_counts;
  check.variant = init.variant;
  check.validate();
  if (init.variant != MemoryVariant::per_layer && !init.mem_counts.empty() && init.mem_counts[0] == 0) {
    throw ConfigError("task '" + init.name + "': propagated memory needs slots at layer 0");
  }

  NormalSource rng(init.seed);
  const std::size_t d = cfg.width;
  TaskParams<T> t;
  t.name = init.name;
  t.variant = init.variant;
  if (init.with_cls) {
    t.cls = Tensor<T>::zeros({1, d});
    for (std::size_t j = 0; j < d; ++j) t.cls[j] = model.backbone.cls[j] + model.backbone.pos[j];
  }
  t.memory.resize(cfg.depth);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::size_t m = l < init.mem_counts.size() ? init.mem_counts[l] : 0;
    if (m > 0) t.memory[l] = rng.normal<T>({m, d}, init.init_std);
  }
  t.head_w = rng.normal<T>({d, init.num_classes}, init.init_std);
  t.head_b = Tensor<T>::zeros({init.num_classes});
  model.tasks.push_back(std::move(t));
  return model.tasks.back();
}

#define MEMVIT_INSTANTIATE_MODEL(T)                                                          \
  template struct Model<T>;                                                                  \
  template std::vector<NamedParam<T>> named_parameters<T>(const Model<T>&);                  \
  template std::vector<NamedParam<T>> backbone_parameters<T>(const Backbone<T>&);            \
  template std::vector<NamedParam<T>> task_parameters<T>(const TaskParams<T>&, std::size_t); \
  template Model<T> init_model<T>(const ModelConfig&, std::uint64_t);                        \
  template TaskParams<T>& add_task<T>(Model<T>&, const TaskInit&);
MEMVIT_INSTANTIATE_MODEL(float)
MEMVIT_INSTANTIATE_MODEL(double)
#undef MEMVIT_INSTANTIATE_MODEL

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;

}  // namespace memvit
