#include "encoder.hpp"

#include <algorithm>

namespace memvit {

template <typename T>
const Tensor<T>& ForwardTrace<T>::logits_of(std::string_view head) const {
  for (const auto& [name, t] : logits) {
    if (name == head) return t;
  }
  throw NotFoundError("no head named '" + std::string(head) + "' in forward output");
}

template <typename T>
const Tensor<T>& ForwardTrace<T>::features_of(std::string_view head) const {
  for (const auto& [name, t] : features) {
    if (name == head) return t;
  }
  throw NotFoundError("no head named '" + std::string(head) + "' in forward output");
}

template <typename T>
Tensor<T> patch_embed(Tape<T>* tape, const Tensor<T>& images, const ModelConfig& config, const Backbone<T>& backbone) {
  const std::size_t s = config.image_size, c = config.channels, p = config.patch_size, g = config.grid();
  if (images.rank() != 4 || images.dim(1) != s || images.dim(2) != s || images.dim(3) != c) {
    throw DimensionError("patch_embed: images " + shape_str(images.shape()) + " do not match [B, " + std::to_string(s) +
                         ", " + std::to_string(s) + ", " + std::to_string(c) + "]");
  }
  const std::size_t batch = images.dim(0), n = config.num_patches(), pd = config.patch_dim();
  Tensor<T> patches = Tensor<T>::zeros({batch, n, pd});
  const T* src = images.data().data();
  T* dst = patches.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gy = 0; gy < g; ++gy) {
      for (std::size_t gx = 0; gx < g; ++gx) {
        T* out = dst + (b * n + gy * g + gx) * pd;
        for (std::size_t py = 0; py < p; ++py) {
          const T* row = src + ((b * s + gy * p + py) * s + gx * p) * c;
          // Pixels in [0, 1] enter the projection centered, as [-1, 1].
          std::transform(row, row + p * c, out + py * p * c, [](T v) { return T(2) * v - T(1); });
        }
      }
    }
  }
  auto tokens = ops::linear(tape, patches, backbone.patch_w, backbone.patch_b);
  auto cls = ops::broadcast_batch(tape, backbone.cls, batch);
  auto z = ops::concat_tokens(tape, cls, tokens);
  return ops::add_rows(tape, z, backbone.pos, 0);
}

template <typename T>
LayerOutput<T> encoder_layer(Tape<T>* tape, const Tensor<T>& carried, const LayerParams<T>& layer, std::size_t heads,
                             const MaskMatrix* mask, const Tensor<T>& extra) {
  const std::size_t d = carried.dim(2);
  const std::size_t s = extra.defined() ? extra.dim(0) : 0;
  if (mask && (mask->rows != carried.dim(1) || mask->cols != carried.dim(1) + s)) {
    throw DimensionError("encoder_layer: mask " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                         " does not match " + std::to_string(carried.dim(1)) + " carried + " + std::to_string(s) +
                         " memory tokens");
  }
  auto h = ops::layernorm(tape, carried, layer.ln1_g, layer.ln1_b);
  auto qkv = ops::linear(tape, h, layer.w_qkv, layer.b_qkv);
  Tensor<T> ext_kv;
  if (s > 0) {
    auto hm = ops::layernorm(tape, extra, layer.ln1_g, layer.ln1_b);
    ext_kv = ops::linear(tape, hm, layer.w_qkv, layer.b_qkv, d, 3 * d);
  }
  auto attn = ops::masked_attention(tape, qkv, ext_kv, heads, mask);
  auto u = ops::add(tape, carried, ops::linear(tape, attn.out, layer.w_out, layer.b_out));
  auto m = ops::linear(tape, ops::gelu(tape, ops::linear(tape, ops::layernorm(tape, u, layer.ln2_g, layer.ln2_b),
                                                         layer.w_mlp1, layer.b_mlp1)),
                       layer.w_mlp2, layer.b_mlp2);
  return {ops::add(tape, u, m), std::move(attn.weights)};
}

namespace {

// Stacks [n_i, D] tensors along the token axis; undefined when all are empty.
template <typename T>
Tensor<T> stack_rows(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
  Tensor<T> out;
  for (const auto& p : parts) {
    if (!p.defined() || p.dim(0) == 0) continue;
    out = out.defined() ? ops::concat_tokens(tape, out, p) : p;
  }
  return out;
}

}  // namespace

template <typename T>
ForwardTrace<T> forward(Tape<T>* tape, const Model<T>& model, const Tensor<T>& images, const ForwardOptions& options) {
  const auto& cfg = model.config;
  ForwardTrace<T> trace;
  trace.layout = layout_for(model);
  const auto& layout = trace.layout;
  if (!options.only_head.empty() && options.only_head != "base" && !model.task_index(options.only_head)) {
    throw NotFoundError("forward: unknown head '" + options.only_head + "'");
  }
  const std::size_t batch = images.dim(0);

  Tensor<T> z = patch_embed(tape, images, cfg, model.backbone);
  std::vector<Tensor<T>> cls_parts, carried_mem;
  for (const auto& t : model.tasks) {
    if (t.has_cls()) cls_parts.push_back(t.cls);
  }
  for (const auto& t : model.tasks) {
    if (t.carried_slots() > 0) carried_mem.push_back(t.memory[0]);
  }
  if (auto cls = stack_rows(tape, cls_parts); cls.defined()) {
    z = ops::concat_tokens(tape, z, ops::broadcast_batch(tape, cls, batch));
  }
  if (auto mem = stack_rows(tape, carried_mem); mem.defined()) {
    z = ops::concat_tokens(tape, z, ops::broadcast_batch(tape, mem, batch));
  }
  if (z.dim(1) != layout.carried_count()) throw DimensionError("forward: token layout disagrees with model tasks");

  for (std::size_t l = 0; l < cfg.depth; ++l) {
    std::vector<Tensor<T>> ext_parts;
    for (std::size_t j = 0; j < model.tasks.size(); ++j) {
      const auto& t = model.tasks[j];
      if (t.variant == MemoryVariant::per_layer) {
        if (t.mem_count(l) > 0) ext_parts.push_back(t.memory[l]);
      } else if (t.variant == MemoryVariant::propagated_added && l > 0 && t.mem_count(l) > 0) {
        z = ops::add_rows(tape, z, t.memory[l], layout.carried_memory_offset(j + 1));
      }
    }
    const Tensor<T> ext = stack_rows(tape, ext_parts);
    const MaskMatrix mask = build_mask(layout, options.policy, l);
    auto out = encoder_layer(tape, z, model.backbone.layers[l], cfg.heads, &mask, ext);
    z = std::move(out.tokens);
    if (options.keep_trace) {
      trace.attention.push_back(std::move(out.attention));
      trace.layer_outputs.push_back(z);
    }
  }

  auto head = [&](const std::string& name, std::size_t token, const Tensor<T>& w, const Tensor<T>& b) {
    auto x = ops::layernorm(tape, ops::select_token(tape, z, token), model.backbone.ln_g, model.backbone.ln_b);
    trace.logits.emplace_back(name, ops::linear(tape, x, w, b));
    trace.features.emplace_back(name, std::move(x));
  };
  if (options.only_head.empty() || options.only_head == "base") {
    head("base", 0, model.backbone.head_w, model.backbone.head_b);
  }
  for (std::size_t j = 0; j < model.tasks.size(); ++j) {
    const auto& t = model.tasks[j];
    if (!options.only_head.empty() && options.only_head != t.name) continue;
    head(t.name, layout.readout(j + 1), t.head_w, t.head_b);
  }
  return trace;
}

template <typename T>
Tensor<T> reference_vit_logits(const Model<T>& model, const Tensor<T>& images) {
  const auto& cfg = model.config;
  Tensor<T> z = patch_embed<T>(nullptr, images, cfg, model.backbone);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    z = encoder_layer<T>(nullptr, z, model.backbone.layers[l], cfg.heads, nullptr, Tensor<T>()).tokens;
  }
  auto x = ops::layernorm<T>(nullptr, ops::select_token<T>(nullptr, z, 0), model.backbone.ln_g, model.backbone.ln_b);
  return ops::linear<T>(nullptr, x, model.backbone.head_w, model.backbone.head_b);
}

#define MEMVIT_INSTANTIATE_ENCODER(T)                                                                              \
  template struct ForwardTrace<T>;                                                                                 \
  template Tensor<T> patch_embed<T>(Tape<T>*, const Tensor<T>&, const ModelConfig&, const Backbone<T>&);          \
  template LayerOutput<T> encoder_layer<T>(Tape<T>*, const Tensor<T>&, const LayerParams<T>&, std::size_t,        \
                                           const MaskMatrix*, const Tensor<T>&);                                  \
  template ForwardTrace<T> forward<T>(Tape<T>*, const Model<T>&, const Tensor<T>&, const ForwardOptions&);        \
  template Tensor<T> reference_vit_logits<T>(const Model<T>&, const Tensor<T>&);
MEMVIT_INSTANTIATE_ENCODER(float)
MEMVIT_INSTANTIATE_ENCODER(double)
#undef MEMVIT_INSTANTIATE_ENCODER

}  // namespace memvit
